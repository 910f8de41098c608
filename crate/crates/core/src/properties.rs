//! Property tests for invariants that cut across modules.

use proptest::prelude::*;
use rand::Rng;

use crate::cascade::{additive_martingale, partition_function, truncated_martingale};
use crate::envelope::{dyadic_windows, envelope_exceedance, lil_statistic, psi_value, PsiSpec, LIL_MIN_DEPTH};
use crate::offspring::{gaussian_boundary_model, lattice_boundary_model};
use crate::rng::{derive_stream, stream_id};
use crate::spine::{sample_spine_path, SpineChildRule};
use crate::tree::grow_replica;
use crate::walk::{associated_walk, build_renewal, conditioned_paths, RenewalMethod, RenewalTable};

fn lattice_renewal() -> RenewalTable {
    let walk = associated_walk(&lattice_boundary_model()).unwrap();
    build_renewal(&walk, 60.0, walk.lattice_span().unwrap(), RenewalMethod::ExactLattice, 0, 0).unwrap()
}

fn iterated_log(t: f64, j: usize) -> f64 {
    (0..j).fold(t, |x, _| x.ln())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iterated_psi_is_reciprocal_product_of_logs(k in 1usize..=3, lift in 0.01f64..3.0) {
        // log t ranges over (log t0, log t0 + lift * (1 + log t0)).
        let spec = PsiSpec::iterated(k);
        let log_t = spec.t0().ln() * (1.0 + lift) + lift;
        let t = log_t.exp();
        let expected = 1.0 / (1..=k).map(|j| iterated_log(t, j)).product::<f64>();
        let got = psi_value(&spec, t).unwrap();
        prop_assert!((got / expected - 1.0).abs() < 1e-10, "psi = {got}, expected {expected}");
    }

    #[test]
    fn perturbed_psi_adds_the_epsilon_power(k in 1usize..=3, eps in 0.05f64..2.0, lift in 0.01f64..2.0) {
        let base = PsiSpec::iterated(k);
        let spec = PsiSpec::perturbed(k, eps);
        let t = (spec.t0().ln() * (1.0 + lift) + lift).exp();
        let ratio = psi_value(&base, t).unwrap() / psi_value(&spec, t).unwrap();
        let expected = iterated_log(t, k).powf(eps);
        prop_assert!((ratio / expected - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dyadic_windows_tile_inside_the_range(n0 in 1usize..5000, extra in 0usize..100_000) {
        let horizon = n0 + extra;
        let w = dyadic_windows(n0, horizon);
        for (i, &(a, b)) in w.iter().enumerate() {
            prop_assert!(a.is_power_of_two() && b == 2 * a);
            prop_assert!(a >= n0 && b - 1 <= horizon);
            if i > 0 {
                prop_assert_eq!(w[i - 1].1, a);
            }
        }
        // No further window fits.
        let next = w.last().map_or(n0.next_power_of_two(), |&(_, b)| b);
        prop_assert!(2 * next - 1 > horizon || next < n0);
    }

    #[test]
    fn envelope_counts_match_brute_force(
        series in prop::collection::vec(prop::collection::vec(0.0f64..20.0, 80), 1..6),
        level in 0.0f64..20.0,
        n0 in 1usize..40,
    ) {
        let report = envelope_exceedance("flat", &series, |_| level, n0).unwrap();
        let s = &report.summary;
        let windows = dyadic_windows(n0, 79);
        let mut aa_below = 0;
        let mut io_above = 0;
        for (r, x) in series.iter().enumerate() {
            let above = (n0..80).filter(|&n| x[n] < level).count();
            let below = (n0..80).filter(|&n| x[n] > level).count();
            prop_assert_eq!(s.per_replica[r].above, above);
            prop_assert_eq!(s.per_replica[r].below, below);
            aa_below += usize::from(above == 0);
            io_above += usize::from(!windows.is_empty() && windows.iter().all(|&(a, b)| (a..b).any(|n| x[n] <= level)));
        }
        let reps = series.len() as f64;
        prop_assert_eq!(s.aa_below_fraction, aa_below as f64 / reps);
        prop_assert_eq!(s.io_above_fraction, io_above as f64 / reps);
        prop_assert_eq!(report.comparison[0].len(), 80 - n0);
    }

    #[test]
    fn stream_ids_are_injective_and_streams_reproducible(
        seed in any::<u64>(),
        a in 0u64..(1 << 40), pa in any::<u16>(),
        b in 0u64..(1 << 40), pb in any::<u16>(),
    ) {
        prop_assert_eq!(stream_id(a, pa) == stream_id(b, pb), (a, pa) == (b, pb));
        let x: [u64; 4] = derive_stream(seed, a, pa).random();
        let y: [u64; 4] = derive_stream(seed, a, pa).random();
        prop_assert_eq!(x, y);
        if (a, pa) != (b, pb) {
            let z: [u64; 4] = derive_stream(seed, b, pb).random();
            prop_assert_ne!(x, z);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lil_statistic_is_scale_invariant(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = derive_stream(seed, 0, 0);
        let paths: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut s = 0.0;
                (0..=LIL_MIN_DEPTH)
                    .map(|i| {
                        if i > 0 {
                            s += if rng.random::<bool>() { 1.0 } else { -1.0 };
                        }
                        s
                    })
                    .collect()
            })
            .collect();
        let scaled: Vec<Vec<f64>> = paths.iter().map(|p| p.iter().map(|x| c * x).collect()).collect();
        let a = lil_statistic(&paths, 1.0).unwrap();
        let b = lil_statistic(&scaled, c * c).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn conditioned_lattice_paths_never_cross_the_barrier(seed in any::<u64>(), k in 0usize..4) {
        let walk = associated_walk(&lattice_boundary_model()).unwrap();
        let r = lattice_renewal();
        let alpha = k as f64 * walk.lattice_span().unwrap();
        for p in conditioned_paths(&walk, &r, alpha, 60, 8, seed).unwrap() {
            prop_assert!(p.states.iter().all(|&s| s >= -alpha - 1e-9));
        }
    }

    #[test]
    fn spine_positions_stay_above_the_barrier(seed in any::<u64>(), k in 0usize..4) {
        let law = lattice_boundary_model();
        let r = lattice_renewal();
        let alpha = k as f64 * law.lattice_span().unwrap();
        let mut rng = derive_stream(seed, 0, 0);
        let path = sample_spine_path(&law, &r, alpha, 60, SpineChildRule::SizeBiased, &mut rng).unwrap();
        prop_assert_eq!(path.len(), 61);
        prop_assert!(path.iter().all(|&v| v >= -alpha - 1e-9));
    }

    #[test]
    fn tree_identities_hold(seed in any::<u64>(), n in 1usize..9, alpha in 0.0f64..4.0) {
        let law = gaussian_boundary_model();
        let tree = grow_replica(&law, n, 1 << 12, seed, 0).unwrap();
        let w = additive_martingale(&tree, n).unwrap();
        let z = partition_function(&tree, 1.0, n).unwrap().z;
        prop_assert!((w - z).abs() <= 1e-12 * w.max(1.0));
        let walk = associated_walk(&lattice_boundary_model()).unwrap();
        let r = lattice_renewal();
        let lt = grow_replica(&lattice_boundary_model(), n, 1 << 12, seed, 1).unwrap();
        let a = alpha.div_euclid(walk.lattice_span().unwrap()) * walk.lattice_span().unwrap();
        prop_assert!(truncated_martingale(&lt, n, a, &r).unwrap() >= 0.0);
        prop_assert_eq!(tree.populations(), (0..=n).map(|g| 1usize << g).collect::<Vec<_>>());
    }
}
