//! Martingales and finite-level cascade measures on a grown tree.
//!
//! Sums over a generation run in ascending flat-index order. Ball masses
//! are summed hierarchically (a node's mass is the ordered sum of its
//! children's masses), which makes finite-level additivity bit-exact.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{BrwTree, NodeId};
use crate::walk::RenewalTable;

pub fn additive_martingale(tree: &BrwTree, n: usize) -> Result<f64> {
    Ok(tree.generation_positions(n)?.iter().map(|v| (-v).exp()).sum())
}

pub fn derivative_martingale(tree: &BrwTree, n: usize) -> Result<f64> {
    Ok(tree.generation_positions(n)?.iter().map(|v| v * (-v).exp()).sum())
}

/// `sum_{|x|=n} R(V(x) + alpha) exp(-V(x)) 1{min_{y <= x} V(y) >= -alpha}`.
pub fn truncated_martingale(tree: &BrwTree, n: usize, alpha: f64, renewal: &RenewalTable) -> Result<f64> {
    let mins = tree.prefix_minima(n)?;
    let pos = tree.generation_positions(n)?;
    let mut total = 0.0;
    for (&v, &m) in pos.iter().zip(&mins) {
        if m >= -alpha {
            total += renewal.checked_eval(v + alpha)? * (-v).exp();
        }
    }
    Ok(total)
}

/// Per-generation martingale values of one tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTrace {
    pub alpha: f64,
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub d_alpha: Vec<f64>,
    pub sqrt_n_w: Vec<f64>,
}

impl MartingaleTrace {
    /// CSV rows `replica_id,n,W_n,D_n,alpha,D_n_alpha,sqrtn_W_n`.
    pub fn write_csv_rows<W: Write>(&self, replica: usize, mut w: W) -> Result<()> {
        for n in 0..self.w.len() {
            writeln!(
                w,
                "{replica},{n},{:.17e},{:.17e},{},{:.17e},{:.17e}",
                self.w[n], self.d[n], self.alpha, self.d_alpha[n], self.sqrt_n_w[n]
            )?;
        }
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "replica_id,n,W_n,D_n,alpha,D_n_alpha,sqrtn_W_n";
}

/// All martingales for generations `0..=depth` in one sweep.
pub fn martingale_trace(tree: &BrwTree, alpha: f64, renewal: &RenewalTable) -> Result<MartingaleTrace> {
    let depth = tree.depth();
    let mut trace = MartingaleTrace {
        alpha,
        w: Vec::with_capacity(depth + 1),
        d: Vec::with_capacity(depth + 1),
        d_alpha: Vec::with_capacity(depth + 1),
        sqrt_n_w: Vec::with_capacity(depth + 1),
    };
    let mut mins: Vec<f64> = vec![0.0];
    for n in 0..=depth {
        let pos = tree.generation_positions(n)?;
        if n > 0 {
            let parents = tree.generation_parents(n)?;
            mins = parents
                .iter()
                .zip(pos)
                .map(|(&p, &v)| mins[p as usize].min(v))
                .collect();
        }
        let (mut w, mut d, mut da) = (0.0, 0.0, 0.0);
        for (&v, &m) in pos.iter().zip(&mins) {
            let e = (-v).exp();
            w += e;
            d += v * e;
            if m >= -alpha {
                da += renewal.checked_eval(v + alpha)? * e;
            }
        }
        trace.w.push(w);
        trace.d.push(d);
        trace.d_alpha.push(da);
        trace.sqrt_n_w.push((n as f64).sqrt() * w);
    }
    Ok(trace)
}

/// `Z_{beta,n}` and the phase-dependent multiplier under which it is
/// expected to be tight; the multiplier is reported, not applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionFunction {
    pub z: f64,
    pub suggested_normalization: f64,
}

pub fn partition_function(tree: &BrwTree, beta: f64, n: usize) -> Result<PartitionFunction> {
    if !(beta > 0.0) {
        return Err(Error::DomainError(format!("beta must be positive, got {beta}")));
    }
    let z = if beta == 1.0 {
        additive_martingale(tree, n)?
    } else {
        tree.generation_positions(n)?.iter().map(|v| (-beta * v).exp()).sum()
    };
    let nf = n as f64;
    let suggested_normalization = if beta < 1.0 {
        tree.law().rho(beta).powf(-nf)
    } else if beta == 1.0 {
        nf.sqrt()
    } else {
        nf.powf(1.5 * beta)
    };
    Ok(PartitionFunction {
        z,
        suggested_normalization,
    })
}

/// `mu_n(B(x)) = sum_{|y|=n, y > x} exp(-V(y))`.
pub fn ball_mass_finite(tree: &BrwTree, node: NodeId, n: usize) -> Result<f64> {
    tree.check_node(node)?;
    if n < node.generation || n > tree.depth() {
        return Err(Error::DepthOutOfRange {
            requested: n,
            depth: tree.depth(),
        });
    }
    Ok(hierarchical_sum(tree, node, n, f64::INFINITY, &|v, _| (-v).exp()))
}

/// Ordered sum over descendants of `node` at level `n`, each weighted by
/// `leaf(V(y), running prefix minimum)`; `running_min` is the prefix
/// minimum strictly above `node`.
fn hierarchical_sum(tree: &BrwTree, node: NodeId, n: usize, running_min: f64, leaf: &dyn Fn(f64, f64) -> f64) -> f64 {
    let v = tree.generation_positions(node.generation).expect("checked")[node.index];
    let m = running_min.min(v);
    if node.generation == n {
        return leaf(v, m);
    }
    let mut total = 0.0;
    for c in tree.children(node).expect("checked") {
        total += hierarchical_sum(tree, NodeId::new(node.generation + 1, c), n, m, leaf);
    }
    total
}

/// `c8 = sqrt(2 / (pi sigma^2))`.
pub fn c8(sigma2: f64) -> f64 {
    (2.0 / (std::f64::consts::PI * sigma2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallMassEstimate {
    pub node: NodeId,
    pub alpha: f64,
    pub m: usize,
    /// Finite-`m` approximant of the truncated-cascade ball mass.
    pub mu_alpha: f64,
    /// `(c8 / c0) mu_alpha`, present only when `valid`.
    pub mu: Option<f64>,
    /// `min_position(tree) > -alpha`.
    pub valid: bool,
    /// Largest relative change of the approximant over the last 3 levels.
    pub rel_change: f64,
    pub c0: f64,
    pub c8: f64,
}

impl BallMassEstimate {
    pub const CSV_HEADER: &'static str = "replica_id,node_path,alpha,m,mu_alpha,mu,valid,rel_change";

    pub fn write_csv_row<W: Write>(&self, replica: usize, node_path: &str, mut w: W) -> Result<()> {
        let mu = self.mu.map_or(String::new(), |v| format!("{v:.17e}"));
        writeln!(
            w,
            "{replica},{node_path},{},{},{:.17e},{mu},{},{:.6e}",
            self.alpha, self.m, self.mu_alpha, self.valid, self.rel_change
        )?;
        Ok(())
    }
}

/// Truncated-cascade ball mass at side depth `m`:
/// `sum_{|y| = |x| + m, y > x} R(V(y) + alpha) exp(-V(y)) 1{min_{z <= y} V(z) >= -alpha}`.
pub fn truncated_ball_mass(tree: &BrwTree, node: NodeId, alpha: f64, m: usize, renewal: &RenewalTable) -> Result<f64> {
    tree.check_node(node)?;
    let target = node.generation + m;
    if target > tree.depth() {
        return Err(Error::InsufficientDepth {
            generation: node.generation,
            needed: m,
            depth: tree.depth(),
        });
    }
    let path = tree.ancestral_path(node)?;
    // Prefix minimum over the root and the strict ancestors of `node`.
    let above = path[..path.len().saturating_sub(1)].iter().fold(0.0f64, |a, &b| a.min(b));
    Ok(hierarchical_sum(tree, node, target, above, &|v, pm| {
        if pm >= -alpha {
            renewal.eval(v + alpha) * (-v).exp()
        } else {
            0.0
        }
    }))
}

pub fn ball_mass_estimate(
    tree: &BrwTree,
    node: NodeId,
    alpha: f64,
    m: usize,
    renewal: &RenewalTable,
    sigma2: f64,
) -> Result<BallMassEstimate> {
    let mu_alpha = truncated_ball_mass(tree, node, alpha, m, renewal)?;
    let mut rel_change: f64 = 0.0;
    for j in 1..=3.min(m) {
        let earlier = truncated_ball_mass(tree, node, alpha, m - j, renewal)?;
        let change = if mu_alpha > 0.0 {
            (mu_alpha - earlier).abs() / mu_alpha
        } else if earlier > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        rel_change = rel_change.max(change);
    }
    let valid = tree.min_position() > -alpha;
    let c0 = renewal.c0();
    let c8 = c8(sigma2);
    Ok(BallMassEstimate {
        node,
        alpha,
        m,
        mu_alpha,
        mu: valid.then(|| c8 / c0 * mu_alpha),
        valid,
        rel_change,
        c0,
        c8,
    })
}

/// `D_{x,m} = sum_{|y| = |x| + m, y > x} (V(y) - V(x)) exp(-(V(y) - V(x)))`.
pub fn subtree_derivative(tree: &BrwTree, node: NodeId, m: usize) -> Result<f64> {
    let base = tree.position(node)?;
    let target = node.generation + m;
    if target > tree.depth() {
        return Err(Error::InsufficientDepth {
            generation: node.generation,
            needed: m,
            depth: tree.depth(),
        });
    }
    let range = tree.descendants(node, target)?;
    let pos = tree.generation_positions(target)?;
    Ok(pos[range].iter().map(|v| (v - base) * (-(v - base)).exp()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::{gaussian_boundary_model, lattice_boundary_model, LATTICE_SPAN};
    use crate::tree::{grow_tree, DEFAULT_CAP};
    use crate::walk::{associated_walk, build_renewal, RenewalMethod};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: f64 = LATTICE_SPAN;

    fn lattice_renewal() -> RenewalTable {
        let w = associated_walk(&lattice_boundary_model()).unwrap();
        build_renewal(&w, 80.0 * D, D, RenewalMethod::ExactLattice, 0, 0).unwrap()
    }

    #[test]
    fn initial_values() {
        let r = lattice_renewal();
        let t = grow_tree(&lattice_boundary_model(), 4, DEFAULT_CAP, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(additive_martingale(&t, 0).unwrap(), 1.0);
        assert_eq!(derivative_martingale(&t, 0).unwrap(), 0.0);
        assert_eq!(truncated_martingale(&t, 0, 3.0 * D, &r).unwrap(), 4.0);
        let tr = martingale_trace(&t, 2.0, &r).unwrap();
        assert_eq!(tr.w[0], 1.0);
        assert_eq!(tr.d_alpha[0], r.eval(2.0));
        for n in 0..=4 {
            assert_eq!(tr.w[n], additive_martingale(&t, n).unwrap());
            assert_eq!(tr.d_alpha[n], truncated_martingale(&t, n, 2.0, &r).unwrap());
        }
    }

    #[test]
    fn lattice_additive_martingale_enumeration_at_three() {
        // Every leaf sits at (2j - 3) d for j up-steps, so W_3 is an integer
        // combination of exp(-(2j - 3) d) with coefficients summing to 8.
        let t = grow_tree(&lattice_boundary_model(), 3, DEFAULT_CAP, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut counts = [0usize; 4];
        for &v in t.generation_positions(3).unwrap() {
            let j = ((v / D + 3.0) / 2.0).round();
            assert!(((2.0 * j - 3.0) * D - v).abs() < 1e-12);
            counts[j as usize] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 8);
        let expected: f64 = (0..4).map(|j| counts[j] as f64 * (-(2.0 * j as f64 - 3.0) * D).exp()).sum();
        assert!((additive_martingale(&t, 3).unwrap() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn truncation_at_zero_keeps_lines_touching_the_barrier() {
        let r = lattice_renewal();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = grow_tree(&lattice_boundary_model(), 2, DEFAULT_CAP, &mut rng).unwrap();
            let mut expected = 0.0;
            for i in 0..4 {
                let path = t.ancestral_path(NodeId::new(2, i)).unwrap();
                if path.iter().all(|&v| v >= 0.0) {
                    expected += r.eval(path[1]) * (-path[1]).exp();
                }
            }
            assert_eq!(truncated_martingale(&t, 2, 0.0, &r).unwrap(), expected);
        }
    }

    #[test]
    fn ball_mass_additivity_is_exact() {
        let t = grow_tree(&gaussian_boundary_model(), 10, DEFAULT_CAP, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let root = ball_mass_finite(&t, NodeId::ROOT, 10).unwrap();
        let w = additive_martingale(&t, 10).unwrap();
        assert!((root - w).abs() <= 1e-12 * w);
        for g in 0..10 {
            for i in [0, t.population(g).unwrap() - 1] {
                let node = NodeId::new(g, i);
                let parent = ball_mass_finite(&t, node, 10).unwrap();
                let kids: f64 = t
                    .children(node)
                    .unwrap()
                    .map(|c| ball_mass_finite(&t, NodeId::new(g + 1, c), 10).unwrap())
                    .sum();
                assert_eq!(parent, kids);
            }
        }
        let leaf = NodeId::new(10, 17);
        assert_eq!(ball_mass_finite(&t, leaf, 10).unwrap(), (-t.position(leaf).unwrap()).exp());
    }

    #[test]
    fn truncated_ball_mass_identities() {
        let r = lattice_renewal();
        let alpha = 2.0 * D;
        let t = grow_tree(&lattice_boundary_model(), 10, DEFAULT_CAP, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for i in 0..8 {
            let node = NodeId::new(3, i);
            let path = t.ancestral_path(node).unwrap();
            let v = *path.last().unwrap();
            let ok = path.iter().all(|&p| p >= -alpha);
            let m0 = truncated_ball_mass(&t, node, alpha, 0, &r).unwrap();
            let expect = if ok { (-v).exp() * r.eval(v + alpha) } else { 0.0 };
            assert_eq!(m0, expect);
            let parent = truncated_ball_mass(&t, node, alpha, 5, &r).unwrap();
            let kids: f64 = t
                .children(node)
                .unwrap()
                .map(|c| truncated_ball_mass(&t, NodeId::new(4, c), alpha, 4, &r).unwrap())
                .sum();
            assert_eq!(parent, kids);
        }
        assert!(matches!(
            truncated_ball_mass(&t, NodeId::new(8, 0), alpha, 3, &r),
            Err(Error::InsufficientDepth { .. })
        ));
    }

    #[test]
    fn ball_estimate_reports_validity() {
        let r = lattice_renewal();
        let t = grow_tree(&lattice_boundary_model(), 8, DEFAULT_CAP, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let e = ball_mass_estimate(&t, NodeId::ROOT, 50.0, 8, &r, D * D).unwrap();
        assert!(e.valid);
        let ratio = e.mu.unwrap() / e.mu_alpha;
        assert!((ratio - c8(D * D) / r.c0()).abs() < 1e-12);
        let e = ball_mass_estimate(&t, NodeId::ROOT, 0.0, 8, &r, D * D).unwrap();
        assert!(!e.valid && e.mu.is_none());
    }

    #[test]
    fn partition_function_phases() {
        let law = lattice_boundary_model();
        let t = grow_tree(&law, 6, DEFAULT_CAP, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let p1 = partition_function(&t, 1.0, 6).unwrap();
        assert_eq!(p1.z, additive_martingale(&t, 6).unwrap());
        assert_eq!(p1.suggested_normalization, 6f64.sqrt());
        let q = (2.0 - 3f64.sqrt()) / 4.0;
        let rho = 2.0 * (q * (0.5 * D).exp() + (1.0 - q) * (-0.5 * D).exp());
        let p = partition_function(&t, 0.5, 6).unwrap();
        assert!((p.suggested_normalization - rho.powi(-6)).abs() < 1e-12);
        assert_eq!(partition_function(&t, 2.0, 6).unwrap().suggested_normalization, 6f64.powf(3.0));
    }
}
