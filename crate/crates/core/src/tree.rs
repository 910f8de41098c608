//! Branching random walk realizations stored generation by generation.
//!
//! Generation `n` is a set of flat arrays indexed by position within the
//! generation. Children of a node are contiguous in the next generation, so
//! the descendants of a node at any later level form a single index range.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offspring::OffspringLaw;
use crate::rng::{derive_stream, par_replicas, purpose};
use crate::stats::{Estimate, Welford};
use crate::walk::associated_walk;

/// Default per-generation particle cap.
pub const DEFAULT_CAP: usize = 1 << 25;
/// Expected particle count above which many-to-one estimation refuses to run.
pub const MANY_TO_ONE_BUDGET: f64 = 4.0e9;

const ROOT_PARENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub generation: usize,
    pub index: usize,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId {
        generation: 0,
        index: 0,
    };

    pub fn new(generation: usize, index: usize) -> Self {
        Self { generation, index }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Generation {
    parent: Vec<u32>,
    displacement: Vec<f64>,
    position: Vec<f64>,
    /// Offsets into the next generation, `len + 1` entries once it exists.
    child_start: Vec<u32>,
}

impl Generation {
    fn len(&self) -> usize {
        self.position.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrwTree {
    law: OffspringLaw,
    generations: Vec<Generation>,
    extinct: bool,
}

impl BrwTree {
    fn root(law: OffspringLaw) -> Self {
        Self {
            law,
            generations: vec![Generation {
                parent: vec![ROOT_PARENT],
                displacement: vec![0.0],
                position: vec![0.0],
                child_start: Vec::new(),
            }],
            extinct: false,
        }
    }

    pub fn law(&self) -> &OffspringLaw {
        &self.law
    }

    /// Number of generations grown below the root.
    pub fn depth(&self) -> usize {
        self.generations.len() - 1
    }

    pub fn is_extinct(&self) -> bool {
        self.extinct
    }

    pub fn population(&self, n: usize) -> Result<usize> {
        Ok(self.generation(n)?.len())
    }

    pub fn populations(&self) -> Vec<usize> {
        self.generations.iter().map(Generation::len).collect()
    }

    fn generation(&self, n: usize) -> Result<&Generation> {
        self.generations.get(n).ok_or(Error::DepthOutOfRange {
            requested: n,
            depth: self.depth(),
        })
    }

    /// Positions `V(x)` for `|x| = n` in flat-index order.
    pub fn generation_positions(&self, n: usize) -> Result<&[f64]> {
        Ok(&self.generation(n)?.position)
    }

    pub fn generation_displacements(&self, n: usize) -> Result<&[f64]> {
        Ok(&self.generation(n)?.displacement)
    }

    /// Flat index of each node's parent in generation `n - 1`.
    pub fn generation_parents(&self, n: usize) -> Result<&[u32]> {
        Ok(&self.generation(n)?.parent)
    }

    pub fn position(&self, node: NodeId) -> Result<f64> {
        self.check_node(node)?;
        Ok(self.generations[node.generation].position[node.index])
    }

    pub fn check_node(&self, node: NodeId) -> Result<()> {
        match self.generations.get(node.generation) {
            Some(g) if node.index < g.len() => Ok(()),
            _ => Err(Error::InvalidNode {
                generation: node.generation,
                index: node.index,
            }),
        }
    }

    /// Minimum of `V(x)` over every grown node, the root included.
    pub fn min_position(&self) -> f64 {
        self.generations
            .iter()
            .flat_map(|g| g.position.iter())
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    /// Minimum over generations `0..=n`.
    pub fn min_position_to(&self, n: usize) -> Result<f64> {
        self.generation(n)?;
        Ok(self.generations[..=n]
            .iter()
            .flat_map(|g| g.position.iter())
            .fold(f64::INFINITY, |m, &v| m.min(v)))
    }

    /// `(V(x_1), ..., V(x_n))` along the ancestral line of `node`.
    pub fn ancestral_path(&self, node: NodeId) -> Result<Vec<f64>> {
        self.check_node(node)?;
        let mut path = vec![0.0; node.generation];
        let mut idx = node.index;
        for g in (1..=node.generation).rev() {
            let gen = &self.generations[g];
            path[g - 1] = gen.position[idx];
            idx = gen.parent[idx] as usize;
        }
        Ok(path)
    }

    /// Flat indices of the ancestors `x_0, ..., x_n` of `node`.
    pub fn ancestors(&self, node: NodeId) -> Result<Vec<usize>> {
        self.check_node(node)?;
        let mut out = vec![0usize; node.generation + 1];
        let mut idx = node.index;
        for g in (0..=node.generation).rev() {
            out[g] = idx;
            if g > 0 {
                idx = self.generations[g].parent[idx] as usize;
            }
        }
        Ok(out)
    }

    /// Children of `node` as a range of flat indices in the next generation.
    pub fn children(&self, node: NodeId) -> Result<Range<usize>> {
        self.descendants(node, node.generation + 1)
    }

    /// Descendants of `node` at level `n` as a range of flat indices.
    pub fn descendants(&self, node: NodeId, n: usize) -> Result<Range<usize>> {
        self.check_node(node)?;
        self.generation(n)?;
        if n < node.generation {
            return Err(Error::DepthOutOfRange {
                requested: n,
                depth: self.depth(),
            });
        }
        let (mut lo, mut hi) = (node.index, node.index + 1);
        for g in node.generation..n {
            let starts = &self.generations[g].child_start;
            lo = starts[lo] as usize;
            hi = starts[hi] as usize;
        }
        Ok(lo..hi)
    }

    /// Prefix minima `min_{0 <= k <= n} V(x_k)` for every `|x| = n`, the root
    /// term `V(root) = 0` included.
    pub fn prefix_minima(&self, n: usize) -> Result<Vec<f64>> {
        self.generation(n)?;
        let mut mins: Vec<f64> = vec![0.0];
        for g in 1..=n {
            let gen = &self.generations[g];
            mins = gen
                .parent
                .iter()
                .zip(&gen.position)
                .map(|(&p, &v)| mins[p as usize].min(v))
                .collect();
        }
        Ok(mins)
    }

    /// Writes the tree as little-endian columns: a header, then per
    /// generation its size followed by parent (u32), displacement (f64) and
    /// position (f64) arrays.
    pub fn write_columnar<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(COLUMNAR_MAGIC)?;
        w.write_all(&(self.depth() as u64).to_le_bytes())?;
        w.write_all(&[u8::from(self.extinct)])?;
        for gen in &self.generations {
            w.write_all(&(gen.len() as u64).to_le_bytes())?;
            for p in &gen.parent {
                w.write_all(&p.to_le_bytes())?;
            }
            for d in &gen.displacement {
                w.write_all(&d.to_le_bytes())?;
            }
            for v in &gen.position {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_columnar<R: Read>(law: OffspringLaw, mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != COLUMNAR_MAGIC {
            return Err(bad("not a columnar tree dump"));
        }
        let depth = read_u64(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut generations = Vec::with_capacity(depth + 1);
        for _ in 0..=depth {
            let len = read_u64(&mut r)? as usize;
            let mut gen = Generation::default();
            let mut b4 = [0u8; 4];
            let mut b8 = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b4)?;
                gen.parent.push(u32::from_le_bytes(b4));
            }
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                gen.displacement.push(f64::from_le_bytes(b8));
            }
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                gen.position.push(f64::from_le_bytes(b8));
            }
            generations.push(gen);
        }
        // Child offsets are implied by the sorted parent column.
        for g in 0..depth {
            let (head, tail) = generations.split_at_mut(g + 1);
            let gen = &mut head[g];
            let next = &tail[0];
            let mut starts = vec![0u32; gen.len() + 1];
            for &p in &next.parent {
                let p = p as usize;
                if p >= gen.len() {
                    return Err(bad("parent index out of range"));
                }
                starts[p + 1] += 1;
            }
            for i in 0..gen.len() {
                starts[i + 1] += starts[i];
            }
            gen.child_start = starts;
        }
        Ok(Self {
            law,
            generations,
            extinct: flag[0] != 0,
        })
    }
}

const COLUMNAR_MAGIC: &[u8; 8] = b"BRWTREE1";

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Grows a realization to `depth` generations. Extinct trees keep empty
/// generations up to `depth`.
pub fn grow_tree<R: Rng + ?Sized>(law: &OffspringLaw, depth: usize, cap: usize, rng: &mut R) -> Result<BrwTree> {
    let mut tree = BrwTree::root(law.clone());
    let mut children = Vec::new();
    for g in 0..depth {
        let cur = &tree.generations[g];
        let mut next = Generation::default();
        let mut starts = Vec::with_capacity(cur.len() + 1);
        starts.push(0u32);
        for i in 0..cur.len() {
            let v = cur.position[i];
            children.clear();
            law.sample_offspring_into(rng, &mut children);
            if next.len() + children.len() > cap {
                let population = next.len() + children.len();
                return Err(Error::CapExceeded {
                    generation: g + 1,
                    population,
                    cap,
                    partial: Box::new(tree),
                });
            }
            for &u in &children {
                next.parent.push(i as u32);
                next.displacement.push(u);
                next.position.push(v + u);
            }
            starts.push(next.len() as u32);
        }
        tree.generations[g].child_start = starts;
        if next.len() == 0 {
            tree.extinct = true;
        }
        tree.generations.push(next);
    }
    Ok(tree)
}

/// Paired estimates of the two sides of the many-to-one identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManyToOne {
    /// `E[sum_{|x|=n} g(V(x_1), ..., V(x_n)) exp(-V(x))]` over trees.
    pub tree_side: Estimate,
    /// `E[g(S_1, ..., S_n)]` over associated-walk paths.
    pub walk_side: Estimate,
}

/// Estimates both sides of the many-to-one identity with `reps` trees and
/// `reps` walk paths, each replica on its own derived stream.
pub fn many_to_one_expectation<G>(law: &OffspringLaw, g: G, n: usize, reps: usize, seed: u64) -> Result<ManyToOne>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    let gs: [&PathFunctional; 1] = [&g];
    Ok(many_to_one_multi(law, &gs, n, reps, seed)?[0])
}

pub type PathFunctional<'a> = dyn Fn(&[f64]) -> f64 + Sync + 'a;

/// [`many_to_one_expectation`] for several functionals sharing the same
/// trees and walk paths.
pub fn many_to_one_multi(
    law: &OffspringLaw,
    gs: &[&PathFunctional<'_>],
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<ManyToOne>> {
    let expected = law.mean_children().powi(n as i32) * reps as f64;
    if expected > MANY_TO_ONE_BUDGET {
        return Err(Error::BudgetExceeded(format!(
            "many-to-one at n = {n} with {reps} replicas needs about {expected:.3e} particles"
        )));
    }
    let walk = associated_walk(law)?;
    let tree_vals: Vec<Result<Vec<f64>>> = par_replicas(seed, purpose::TREE, reps, |_, rng| {
        let tree = grow_tree(law, n, DEFAULT_CAP, rng)?;
        let mut totals = vec![0.0; gs.len()];
        for i in 0..tree.population(n)? {
            let path = tree.ancestral_path(NodeId::new(n, i))?;
            let w = (-path.last().copied().unwrap_or(0.0)).exp();
            for (t, g) in totals.iter_mut().zip(gs) {
                *t += g(&path) * w;
            }
        }
        Ok(totals)
    });
    let mut tree_acc = vec![Welford::default(); gs.len()];
    for row in tree_vals {
        for (a, v) in tree_acc.iter_mut().zip(row?) {
            a.push(v);
        }
    }
    let walk_vals = par_replicas(seed, purpose::WALK, reps, |_, rng| {
        let path = walk.sample_path(n, rng);
        gs.iter().map(|g| g(&path)).collect::<Vec<f64>>()
    });
    let mut walk_acc = vec![Welford::default(); gs.len()];
    for row in walk_vals {
        for (a, v) in walk_acc.iter_mut().zip(row) {
            a.push(v);
        }
    }
    Ok(tree_acc
        .iter()
        .zip(&walk_acc)
        .map(|(t, w)| ManyToOne {
            tree_side: t.estimate(),
            walk_side: w.estimate(),
        })
        .collect())
}

/// Grows `reps` independent trees in parallel and maps each through `f`.
pub fn map_trees<T, F>(law: &OffspringLaw, depth: usize, cap: usize, reps: usize, seed: u64, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize, &BrwTree) -> Result<T> + Sync + Send,
{
    par_replicas(seed, purpose::TREE, reps, |i, rng| {
        let tree = grow_tree(law, depth, cap, rng)?;
        f(i, &tree)
    })
}

/// Single tree on the stream for `(seed, replica, TREE)`.
pub fn grow_replica(law: &OffspringLaw, depth: usize, cap: usize, seed: u64, replica: u64) -> Result<BrwTree> {
    let mut rng = derive_stream(seed, replica, purpose::TREE);
    grow_tree(law, depth, cap, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::{
        gaussian_boundary_model, lattice_boundary_model, Atom, CountLaw, Displacement, LawKind, LATTICE_SPAN,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn depth_zero_is_root() {
        let t = grow_tree(&lattice_boundary_model(), 0, 10, &mut rng(1)).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(t.generation_positions(0).unwrap(), &[0.0]);
        assert_eq!(t.min_position(), 0.0);
        assert!(t.ancestral_path(NodeId::ROOT).unwrap().is_empty());
    }

    #[test]
    fn binary_population_and_positions() {
        let law = lattice_boundary_model();
        let t = grow_tree(&law, 20, DEFAULT_CAP, &mut rng(2)).unwrap();
        assert_eq!(t.population(20).unwrap(), 1 << 20);
        for n in 1..=20 {
            let gen = &t.generations[n];
            for i in 0..gen.len() {
                let p = gen.parent[i] as usize;
                assert_eq!(gen.position[i], t.generations[n - 1].position[p] + gen.displacement[i]);
            }
        }
        for &v in t.generation_positions(1).unwrap() {
            assert!(v == LATTICE_SPAN || v == -LATTICE_SPAN);
        }
        assert!(matches!(t.generation_positions(21), Err(Error::DepthOutOfRange { .. })));
    }

    #[test]
    fn cap_exceeded_carries_partial_tree() {
        let law = lattice_boundary_model();
        match grow_tree(&law, 10, 100, &mut rng(3)) {
            Err(Error::CapExceeded {
                generation, partial, ..
            }) => {
                assert_eq!(generation, 7);
                assert_eq!(partial.depth(), 6);
                assert_eq!(partial.population(6).unwrap(), 64);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extinction_frequency_matches_fixed_point() {
        let count = CountLaw::new(vec![0.25, 0.25, 0.5]).unwrap();
        let q = count.extinction_probability();
        let law = OffspringLaw::new(LawKind::FiniteAtom, count, Displacement::Atoms(vec![Atom::new(0.5, 1.0)]))
            .unwrap();
        let reps = 20_000;
        let outcomes = map_trees(&law, 30, 1 << 22, reps, 9, |_, t| Ok(if t.is_extinct() { 1.0 } else { 0.0 }));
        let xs: Vec<f64> = outcomes.into_iter().map(|r| r.unwrap()).collect();
        let est = Estimate::from_samples(&xs);
        // Survivors to depth 30 that later die out are rare at this depth.
        assert!(est.within(q, 3.0) || (est.mean - q).abs() < 2e-3, "{est:?} vs {q}");
    }

    #[test]
    fn extinct_tree_has_empty_generations() {
        let law = OffspringLaw::new_allow_subcritical(
            LawKind::FiniteAtom,
            CountLaw::fixed(0),
            Displacement::Atoms(vec![Atom::new(0.0, 1.0)]),
        )
        .unwrap();
        let t = grow_tree(&law, 5, 10, &mut rng(4)).unwrap();
        assert!(t.is_extinct());
        assert_eq!(t.depth(), 5);
        assert!(t.generation_positions(3).unwrap().is_empty());
    }

    #[test]
    fn paths_descendants_and_prefix_minima() {
        let law = gaussian_boundary_model();
        let t = grow_tree(&law, 8, DEFAULT_CAP, &mut rng(5)).unwrap();
        let mins = t.prefix_minima(8).unwrap();
        for i in (0..256).step_by(17) {
            let node = NodeId::new(8, i);
            let path = t.ancestral_path(node).unwrap();
            assert_eq!(*path.last().unwrap(), t.position(node).unwrap());
            let m = path.iter().fold(0.0f64, |m, &v| m.min(v));
            assert_eq!(m, mins[i]);
        }
        let node = NodeId::new(3, 5);
        let r = t.descendants(node, 8).unwrap();
        assert_eq!(r.len(), 32);
        for j in r {
            assert_eq!(t.ancestors(NodeId::new(8, j)).unwrap()[3], 5);
        }
        assert!(matches!(t.ancestral_path(NodeId::new(2, 99)), Err(Error::InvalidNode { .. })));
    }

    #[test]
    fn min_position_is_monotone_in_depth() {
        let t = grow_tree(&gaussian_boundary_model(), 12, DEFAULT_CAP, &mut rng(6)).unwrap();
        for n in 0..12 {
            assert!(t.min_position_to(n).unwrap() >= t.min_position_to(n + 1).unwrap());
        }
        assert_eq!(t.min_position(), t.min_position_to(12).unwrap());
    }

    #[test]
    fn growth_is_reproducible() {
        let law = gaussian_boundary_model();
        let a = grow_replica(&law, 10, DEFAULT_CAP, 77, 3).unwrap();
        let b = grow_replica(&law, 10, DEFAULT_CAP, 77, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn columnar_round_trip() {
        let law = gaussian_boundary_model();
        let t = grow_tree(&law, 6, DEFAULT_CAP, &mut rng(7)).unwrap();
        let mut buf = Vec::new();
        t.write_columnar(&mut buf).unwrap();
        let back = BrwTree::read_columnar(law, buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn many_to_one_constant_and_last() {
        let law = lattice_boundary_model();
        let r = many_to_one_expectation(&law, |_| 1.0, 3, 20_000, 1).unwrap();
        assert!(r.tree_side.within(1.0, 3.0), "{r:?}");
        assert_eq!(r.walk_side.mean, 1.0);
        let r = many_to_one_expectation(&law, |p| p[0], 1, 50_000, 2).unwrap();
        assert!(r.tree_side.within(0.0, 3.0) && r.walk_side.within(0.0, 3.0), "{r:?}");
    }

    #[test]
    fn many_to_one_budget() {
        let law = lattice_boundary_model();
        assert!(matches!(
            many_to_one_expectation(&law, |_| 1.0, 40, 10, 1),
            Err(Error::BudgetExceeded(_))
        ));
    }
}
