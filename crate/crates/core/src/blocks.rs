//! Coordinate block partitions and connection graphs between primal and
//! dual blocks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::problem::Problem;
use crate::{Error, Result};

/// Coupling magnitude below which a probed Jacobian sub-block counts as zero.
pub const PROBE_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Range(Range<usize>),
    List(Vec<usize>),
}

impl Block {
    pub fn len(&self) -> usize {
        match self {
            Block::Range(r) => r.len(),
            Block::List(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> BlockIter<'_> {
        match self {
            Block::Range(r) => BlockIter::Range(r.clone()),
            Block::List(v) => BlockIter::List(v.iter()),
        }
    }

    pub fn as_range(&self) -> Option<Range<usize>> {
        match self {
            Block::Range(r) => Some(r.clone()),
            Block::List(_) => None,
        }
    }
}

pub enum BlockIter<'a> {
    Range(Range<usize>),
    List(std::slice::Iter<'a, usize>),
}

impl Iterator for BlockIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        match self {
            BlockIter::Range(r) => r.next(),
            BlockIter::List(it) => it.next().copied(),
        }
    }
}

/// Disjoint blocks covering `0..total_dim`; block `j` is the range of the
/// projection `P_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    total_dim: usize,
    blocks: Vec<Block>,
    owner: Vec<usize>,
}

impl BlockPartition {
    pub fn new(total_dim: usize, blocks: Vec<Block>) -> Result<Self> {
        if total_dim == 0 {
            return Err(Error::Structure("partition dimension must be positive".into()));
        }
        if blocks.is_empty() {
            return Err(Error::Structure("partition needs at least one block".into()));
        }
        let mut owner = vec![usize::MAX; total_dim];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::Structure(format!("block {b} is empty")));
            }
            for i in block.iter() {
                if i >= total_dim {
                    return Err(Error::Structure(format!(
                        "block {b} index {i} outside 0..{total_dim}"
                    )));
                }
                if owner[i] != usize::MAX {
                    return Err(Error::Structure(format!(
                        "index {i} shared by blocks {} and {b}",
                        owner[i]
                    )));
                }
                owner[i] = b;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Structure(format!("index {i} not covered by any block")));
        }
        Ok(BlockPartition { total_dim, blocks, owner })
    }

    pub fn from_ranges(total_dim: usize, ranges: Vec<Range<usize>>) -> Result<Self> {
        Self::new(total_dim, ranges.into_iter().map(Block::Range).collect())
    }

    /// Consecutive blocks of the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let mut ranges = Vec::with_capacity(sizes.len());
        for &s in sizes {
            ranges.push(start..start + s);
            start += s;
        }
        Self::from_ranges(start, ranges)
    }

    pub fn single(total_dim: usize) -> Result<Self> {
        Self::from_ranges(total_dim, vec![0..total_dim])
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, j: usize) -> &Block {
        &self.blocks[j]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Block containing coordinate `i`.
    pub fn owner(&self, i: usize) -> usize {
        self.owner[i]
    }

    pub fn block_norm_sq(&self, j: usize, v: &[f64]) -> f64 {
        self.blocks[j].iter().map(|i| v[i] * v[i]).sum()
    }

    pub fn gather(&self, j: usize, v: &[f64]) -> Vec<f64> {
        self.blocks[j].iter().map(|i| v[i]).collect()
    }

    pub fn scatter(&self, j: usize, values: &[f64], v: &mut [f64]) {
        for (i, &val) in self.blocks[j].iter().zip(values) {
            v[i] = val;
        }
    }

    /// Zeroes everything outside block `j`.
    pub fn restrict(&self, j: usize, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for i in self.blocks[j].iter() {
            out[i] = v[i];
        }
        out
    }
}

/// Flat vector viewed through a partition.
#[derive(Debug, Clone)]
pub struct BlockVector<'a> {
    pub data: Vec<f64>,
    partition: &'a BlockPartition,
}

impl<'a> BlockVector<'a> {
    pub fn new(data: Vec<f64>, partition: &'a BlockPartition) -> Result<Self> {
        if data.len() != partition.total_dim() {
            return Err(Error::Structure(format!(
                "vector length {} does not match partition dimension {}",
                data.len(),
                partition.total_dim()
            )));
        }
        Ok(BlockVector { data, partition })
    }

    pub fn zeros(partition: &'a BlockPartition) -> Self {
        BlockVector { data: vec![0.0; partition.total_dim()], partition }
    }

    pub fn partition(&self) -> &BlockPartition {
        self.partition
    }

    pub fn block(&self, j: usize) -> Vec<f64> {
        self.partition.gather(j, &self.data)
    }

    pub fn set_block(&mut self, j: usize, values: &[f64]) {
        self.partition.scatter(j, values, &mut self.data)
    }

    pub fn block_norm_sq(&self, j: usize) -> f64 {
        self.partition.block_norm_sq(j, &self.data)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Connected dual blocks `V_j`, simultaneous connections `V̄_j(ℓ)` and the
/// reciprocal weight table `w_{j,ℓ,k} = 1/w_{j,k,ℓ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionGraph {
    n_primal: usize,
    n_dual: usize,
    neighbors: Vec<BTreeSet<usize>>,
    sim: Vec<BTreeMap<usize, BTreeSet<usize>>>,
    // keyed by (ℓ, k) with ℓ < k; the transposed entry is the reciprocal
    weights: Vec<HashMap<(usize, usize), f64>>,
}

impl ConnectionGraph {
    pub fn new(n_primal: usize, n_dual: usize) -> Self {
        ConnectionGraph {
            n_primal,
            n_dual,
            neighbors: vec![BTreeSet::new(); n_primal],
            sim: vec![BTreeMap::new(); n_primal],
            weights: vec![HashMap::new(); n_primal],
        }
    }

    /// Every primal block connected to every dual block, all weights one.
    pub fn fully_connected(n_primal: usize, n_dual: usize) -> Self {
        let all: Vec<Vec<usize>> = vec![(0..n_dual).collect(); n_primal];
        Self::from_neighbors(n_dual, &all).expect("indices in range")
    }

    /// Graph with the given `V_j` and `V̄_j(ℓ) = V_j`, unit weights.
    pub fn from_neighbors(n_dual: usize, neighbors: &[Vec<usize>]) -> Result<Self> {
        let mut g = Self::new(neighbors.len(), n_dual);
        for (j, vj) in neighbors.iter().enumerate() {
            for &l in vj {
                g.connect(j, l)?;
            }
            for &l in vj {
                g.set_sim(j, l, vj)?;
            }
        }
        Ok(g)
    }

    pub fn n_primal(&self) -> usize {
        self.n_primal
    }

    pub fn n_dual(&self) -> usize {
        self.n_dual
    }

    fn check(&self, j: usize, l: usize) -> Result<()> {
        if j >= self.n_primal || l >= self.n_dual {
            return Err(Error::Structure(format!(
                "block pair ({j}, {l}) outside {}x{}",
                self.n_primal, self.n_dual
            )));
        }
        Ok(())
    }

    /// Adds `ℓ` to `V_j`; `V̄_j(ℓ)` starts as `{ℓ}`.
    pub fn connect(&mut self, j: usize, l: usize) -> Result<()> {
        self.check(j, l)?;
        self.neighbors[j].insert(l);
        self.sim[j].entry(l).or_insert_with(|| BTreeSet::from([l]));
        Ok(())
    }

    /// Sets `V̄_j(ℓ)`. Both `ℓ` and every `k` must already lie in `V_j`.
    pub fn set_sim(&mut self, j: usize, l: usize, ks: &[usize]) -> Result<()> {
        self.check(j, l)?;
        if !self.neighbors[j].contains(&l) {
            return Err(Error::Structure(format!("dual block {l} not connected to primal block {j}")));
        }
        for &k in ks {
            self.check(j, k)?;
            if !self.neighbors[j].contains(&k) {
                return Err(Error::Structure(format!(
                    "simultaneous connection {k} of ({j}, {l}) not connected to primal block {j}"
                )));
            }
        }
        self.sim[j].insert(l, ks.iter().copied().collect());
        Ok(())
    }

    /// Sets `w_{j,ℓ,k}`; `w_{j,k,ℓ}` becomes its reciprocal.
    pub fn set_weight(&mut self, j: usize, l: usize, k: usize, w: f64) -> Result<()> {
        self.check(j, l)?;
        self.check(j, k)?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Structure(format!("weight w[{j},{l},{k}] = {w} must be positive")));
        }
        if l == k {
            if w != 1.0 {
                return Err(Error::Structure(format!(
                    "diagonal weight w[{j},{l},{l}] must be 1, got {w}"
                )));
            }
            return Ok(());
        }
        let (key, val) = if l < k { ((l, k), w) } else { ((k, l), 1.0 / w) };
        self.weights[j].insert(key, val);
        Ok(())
    }

    pub fn weight(&self, j: usize, l: usize, k: usize) -> f64 {
        use std::cmp::Ordering::*;
        match l.cmp(&k) {
            Equal => 1.0,
            Less => self.weights[j].get(&(l, k)).copied().unwrap_or(1.0),
            Greater => 1.0 / self.weights[j].get(&(k, l)).copied().unwrap_or(1.0),
        }
    }

    /// `V_j`, sorted.
    pub fn neighbors(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[j].iter().copied()
    }

    pub fn is_connected(&self, j: usize, l: usize) -> bool {
        self.neighbors[j].contains(&l)
    }

    /// `V̄_j(ℓ)`, sorted; empty when `ℓ ∉ V_j`.
    pub fn sim_connected(&self, j: usize, l: usize) -> Vec<usize> {
        self.sim[j].get(&l).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    /// Primal blocks `j` with `ℓ ∈ V_j`.
    pub fn primal_neighbors(&self, l: usize) -> Vec<usize> {
        (0..self.n_primal).filter(|&j| self.neighbors[j].contains(&l)).collect()
    }

    /// `w_{j,ℓ} = χ_{V_j}(ℓ) Σ_{k ∈ V̄_j(ℓ)} w_{j,ℓ,k}`.
    pub fn block_weight_sum(&self, j: usize, l: usize) -> f64 {
        if !self.is_connected(j, l) {
            return 0.0;
        }
        match self.sim[j].get(&l) {
            Some(ks) => ks.iter().map(|&k| self.weight(j, l, k)).sum(),
            None => 0.0,
        }
    }

    /// Drops `k ≠ ℓ` from every `V̄_j(ℓ)` where `keep(k, j)` is false.
    pub fn filtered(&self, keep: &dyn Fn(usize, usize) -> bool) -> Self {
        let mut g = self.clone();
        for (j, sim) in g.sim.iter_mut().enumerate() {
            for (&l, ks) in sim.iter_mut() {
                ks.retain(|&k| k == l || keep(k, j));
            }
        }
        g
    }
}

/// `w_{j,ℓ}` for a graph; see [`ConnectionGraph::block_weight_sum`].
pub fn block_weight_sum(graph: &ConnectionGraph, j: usize, l: usize) -> f64 {
    graph.block_weight_sum(j, l)
}

/// Connection graph declared by the problem, or else probed from the
/// Jacobian at `x`. `keep(k, j)` filters simultaneous connections.
pub fn build_connection_graph(
    problem: &dyn Problem,
    x: &[f64],
    keep: &dyn Fn(usize, usize) -> bool,
) -> Result<ConnectionGraph> {
    if let Some(g) = problem.connection_graph() {
        let (m, n) = (problem.primal_partition().n_blocks(), problem.dual_partition().n_blocks());
        if g.n_primal() != m || g.n_dual() != n {
            return Err(Error::Structure(format!(
                "declared graph is {}x{}, problem has {m}x{n} blocks",
                g.n_primal(),
                g.n_dual()
            )));
        }
        return Ok(g.filtered(keep));
    }
    probe_connection_graph(problem, x, keep)
}

/// Probes `Q_ℓ ∇K(x) P_j` and `Q_ℓ ∇K(x) P_j ∇K(x)* Q_k` with random
/// directions.
pub fn probe_connection_graph(
    problem: &dyn Problem,
    x: &[f64],
    keep: &dyn Fn(usize, usize) -> bool,
) -> Result<ConnectionGraph> {
    const PROBES: usize = 2;
    let pp = problem.primal_partition();
    let dp = problem.dual_partition();
    let (m, n) = (pp.n_blocks(), dp.n_blocks());
    let jac = problem.jacobian(x);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut g = ConnectionGraph::new(m, n);
    let mut dy = vec![0.0; dp.total_dim()];
    let mut dx = vec![0.0; pp.total_dim()];

    let random_on = |part: &BlockPartition, b: usize, rng: &mut ChaCha8Rng| {
        let mut v = vec![0.0; part.total_dim()];
        for i in part.block(b).iter() {
            v[i] = StandardNormal.sample(rng);
        }
        let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        (v, nrm)
    };

    for j in 0..m {
        for _ in 0..PROBES {
            let (r, nrm) = random_on(pp, j, &mut rng);
            jac.apply(&r, &mut dy);
            for l in 0..n {
                if dp.block_norm_sq(l, &dy).sqrt() > PROBE_TOLERANCE * nrm {
                    g.connect(j, l)?;
                }
            }
        }
    }
    for j in 0..m {
        let vj: Vec<usize> = g.neighbors(j).collect();
        let mut sim: BTreeMap<usize, Vec<usize>> = vj.iter().map(|&l| (l, vec![l])).collect();
        for &k in &vj {
            for _ in 0..PROBES {
                let (s, nrm) = random_on(dp, k, &mut rng);
                jac.apply_adjoint(&s, &mut dx);
                let t = pp.restrict(j, &dx);
                jac.apply(&t, &mut dy);
                for &l in &vj {
                    if l != k && dp.block_norm_sq(l, &dy).sqrt() > PROBE_TOLERANCE * nrm {
                        let e = sim.get_mut(&l).expect("l in V_j");
                        if !e.contains(&k) {
                            e.push(k);
                        }
                    }
                }
            }
        }
        for (l, mut ks) in sim {
            ks.sort_unstable();
            ks.retain(|&k| k == l || keep(k, j));
            g.set_sim(j, l, &ks)?;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_two_blocks() {
        let p = BlockPartition::from_ranges(6, vec![0..3, 3..6]).unwrap();
        assert_eq!(p.n_blocks(), 2);
        assert_eq!(p.block(1).len(), 3);
        assert_eq!(p.owner(4), 1);
    }

    #[test]
    fn partition_errors() {
        assert!(BlockPartition::from_ranges(5, vec![0..3, 2..5]).is_err());
        assert!(BlockPartition::from_ranges(5, vec![0..2, 3..5]).is_err());
        assert!(BlockPartition::from_ranges(3, vec![0..3, 3..3]).is_err());
        assert!(BlockPartition::from_ranges(1, vec![0..1]).is_ok());
    }

    #[test]
    fn mixed_blocks() {
        let p = BlockPartition::new(
            5,
            vec![Block::List(vec![0, 2, 4]), Block::Range(1..2), Block::List(vec![3])],
        )
        .unwrap();
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(p.gather(0, &v), vec![1.0, 3.0, 5.0]);
        assert_eq!(p.owner(3), 2);
    }

    #[test]
    fn equal_weighting_counts_blocks() {
        let g = ConnectionGraph::fully_connected(2, 3);
        for l in 0..3 {
            assert_eq!(g.block_weight_sum(0, l), 3.0);
        }
    }

    #[test]
    fn weight_sums_by_hand() {
        let mut g = ConnectionGraph::from_neighbors(2, &[vec![0, 1]]).unwrap();
        g.set_weight(0, 0, 1, 4.0).unwrap();
        assert_eq!(g.block_weight_sum(0, 0), 5.0);
        assert_eq!(g.block_weight_sum(0, 1), 1.25);
        let h = ConnectionGraph::from_neighbors(2, &[vec![0]]).unwrap();
        assert_eq!(h.block_weight_sum(0, 1), 0.0);
    }

    #[test]
    fn diagonal_weight_must_be_one() {
        let mut g = ConnectionGraph::fully_connected(1, 2);
        assert!(g.set_weight(0, 1, 1, 2.0).is_err());
        assert!(g.set_weight(0, 0, 1, -1.0).is_err());
    }

    #[test]
    fn sim_requires_connection() {
        let mut g = ConnectionGraph::new(1, 2);
        g.connect(0, 0).unwrap();
        assert!(g.set_sim(0, 0, &[1]).is_err());
        assert!(g.set_sim(0, 1, &[0]).is_err());
    }
}
