//! Periodic-graph algebra.
//!
//! A periodic graph on `n·m` nodes is `m` copies of an `n`-node basic unit
//! (`A_l`), a unit-level graph saying which units touch (`A_g`), and one
//! shared `n×n` bond pattern (`A_n`) applied to every connected unit pair.
//! Under the intrinsic ordering unit `u` owns node indices `u·n .. (u+1)·n`,
//! so the full adjacency is
//!
//! ```text
//! A = (M_n ⊙ Q A_n Qᵀ + (M_n ⊙ Q A_n Qᵀ)ᵀ) ⊙ P A_g Pᵀ + M_l ⊙ Q A_l Qᵀ
//! ```
//!
//! where `P` replicates unit rows into node rows, `Q` stacks `m` identities,
//! and the masks keep diagonal blocks (`M_l`) or strictly upper blocks
//! (`M_n`). Everything here is exact 0/1 integer arithmetic.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 0/1 matrix.
pub type BinaryMatrix = Array2<u8>;

/// The basic-unit families of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Triangle,
    Grid,
    Hexagon,
}

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [UnitKind::Triangle, UnitKind::Grid, UnitKind::Hexagon];

    /// Node count of one unit.
    pub fn unit_size(self) -> usize {
        match self {
            UnitKind::Triangle => 3,
            UnitKind::Grid => 4,
            UnitKind::Hexagon => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Triangle => "triangle",
            UnitKind::Grid => "grid",
            UnitKind::Hexagon => "hexagon",
        }
    }
}

impl std::str::FromStr for UnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "triangle" => Ok(UnitKind::Triangle),
            "grid" => Ok(UnitKind::Grid),
            "hexagon" => Ok(UnitKind::Hexagon),
            other => Err(Error::InvalidArgument(format!("unknown unit kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for UnitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A (possibly zero-padded) adjacency matrix whose first `n·m` nodes are
/// the real ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeriodicGraph {
    adjacency: BinaryMatrix,
    n: usize,
    m: usize,
    unit_label: Option<UnitKind>,
}

impl PeriodicGraph {
    /// Wraps `adjacency` declaring `n·m` real nodes; the remaining rows and
    /// columns must be zero padding.
    pub fn new(adjacency: BinaryMatrix, n: usize, m: usize) -> Result<Self> {
        let size = check_square(&adjacency.view(), "adjacency")?;
        let active = n * m;
        if active > size {
            return Err(Error::InvalidAdjacency(format!(
                "{active} declared nodes exceed matrix size {size}"
            )));
        }
        check_symmetric_binary(&adjacency.view(), "adjacency")?;
        for i in 0..size {
            for j in 0..size {
                if (i >= active || j >= active) && adjacency[[i, j]] != 0 {
                    return Err(Error::InvalidAdjacency(format!(
                        "padding entry ({i}, {j}) is nonzero"
                    )));
                }
            }
        }
        Ok(Self {
            adjacency,
            n,
            m,
            unit_label: None,
        })
    }

    /// Treats every row of `adjacency` as a real node (one unit of size N).
    pub fn from_adjacency(adjacency: BinaryMatrix) -> Result<Self> {
        let size = check_square(&adjacency.view(), "adjacency")?;
        Self::new(adjacency, size, 1)
    }

    pub fn with_label(mut self, label: Option<UnitKind>) -> Self {
        self.unit_label = label;
        self
    }

    pub fn adjacency(&self) -> &BinaryMatrix {
        &self.adjacency
    }

    pub fn unit_size(&self) -> usize {
        self.n
    }

    pub fn unit_count(&self) -> usize {
        self.m
    }

    pub fn unit_label(&self) -> Option<UnitKind> {
        self.unit_label
    }

    /// Number of non-padding nodes.
    pub fn node_count(&self) -> usize {
        self.n * self.m
    }

    /// Padded matrix size.
    pub fn size(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn active_adjacency(&self) -> ArrayView2<'_, u8> {
        let k = self.node_count();
        self.adjacency.slice(s![..k, ..k])
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.active_adjacency()
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&x| x as usize).sum())
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.degrees().iter().sum::<usize>() / 2
    }

    /// Zero-pads (or keeps) the matrix to `size × size`.
    pub fn padded(&self, size: usize) -> Result<Self> {
        let k = self.node_count();
        if size < k {
            return Err(Error::InvalidArgument(format!(
                "cannot pad {k} nodes into size {size}"
            )));
        }
        let mut adjacency = BinaryMatrix::zeros((size, size));
        adjacency
            .slice_mut(s![..k, ..k])
            .assign(&self.active_adjacency());
        Ok(Self {
            adjacency,
            n: self.n,
            m: self.m,
            unit_label: self.unit_label,
        })
    }

    /// Relabels nodes so that new node `i` is old node `order[i]`. Padding is
    /// dropped; the unit metadata is kept even though the result is no
    /// longer in intrinsic order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let k = self.node_count();
        check_permutation(order, k)?;
        let a = self.active_adjacency();
        let adjacency = Array2::from_shape_fn((k, k), |(i, j)| a[[order[i], order[j]]]);
        Ok(Self {
            adjacency,
            n: self.n,
            m: self.m,
            unit_label: self.unit_label,
        })
    }
}

/// The basic unit, unit-level graph and shared cross-unit bond pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decomposition {
    local: BinaryMatrix,
    global: BinaryMatrix,
    neighbor: BinaryMatrix,
}

impl Decomposition {
    pub fn new(local: BinaryMatrix, global: BinaryMatrix, neighbor: BinaryMatrix) -> Result<Self> {
        let n = check_square(&local.view(), "A_l").map_err(as_decomposition)?;
        let m = check_square(&global.view(), "A_g").map_err(as_decomposition)?;
        let nn = check_square(&neighbor.view(), "A_n").map_err(as_decomposition)?;
        if n == 0 || m == 0 {
            return Err(Error::ZeroSize { n, m });
        }
        if nn != n {
            return Err(Error::InvalidDecomposition(format!(
                "A_n is {nn}×{nn} but A_l is {n}×{n}"
            )));
        }
        check_symmetric_binary(&local.view(), "A_l").map_err(as_decomposition)?;
        check_symmetric_binary(&global.view(), "A_g").map_err(as_decomposition)?;
        if let Some(v) = neighbor.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidDecomposition(format!("A_n has non-binary entry {v}")));
        }
        Ok(Self {
            local,
            global,
            neighbor,
        })
    }

    pub fn local(&self) -> &BinaryMatrix {
        &self.local
    }

    pub fn global(&self) -> &BinaryMatrix {
        &self.global
    }

    pub fn neighbor(&self) -> &BinaryMatrix {
        &self.neighbor
    }

    pub fn unit_size(&self) -> usize {
        self.local.nrows()
    }

    pub fn unit_count(&self) -> usize {
        self.global.nrows()
    }
}

fn as_decomposition(e: Error) -> Error {
    match e {
        Error::InvalidAdjacency(msg) => Error::InvalidDecomposition(msg),
        other => other,
    }
}

/// Replicator, stacker, block-diagonal ones and the two block masks for a
/// given unit size and count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructureMatrices {
    /// `nm × m`, node row `i` has a single one in unit column `i / n`.
    pub p: BinaryMatrix,
    /// `nm × n`, `m` stacked identities.
    pub q: BinaryMatrix,
    /// `nm × nm`, all-ones diagonal blocks.
    pub j: BinaryMatrix,
    pub mask_local: BinaryMatrix,
    pub mask_neighbor: BinaryMatrix,
}

pub fn build_structure(n: usize, m: usize) -> Result<StructureMatrices> {
    if n == 0 || m == 0 {
        return Err(Error::ZeroSize { n, m });
    }
    let size = n * m;
    let p = Array2::from_shape_fn((size, m), |(i, u)| u8::from(i / n == u));
    let q = Array2::from_shape_fn((size, n), |(i, k)| u8::from(i % n == k));
    let j = Array2::from_shape_fn((size, size), |(a, b)| u8::from(a / n == b / n));
    let mask_local = j.clone();
    let mask_neighbor = Array2::from_shape_fn((size, size), |(a, b)| u8::from(a / n < b / n));
    Ok(StructureMatrices {
        p,
        q,
        j,
        mask_local,
        mask_neighbor,
    })
}

fn widen(a: &BinaryMatrix) -> Array2<i64> {
    a.mapv(i64::from)
}

/// Closed-form assembly of the full adjacency.
pub fn assemble(d: &Decomposition) -> PeriodicGraph {
    let (n, m) = (d.unit_size(), d.unit_count());
    let st = build_structure(n, m).expect("decomposition sizes are positive");
    let (p, q) = (widen(&st.p), widen(&st.q));

    let rep_global = p.dot(&widen(&d.global)).dot(&p.t());
    let rep_local = q.dot(&widen(&d.local)).dot(&q.t());
    let rep_neighbor = q.dot(&widen(&d.neighbor)).dot(&q.t());

    let upper = &widen(&st.mask_neighbor) * &rep_neighbor;
    let cross = (&upper + &upper.t()) * &rep_global;
    let full = cross + &widen(&st.mask_local) * &rep_local;

    let adjacency = full.mapv(|v| {
        debug_assert!(v == 0 || v == 1, "assembled entry {v}");
        v as u8
    });
    PeriodicGraph {
        adjacency,
        n,
        m,
        unit_label: None,
    }
}

/// Recovers the decomposition of a graph in intrinsic order with unit size
/// `n`. An all-zero `A_n` with a connected `A_g` cannot survive assembly,
/// so `A_g` here only records the unit pairs whose block is nonzero.
pub fn decompose(g: &PeriodicGraph, n: usize) -> Result<Decomposition> {
    let nodes = g.node_count();
    if n == 0 || nodes == 0 || nodes % n != 0 {
        return Err(Error::NotDivisible { nodes, n });
    }
    let m = nodes / n;
    let a = g.active_adjacency();
    let block = |u: usize, v: usize| a.slice(s![u * n..(u + 1) * n, v * n..(v + 1) * n]);

    let local = block(0, 0).to_owned();
    for u in 1..m {
        if block(u, u) != local {
            return Err(Error::InconsistentDiagonal { block: u });
        }
    }

    let mut global = BinaryMatrix::zeros((m, m));
    let mut neighbor: Option<BinaryMatrix> = None;
    for u in 0..m {
        for v in (u + 1)..m {
            let b = block(u, v);
            if b.iter().all(|&x| x == 0) {
                continue;
            }
            global[[u, v]] = 1;
            global[[v, u]] = 1;
            match &neighbor {
                None => neighbor = Some(b.to_owned()),
                Some(first) if *first != b => {
                    return Err(Error::InconsistentNeighborhood { row: u, col: v })
                }
                Some(_) => {}
            }
        }
    }
    let neighbor = neighbor.unwrap_or_else(|| BinaryMatrix::zeros((n, n)));
    Decomposition::new(local, global, neighbor)
}

/// Mean local clustering coefficient over real nodes; nodes with degree
/// below two contribute zero.
pub fn avg_clustering(g: &PeriodicGraph) -> Result<f64> {
    let k = g.node_count();
    if k == 0 {
        return Err(Error::EmptyGraph("clustering needs at least one node"));
    }
    let a = g.active_adjacency();
    let neighbors: Vec<Vec<usize>> = (0..k)
        .map(|v| (0..k).filter(|&u| a[[v, u]] != 0).collect())
        .collect();
    let total: f64 = neighbors
        .iter()
        .map(|nb| {
            let d = nb.len();
            if d < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (i, &x) in nb.iter().enumerate() {
                for &y in &nb[i + 1..] {
                    links += a[[x, y]] as usize;
                }
            }
            links as f64 / (d * (d - 1) / 2) as f64
        })
        .sum();
    Ok(total / k as f64)
}

/// Edge count over the number of possible edges among real nodes.
pub fn density(g: &PeriodicGraph) -> Result<f64> {
    let k = g.node_count();
    if k < 2 {
        return Err(Error::EmptyGraph("density needs at least two nodes"));
    }
    Ok(g.edge_count() as f64 / (k * (k - 1) / 2) as f64)
}

/// Degree-descending BFS order. Roots are the highest-degree unvisited
/// node; all ties go to the smaller index.
pub fn bfs_canonical_order(g: &PeriodicGraph) -> Vec<usize> {
    let k = g.node_count();
    let a = g.active_adjacency();
    let deg = g.degrees();
    let rank = |&v: &usize| (std::cmp::Reverse(deg[v]), v);

    let mut visited = vec![false; k];
    let mut order = Vec::with_capacity(k);
    let mut queue = VecDeque::new();
    while order.len() < k {
        let root = (0..k)
            .filter(|&v| !visited[v])
            .min_by_key(rank)
            .expect("unvisited node exists");
        visited[root] = true;
        queue.push_back(root);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = (0..k).filter(|&u| a[[v, u]] != 0 && !visited[u]).collect();
            next.sort_by_key(rank);
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order
}

/// Real-node adjacency relabelled by [`bfs_canonical_order`].
pub fn canonical_adjacency(g: &PeriodicGraph) -> BinaryMatrix {
    let order = bfs_canonical_order(g);
    let a = g.active_adjacency();
    Array2::from_shape_fn((order.len(), order.len()), |(i, j)| a[[order[i], order[j]]])
}

/// Colour refinement: start from degrees and repeatedly hash each node's
/// colour with the sorted colours of its neighbours until the partition
/// stops splitting. Colours are comparable across graphs.
pub fn refined_colors(g: &PeriodicGraph) -> Vec<u64> {
    let k = g.node_count();
    let a = g.active_adjacency();
    let neighbors: Vec<Vec<usize>> = (0..k)
        .map(|v| (0..k).filter(|&u| a[[v, u]] != 0).collect())
        .collect();
    let mut colors: Vec<u64> = neighbors.iter().map(|nb| nb.len() as u64).collect();
    let mut classes = distinct_count(&colors);
    loop {
        let next: Vec<u64> = (0..k)
            .map(|v| {
                let mut around: Vec<u64> = neighbors[v].iter().map(|&u| colors[u]).collect();
                around.sort_unstable();
                let mut h = DefaultHasher::new();
                (colors[v], around).hash(&mut h);
                h.finish()
            })
            .collect();
        let split = distinct_count(&next);
        colors = next;
        if split == classes {
            return colors;
        }
        classes = split;
    }
}

fn distinct_count(colors: &[u64]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Permutation-invariant fingerprint: node count, edge count and the
/// multiset of refined colours.
pub fn graph_fingerprint(g: &PeriodicGraph) -> u64 {
    let mut colors = refined_colors(g);
    colors.sort_unstable();
    let mut h = DefaultHasher::new();
    (g.node_count(), g.edge_count(), colors).hash(&mut h);
    h.finish()
}

/// Exact isomorphism test of the real parts of two graphs, by backtracking
/// over colour-compatible node maps.
pub fn is_isomorphic(g1: &PeriodicGraph, g2: &PeriodicGraph) -> bool {
    let k = g1.node_count();
    if k != g2.node_count() || g1.edge_count() != g2.edge_count() {
        return false;
    }
    if canonical_adjacency(g1) == canonical_adjacency(g2) {
        return true;
    }
    let (c1, c2) = (refined_colors(g1), refined_colors(g2));
    let (mut s1, mut s2) = (c1.clone(), c2.clone());
    s1.sort_unstable();
    s2.sort_unstable();
    if s1 != s2 {
        return false;
    }
    // Visit g1 in BFS order from its rarest colours so every node after a
    // component's first has an already-mapped neighbour.
    let freq = |c: u64| c1.iter().filter(|&&x| x == c).count();
    let a1 = g1.active_adjacency();
    let mut order = Vec::with_capacity(k);
    let mut seen = vec![false; k];
    let mut roots: Vec<usize> = (0..k).collect();
    roots.sort_by_key(|&v| (freq(c1[v]), v));
    for root in roots {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for u in 0..k {
                if a1[[v, u]] != 0 && !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    let a2 = g2.active_adjacency();
    let mut map = vec![usize::MAX; k];
    let mut used = vec![false; k];
    extend_map(0, &order, &a1, &a2, &c1, &c2, &mut map, &mut used)
}

#[allow(clippy::too_many_arguments)]
fn extend_map(
    depth: usize,
    order: &[usize],
    a1: &ArrayView2<'_, u8>,
    a2: &ArrayView2<'_, u8>,
    c1: &[u64],
    c2: &[u64],
    map: &mut [usize],
    used: &mut [bool],
) -> bool {
    let Some(&v) = order.get(depth) else {
        return true;
    };
    for u in 0..c2.len() {
        if used[u] || c2[u] != c1[v] {
            continue;
        }
        let consistent = order[..depth].iter().all(|&w| a1[[v, w]] == a2[[u, map[w]]]);
        if !consistent {
            continue;
        }
        map[v] = u;
        used[u] = true;
        if extend_map(depth + 1, order, a1, a2, c1, c2, map, used) {
            return true;
        }
        used[u] = false;
        map[v] = usize::MAX;
    }
    false
}

/// `true` when the real part of `g` assembles from one shared unit and one
/// shared bond pattern, i.e. `decompose` succeeds and round-trips.
pub fn is_assembled_periodic(g: &PeriodicGraph) -> bool {
    match decompose(g, g.unit_size()) {
        Ok(d) => assemble(&d).active_adjacency() == g.active_adjacency(),
        Err(_) => false,
    }
}

fn check_square(a: &ArrayView2<'_, u8>, what: &str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidAdjacency(format!(
            "{what} is {}×{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}

fn check_symmetric_binary(a: &ArrayView2<'_, u8>, what: &str) -> Result<()> {
    let k = a.nrows();
    for i in 0..k {
        if a[[i, i]] != 0 {
            return Err(Error::InvalidAdjacency(format!("{what} has nonzero diagonal at {i}")));
        }
        for j in 0..k {
            let v = a[[i, j]];
            if v > 1 {
                return Err(Error::InvalidAdjacency(format!(
                    "{what} has non-binary entry {v} at ({i}, {j})"
                )));
            }
            if v != a[[j, i]] {
                return Err(Error::InvalidAdjacency(format!(
                    "{what} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn check_permutation(order: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if order.len() != k {
        return Err(Error::InvalidArgument(format!(
            "permutation has length {}, expected {k}",
            order.len()
        )));
    }
    for &i in order {
        if i >= k || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("invalid permutation entry {i}")));
        }
    }
    Ok(())
}
