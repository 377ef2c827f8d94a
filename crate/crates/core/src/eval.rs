//! Evaluation: histogram KL divergence of graph statistics, uniqueness and
//! novelty under canonical-form equality, latent traversals, BFS ordering
//! stability and a latent disentanglement probe.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentPair, ModelParams, SampleMode};
use crate::pgraph::{
    avg_clustering, bfs_canonical_order, density, graph_fingerprint, is_isomorphic, Decomposition, PeriodicGraph, UnitKind,
};

pub const HISTOGRAM_BINS: usize = 100;
pub const HISTOGRAM_SMOOTHING: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Clustering,
    Density,
}

impl Statistic {
    pub fn compute(self, g: &PeriodicGraph) -> Result<f64> {
        match self {
            Statistic::Clustering => avg_clustering(g),
            Statistic::Density => density(g),
        }
    }
}

/// Smoothed, normalized histogram of values in `[0, 1]`; `1.0` lands in
/// the last bin.
pub fn histogram(values: &[f64], bins: usize, smoothing: f64) -> Result<Vec<f64>> {
    if values.is_empty() || bins == 0 {
        return Err(Error::InvalidArgument("histogram needs values and bins".into()));
    }
    let mut counts = vec![0.0; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("statistic {v} outside [0, 1]")));
        }
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1.0;
    }
    let total = values.len() as f64;
    let mut hist: Vec<f64> = counts.iter().map(|c| c / total + smoothing).collect();
    let norm: f64 = hist.iter().sum();
    hist.iter_mut().for_each(|p| *p /= norm);
    Ok(hist)
}

/// `KL(p ‖ q)` for strictly positive distributions of equal length.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// `KL(P_ref ‖ P_gen)` between 100-bin smoothed histograms of `stat`.
pub fn kld_metric(gen: &[PeriodicGraph], reference: &[PeriodicGraph], stat: Statistic) -> Result<f64> {
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("KLD needs nonempty generated and reference sets".into()));
    }
    let values = |set: &[PeriodicGraph]| set.iter().map(|g| stat.compute(g)).collect::<Result<Vec<_>>>();
    let p_gen = histogram(&values(gen)?, HISTOGRAM_BINS, HISTOGRAM_SMOOTHING)?;
    let p_ref = histogram(&values(reference)?, HISTOGRAM_BINS, HISTOGRAM_SMOOTHING)?;
    Ok(kl_divergence(&p_ref, &p_gen).max(0.0))
}

/// Isomorphism classes seen so far, bucketed by fingerprint.
#[derive(Default)]
struct GraphClasses {
    buckets: HashMap<u64, Vec<(usize, PeriodicGraph)>>,
    count: usize,
}

impl GraphClasses {
    /// Class id of `g`, registering a new class when needed.
    fn insert(&mut self, g: &PeriodicGraph) -> usize {
        let bucket = self.buckets.entry(graph_fingerprint(g)).or_default();
        if let Some((id, _)) = bucket.iter().find(|(_, rep)| is_isomorphic(rep, g)) {
            return *id;
        }
        let id = self.count;
        self.count += 1;
        bucket.push((id, g.clone()));
        id
    }

    fn find(&self, g: &PeriodicGraph) -> Option<usize> {
        self.buckets
            .get(&graph_fingerprint(g))?
            .iter()
            .find(|(_, rep)| is_isomorphic(rep, g))
            .map(|(id, _)| *id)
    }
}

/// Distinct graphs over the number of graphs. Graphs are equal when their
/// canonical adjacencies agree or, failing that, when they are isomorphic,
/// so the result does not depend on node labelling.
pub fn uniqueness(gen: &[PeriodicGraph]) -> Result<f64> {
    if gen.is_empty() {
        return Err(Error::InvalidArgument("uniqueness of an empty set".into()));
    }
    let mut classes = GraphClasses::default();
    let distinct: HashSet<usize> = gen.iter().map(|g| classes.insert(g)).collect();
    Ok(distinct.len() as f64 / gen.len() as f64)
}

/// Fraction of generated graphs equal to no graph of `train`, with the
/// equality of [`uniqueness`].
pub fn novelty(gen: &[PeriodicGraph], train: &[PeriodicGraph]) -> Result<f64> {
    if gen.is_empty() || train.is_empty() {
        return Err(Error::InvalidArgument("novelty needs nonempty generated and training sets".into()));
    }
    let mut classes = GraphClasses::default();
    for g in train {
        classes.insert(g);
    }
    let fresh = gen.iter().filter(|g| classes.find(g).is_none()).count();
    Ok(fresh as f64 / gen.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kld_cluster: f64,
    pub kld_dense: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub sample_count: usize,
    pub reference_count: usize,
    pub train_count: usize,
    pub histogram_bins: usize,
    pub smoothing: f64,
}

pub fn evaluate(gen: &[PeriodicGraph], reference: &[PeriodicGraph], train: &[PeriodicGraph]) -> Result<EvalReport> {
    let report = EvalReport {
        kld_cluster: kld_metric(gen, reference, Statistic::Clustering)?,
        kld_dense: kld_metric(gen, reference, Statistic::Density)?,
        uniqueness: uniqueness(gen)?,
        novelty: novelty(gen, train)?,
        sample_count: gen.len(),
        reference_count: reference.len(),
        train_count: train.len(),
        histogram_bins: HISTOGRAM_BINS,
        smoothing: HISTOGRAM_SMOOTHING,
    };
    let values = [report.kld_cluster, report.kld_dense, report.uniqueness, report.novelty];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation report".into()));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Latent {
    Local,
    Global,
}

impl FromStr for Latent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Latent::Local),
            "global" => Ok(Latent::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown latent `{other}` (expected local or global)"
            ))),
        }
    }
}

impl fmt::Display for Latent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Latent::Local => "local",
            Latent::Global => "global",
        })
    }
}

/// One decoded graph of a traversal.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversalStep {
    pub value: f64,
    pub decomposition: Decomposition,
    pub graph: PeriodicGraph,
    pub n: usize,
    pub m: usize,
    pub clustering: f64,
    /// `None` for single-node graphs.
    pub density: Option<f64>,
}

/// Decodes `base` with coordinate `dim` of the chosen latent overwritten
/// by each of `values`, in threshold mode.
pub fn latent_traversal(
    params: &ModelParams,
    base: &LatentPair,
    which: Latent,
    dim: usize,
    values: &[f64],
) -> Result<Vec<TraversalStep>> {
    let width = match which {
        Latent::Local => params.config().d_l,
        Latent::Global => params.config().d_g,
    };
    if dim >= width {
        return Err(Error::InvalidArgument(format!(
            "dimension {dim} out of range for {which} latent of width {width}"
        )));
    }
    values
        .iter()
        .map(|&value| {
            let mut z = base.clone();
            match which {
                Latent::Local => z.z_l[dim] = value,
                Latent::Global => z.z_g[dim] = value,
            }
            let decomposition = params.sample_decomposition(&z, SampleMode::Threshold, 0)?;
            let graph = crate::pgraph::assemble(&decomposition);
            let clustering = avg_clustering(&graph)?;
            let density = if graph.node_count() >= 2 {
                Some(density(&graph)?)
            } else {
                None
            };
            Ok(TraversalStep {
                value,
                n: decomposition.unit_size(),
                m: decomposition.unit_count(),
                decomposition,
                graph,
                clustering,
                density,
            })
        })
        .collect()
}

/// `1 − 6·Σd²/(k(k²−1))` for two tie-free rank vectors.
pub fn spearman(a: &[usize], b: &[usize]) -> f64 {
    let k = a.len() as f64;
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    1.0 - 6.0 * d2 / (k * (k * k - 1.0))
}

/// Kendall's τ for two tie-free rank vectors.
pub fn kendall(a: &[usize], b: &[usize]) -> f64 {
    let k = a.len();
    let mut score = 0i64;
    for i in 0..k {
        for j in (i + 1)..k {
            let s = (a[i] as i64 - a[j] as i64).signum() * (b[i] as i64 - b[j] as i64).signum();
            score += s;
        }
    }
    score as f64 / (k * (k - 1) / 2) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub spearman_bfs: f64,
    pub kendall_bfs: f64,
    pub spearman_rand: f64,
    pub kendall_rand: f64,
    /// Graphs with at least two nodes.
    pub graphs_used: usize,
    pub permutations: usize,
}

fn ranks_of(order: &[usize]) -> Vec<usize> {
    let mut rank = vec![0; order.len()];
    for (pos, &v) in order.iter().enumerate() {
        rank[v] = pos;
    }
    rank
}

/// Rank of every original node in the BFS order of `g` relabelled by
/// `perm` (new node `i` is old node `perm[i]`).
pub fn bfs_ranks_under(g: &PeriodicGraph, perm: &[usize]) -> Result<Vec<usize>> {
    let relabelled = g.permuted(perm)?;
    let order: Vec<usize> = bfs_canonical_order(&relabelled).iter().map(|&i| perm[i]).collect();
    Ok(ranks_of(&order))
}

fn mean_pairwise(ranks: &[Vec<usize>], corr: fn(&[usize], &[usize]) -> f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..ranks.len() {
        for j in (i + 1)..ranks.len() {
            total += corr(&ranks[i], &ranks[j]);
            count += 1;
        }
    }
    total / count as f64
}

/// For each graph, relabels nodes by `permutations` random permutations
/// and orders each relabelled copy both by [`bfs_canonical_order`] and by
/// a fresh random order. Orders are mapped back to the original node ids
/// and compared pairwise; the report holds means over pairs and graphs.
pub fn bfs_stability(graphs: &[PeriodicGraph], permutations: usize, seed: u64) -> Result<StabilityReport> {
    if graphs.is_empty() {
        return Err(Error::InvalidArgument("stability study needs graphs".into()));
    }
    if permutations < 2 {
        return Err(Error::InvalidArgument("stability study needs at least 2 permutations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = [0.0f64; 4];
    let mut used = 0usize;
    for g in graphs {
        let k = g.node_count();
        if k < 2 {
            continue;
        }
        let mut bfs_ranks = Vec::with_capacity(permutations);
        let mut rand_ranks = Vec::with_capacity(permutations);
        for _ in 0..permutations {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            bfs_ranks.push(bfs_ranks_under(g, &perm)?);

            let mut random: Vec<usize> = (0..k).collect();
            random.shuffle(&mut rng);
            let order: Vec<usize> = random.iter().map(|&i| perm[i]).collect();
            rand_ranks.push(ranks_of(&order));
        }
        sums[0] += mean_pairwise(&bfs_ranks, spearman);
        sums[1] += mean_pairwise(&bfs_ranks, kendall);
        sums[2] += mean_pairwise(&rand_ranks, spearman);
        sums[3] += mean_pairwise(&rand_ranks, kendall);
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no graph has two or more nodes".into()));
    }
    let u = used as f64;
    Ok(StabilityReport {
        spearman_bfs: sums[0] / u,
        kendall_bfs: sums[1] / u,
        spearman_rand: sums[2] / u,
        kendall_rand: sums[3] / u,
        graphs_used: used,
        permutations,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Mean cosine similarity over unordered pairs with equal labels and over
/// pairs with different labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSimilarity {
    pub within: f64,
    pub cross: f64,
}

impl LabelSimilarity {
    pub fn gap(&self) -> f64 {
        self.within - self.cross
    }
}

pub fn label_similarity(vectors: &[Vec<f64>], labels: &[UnitKind]) -> Result<LabelSimilarity> {
    if vectors.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} vectors but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    let mut groups: BTreeMap<UnitKind, usize> = BTreeMap::new();
    for &l in labels {
        *groups.entry(l).or_default() += 1;
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("disentanglement score needs ≥ 2 labels".into()));
    }
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in (i + 1)..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j]);
            if labels[i] == labels[j] {
                within += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    if nw == 0 {
        return Err(Error::InvalidArgument("no label has two members".into()));
    }
    Ok(LabelSimilarity {
        within: within / nw as f64,
        cross: cross / nc as f64,
    })
}

/// Label similarity of the posterior means of both latents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disentanglement {
    pub local: LabelSimilarity,
    pub global: LabelSimilarity,
}

/// Encodes every labelled graph and compares `μ_l` (and `μ_g`) within and
/// across unit labels. Unlabelled graphs are ignored.
pub fn disentanglement_score(params: &ModelParams, graphs: &[PeriodicGraph]) -> Result<Disentanglement> {
    let mut labels = Vec::new();
    let mut mu_l = Vec::new();
    let mut mu_g = Vec::new();
    for g in graphs {
        if let Some(label) = g.unit_label() {
            let enc = params.encode_graph(g)?;
            labels.push(label);
            mu_l.push(enc.mu_l);
            mu_g.push(enc.mu_g);
        }
    }
    Ok(Disentanglement {
        local: label_similarity(&mu_l, &labels)?,
        global: label_similarity(&mu_g, &labels)?,
    })
}
