//! The disentangled periodic-graph VAE.
//!
//! A shared stack of GIN layers embeds the nodes of the input graph. The
//! local encoder softly assigns nodes to `C` clusters, averages node
//! embeddings per cluster and maps the concatenated cluster rows to
//! `(μ_l, log σ_l)`. The global encoder maps every node embedding through
//! two heads and sums over nodes to get `(μ_g, log σ_g)`. Three decoders
//! turn `z_l` into the unit and bond patterns and `z_g` into the unit
//! graph, all at the fixed `n_max`/`m_max` bounds, and the assembler
//! produces the final graph.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgraph::{assemble, BinaryMatrix, Decomposition, PeriodicGraph};
use crate::tensor::{DiffTensor, Matrix, Tape};

/// Width of the hand-built node features `[1, normalized degree]`.
pub const NODE_FEATURES: usize = 2;

/// Floor on the soft size of a cluster before dividing by it.
pub const MIN_CLUSTER_MASS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of GIN layers (K).
    pub gin_layers: usize,
    /// Number of soft clusters (C).
    pub clusters: usize,
    pub d_l: usize,
    pub d_g: usize,
    /// Hidden width (h).
    pub hidden: usize,
    pub n_max: usize,
    pub m_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gin_layers: 3,
            clusters: 8,
            d_l: 32,
            d_g: 32,
            hidden: 64,
            n_max: 6,
            m_max: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gin_layers", self.gin_layers),
            ("clusters", self.clusters),
            ("d_l", self.d_l),
            ("d_g", self.d_g),
            ("hidden", self.hidden),
            ("n_max", self.n_max),
            ("m_max", self.m_max),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Names of fields that differ from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let pairs = [
            ("gin_layers", self.gin_layers, other.gin_layers),
            ("clusters", self.clusters, other.clusters),
            ("d_l", self.d_l, other.d_l),
            ("d_g", self.d_g, other.d_g),
            ("hidden", self.hidden, other.hidden),
            ("n_max", self.n_max, other.n_max),
            ("m_max", self.m_max, other.m_max),
        ];
        pairs
            .iter()
            .filter(|(_, a, b)| a != b)
            .map(|(name, _, _)| name.to_string())
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

/// Linear layers with ReLU between them; no activation after the last.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct GinLayer {
    eps: usize,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    gin: Vec<GinLayer>,
    cluster: Mlp,
    local_mu: Mlp,
    local_logsig: Mlp,
    global_mu: Mlp,
    global_logsig: Mlp,
    dec_local: Mlp,
    dec_neighbor: Mlp,
    dec_global: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Glorot,
    Zero,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: (usize, usize),
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    /// `widths = [in, hidden.., out]`. A zero-initialized head starts at
    /// exactly zero output.
    fn mlp(&mut self, prefix: &str, widths: &[usize], zero_last: bool) -> Mlp {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if zero_last && i == last {
                    Init::Zero
                } else {
                    Init::Glorot
                };
                Linear {
                    weight: self.param(format!("{prefix}.{i}.weight"), (w[0], w[1]), init),
                    bias: self.param(format!("{prefix}.{i}.bias"), (1, w[1]), Init::Zero),
                }
            })
            .collect();
        Mlp { layers }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let h = cfg.hidden;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let gin = (0..cfg.gin_layers)
        .map(|k| {
            let input = if k == 0 { NODE_FEATURES } else { h };
            GinLayer {
                eps: b.param(format!("gin.{k}.eps"), (1, 1), Init::Zero),
                mlp: b.mlp(&format!("gin.{k}.mlp"), &[input, h, h], false),
            }
        })
        .collect();
    let layout = Layout {
        gin,
        cluster: b.mlp("local.assign", &[h, h, cfg.clusters], false),
        local_mu: b.mlp("local.mu", &[cfg.clusters * h, h, cfg.d_l], false),
        local_logsig: b.mlp("local.logsig", &[cfg.clusters * h, h, cfg.d_l], true),
        global_mu: b.mlp("global.mu", &[h, h, cfg.d_g], false),
        global_logsig: b.mlp("global.logsig", &[h, h, cfg.d_g], true),
        dec_local: b.mlp("decoder.local", &[cfg.d_l, h, h, cfg.n_max * cfg.n_max], false),
        dec_neighbor: b.mlp("decoder.neighbor", &[cfg.d_l, h, h, cfg.n_max * cfg.n_max], false),
        dec_global: b.mlp("decoder.global", &[cfg.d_g, h, h, cfg.m_max * cfg.m_max], false),
    };
    (layout, b.specs)
}

/// One named parameter array as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major values.
    pub values: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.to_string(),
            shape: [m.nrows(), m.ncols()],
            values: m.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_shape_vec((self.shape[0], self.shape[1]), self.values.clone()).map_err(|_| {
            Error::InvalidArgument(format!(
                "array `{}` declares shape {:?} but holds {} values",
                self.name,
                self.shape,
                self.values.len()
            ))
        })
    }
}

/// Model configuration plus named parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
}

/// All learned weights of the network.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    values: Vec<Matrix>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases and GIN ε, and zero-initialized
    /// final layers on both log σ heads so training starts at σ = 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|spec| match spec.init {
                Init::Zero => Matrix::zeros(spec.shape),
                Init::Glorot => {
                    let (fan_in, fan_out) = spec.shape;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Matrix::from_shape_fn(spec.shape, |_| rng.random_range(-limit..limit))
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            specs,
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn shape_manifest(&self) -> Vec<(String, (usize, usize))> {
        self.specs.iter().map(|s| (s.name.clone(), s.shape)).collect()
    }

    /// Number of scalars in the three decoders.
    pub fn decoder_scalar_count(&self) -> usize {
        self.specs
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| s.name.starts_with("decoder."))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn to_file(&self) -> ParamsFile {
        ParamsFile {
            config: self.config.clone(),
            params: self
                .specs
                .iter()
                .zip(&self.values)
                .map(|(s, v)| NamedArray::from_matrix(&s.name, v))
                .collect(),
        }
    }

    /// Rebuilds parameters, requiring exactly the names and shapes implied
    /// by the file's config.
    pub fn from_file(file: &ParamsFile) -> Result<Self> {
        let mut params = Self::init(&file.config, 0)?;
        params.values = Self::arrays_for(&params.specs, &file.params)?;
        Ok(params)
    }

    /// Matrices for `arrays` in layout order; names and shapes must match.
    fn arrays_for(specs: &[ParamSpec], arrays: &[NamedArray]) -> Result<Vec<Matrix>> {
        if arrays.len() != specs.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                arrays.len()
            )));
        }
        specs
            .iter()
            .zip(arrays)
            .map(|(spec, arr)| {
                if spec.name != arr.name {
                    return Err(Error::InvalidArgument(format!(
                        "expected parameter `{}`, found `{}`",
                        spec.name, arr.name
                    )));
                }
                let found = (arr.shape[0], arr.shape[1]);
                if found != spec.shape {
                    return Err(Error::ParamShape {
                        name: spec.name.clone(),
                        expected: spec.shape,
                        found,
                    });
                }
                arr.to_matrix()
            })
            .collect()
    }

    /// Arrays shaped like this model's parameters (e.g. optimizer moments).
    pub fn matrices_from_arrays(&self, arrays: &[NamedArray]) -> Result<Vec<Matrix>> {
        Self::arrays_for(&self.specs, arrays)
    }

    pub fn arrays_from_matrices(&self, mats: &[Matrix]) -> Vec<NamedArray> {
        self.specs
            .iter()
            .zip(mats)
            .map(|(s, m)| NamedArray::from_matrix(&s.name, m))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &self.to_file())?;
        out.flush()?;
        Ok(())
    }

    /// Loads either a bare parameter file or a training checkpoint (whose
    /// `model` field holds the parameters).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let inner = match value.get("model") {
            Some(m) => m.clone(),
            None => value,
        };
        Self::from_file(&serde_json::from_value(inner)?)
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams<'_> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        BoundParams { params: self, vars }
    }
}

/// Parameters recorded on a tape.
pub struct BoundParams<'a> {
    params: &'a ModelParams,
    vars: Vec<DiffTensor>,
}

impl<'a> BoundParams<'a> {
    /// Uses existing tape handles, ordered as [`ModelParams::values`], as
    /// the parameters.
    pub fn from_vars(params: &'a ModelParams, vars: Vec<DiffTensor>) -> Self {
        assert_eq!(params.values.len(), vars.len(), "one handle per parameter");
        Self { params, vars }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Tape handles in the same order as [`ModelParams::values`].
    pub fn vars(&self) -> &[DiffTensor] {
        &self.vars
    }

    fn mlp(&self, tape: &mut Tape, mlp: &Mlp, x: DiffTensor) -> Result<DiffTensor> {
        let mut h = x;
        for (i, layer) in mlp.layers.iter().enumerate() {
            let lin = tape.matmul(h, self.vars[layer.weight])?;
            h = tape.add_row(lin, self.vars[layer.bias])?;
            if i + 1 < mlp.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Per node `[1, deg(v) / max(1, max degree)]` over the real nodes.
pub fn node_features(g: &PeriodicGraph) -> Matrix {
    let deg = g.degrees();
    let max = deg.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut x = Matrix::ones((deg.len(), NODE_FEATURES));
    for (i, &d) in deg.iter().enumerate() {
        x[[i, 1]] = d as f64 / max;
    }
    x
}

fn adjacency_f64(g: &PeriodicGraph) -> Matrix {
    g.active_adjacency().mapv(f64::from)
}

/// GIN aggregation `(1 + ε)·h_v + Σ_{u ∈ N(v)} h_u` for all nodes at once.
pub fn gin_aggregate(
    tape: &mut Tape,
    h: DiffTensor,
    adjacency: DiffTensor,
    eps: DiffTensor,
) -> Result<DiffTensor> {
    let neighbors = tape.matmul(adjacency, h)?;
    let scaled = tape.scale_by(h, eps)?;
    let self_term = tape.add(h, scaled)?;
    tape.add(self_term, neighbors)
}

/// Tape handles for `(μ_l, log σ_l, μ_g, log σ_g)`, each a single row.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub mu_l: DiffTensor,
    pub logsig_l: DiffTensor,
    pub mu_g: DiffTensor,
    pub logsig_g: DiffTensor,
}

/// Tape handles for the three edge-probability matrices.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `n_max × n_max`, symmetric, zero diagonal.
    pub local: DiffTensor,
    /// `n_max × n_max`.
    pub neighbor: DiffTensor,
    /// `m_max × m_max`, symmetric, zero diagonal.
    pub global: DiffTensor,
}

impl BoundParams<'_> {
    /// Final-layer node embeddings `H^(K)`, one row per real node.
    pub fn node_embeddings(&self, tape: &mut Tape, g: &PeriodicGraph) -> Result<DiffTensor> {
        if g.node_count() == 0 {
            return Err(Error::EmptyGraph("encoder input has no nodes"));
        }
        let adjacency = tape.constant(adjacency_f64(g));
        let mut h = tape.constant(node_features(g));
        for layer in &self.params.layout.gin {
            let agg = gin_aggregate(tape, h, adjacency, self.vars[layer.eps])?;
            let out = self.mlp(tape, &layer.mlp, agg)?;
            h = tape.relu(out);
        }
        Ok(h)
    }

    /// Soft cluster assignment `A_rep` (nodes × C, rows sum to one) and
    /// the size-normalized cluster embeddings flattened to `1 × C·h`.
    pub fn cluster_embedding(&self, tape: &mut Tape, h: DiffTensor) -> Result<(DiffTensor, DiffTensor)> {
        let logits = self.mlp(tape, &self.params.layout.cluster, h)?;
        let assign = tape.softmax_rows(logits);
        let assign_t = tape.transpose(assign);
        let pooled = tape.matmul(assign_t, h)?;
        let mass = tape.row_sums(assign_t);
        let mass = tape.clamp(mass, MIN_CLUSTER_MASS, f64::INFINITY);
        let inv = tape.recip(mass);
        let clusters = tape.scale_rows(pooled, inv)?;
        let (c, width) = tape.shape(clusters);
        let flat = tape.reshape(clusters, 1, c * width)?;
        Ok((assign, flat))
    }

    pub fn encode(&self, tape: &mut Tape, g: &PeriodicGraph) -> Result<EncoderOutput> {
        let layout = &self.params.layout;
        let h = self.node_embeddings(tape, g)?;

        let (_, flat) = self.cluster_embedding(tape, h)?;
        let mu_l = self.mlp(tape, &layout.local_mu, flat)?;
        let logsig_l = self.mlp(tape, &layout.local_logsig, flat)?;

        let per_node_mu = self.mlp(tape, &layout.global_mu, h)?;
        let per_node_logsig = self.mlp(tape, &layout.global_logsig, h)?;
        let mu_g = tape.col_sums(per_node_mu);
        let logsig_g = tape.col_sums(per_node_logsig);

        Ok(EncoderOutput {
            mu_l,
            logsig_l,
            mu_g,
            logsig_g,
        })
    }

    pub fn decode(&self, tape: &mut Tape, z_l: DiffTensor, z_g: DiffTensor) -> Result<DecoderOutput> {
        let layout = &self.params.layout;
        let (n, m) = (self.params.config.n_max, self.params.config.m_max);

        let local = self.mlp(tape, &layout.dec_local, z_l)?;
        let local = symmetric_probabilities(tape, local, n)?;

        let neighbor = self.mlp(tape, &layout.dec_neighbor, z_l)?;
        let neighbor = tape.sigmoid(neighbor);
        let neighbor = tape.reshape(neighbor, n, n)?;

        let global = self.mlp(tape, &layout.dec_global, z_g)?;
        let global = symmetric_probabilities(tape, global, m)?;

        Ok(DecoderOutput {
            local,
            neighbor,
            global,
        })
    }
}

/// `sym(sigmoid(x))` reshaped to `size × size` with the diagonal zeroed.
fn symmetric_probabilities(tape: &mut Tape, logits: DiffTensor, size: usize) -> Result<DiffTensor> {
    let p = tape.sigmoid(logits);
    let p = tape.reshape(p, size, size)?;
    let pt = tape.transpose(p);
    let sum = tape.add(p, pt)?;
    let sym = tape.scale(sum, 0.5);
    let off_diagonal = tape.constant(Matrix::ones((size, size)) - Matrix::eye(size));
    tape.mul(sym, off_diagonal)
}

/// `z = μ + exp(log σ) ⊙ η`.
pub fn reparameterize(
    tape: &mut Tape,
    mu: DiffTensor,
    logsig: DiffTensor,
    eta: &Matrix,
) -> Result<DiffTensor> {
    let sigma = tape.exp(logsig);
    let noise = tape.constant(eta.clone());
    let spread = tape.mul(sigma, noise)?;
    tape.add(mu, spread)
}

/// Latent pair as plain vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub z_l: Vec<f64>,
    pub z_g: Vec<f64>,
}

impl LatentPair {
    /// Draws both latents from the standard normal prior.
    pub fn sample_prior(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            z_l: standard_normal(rng, config.d_l),
            z_g: standard_normal(rng, config.d_g),
        }
    }
}

pub fn standard_normal(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Encoder statistics as plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub mu_l: Vec<f64>,
    pub logsig_l: Vec<f64>,
    pub mu_g: Vec<f64>,
    pub logsig_g: Vec<f64>,
}

/// Decoder edge probabilities as plain matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeProbabilities {
    pub local: Matrix,
    pub neighbor: Matrix,
    pub global: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Threshold,
    Bernoulli,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "threshold" => Ok(SampleMode::Threshold),
            "bernoulli" => Ok(SampleMode::Bernoulli),
            other => Err(Error::InvalidArgument(format!("unknown sample mode `{other}`"))),
        }
    }
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

impl ModelParams {
    pub fn encode_graph(&self, g: &PeriodicGraph) -> Result<Encoding> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = bound.encode(&mut tape, g)?;
        let flat = |t: DiffTensor| tape.value(t).iter().copied().collect::<Vec<_>>();
        Ok(Encoding {
            mu_l: flat(out.mu_l),
            logsig_l: flat(out.logsig_l),
            mu_g: flat(out.mu_g),
            logsig_g: flat(out.logsig_g),
        })
    }

    pub fn decode_latent(&self, z: &LatentPair) -> Result<EdgeProbabilities> {
        if z.z_l.len() != self.config.d_l || z.z_g.len() != self.config.d_g {
            return Err(Error::Shape {
                op: "decode",
                left: (z.z_l.len(), z.z_g.len()),
                right: (self.config.d_l, self.config.d_g),
            });
        }
        if z.z_l.iter().chain(&z.z_g).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent input".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z_l = tape.constant(row(&z.z_l));
        let z_g = tape.constant(row(&z.z_g));
        let out = bound.decode(&mut tape, z_l, z_g)?;
        Ok(EdgeProbabilities {
            local: tape.value(out.local).clone(),
            neighbor: tape.value(out.neighbor).clone(),
            global: tape.value(out.global).clone(),
        })
    }

    pub fn sample_decomposition(&self, z: &LatentPair, mode: SampleMode, seed: u64) -> Result<Decomposition> {
        binarize(&self.decode_latent(z)?, mode, seed)
    }

    /// `count` decompositions decoded from latents drawn from the prior.
    /// Latents come from one ChaCha8 stream seeded with `seed`; sample `i`
    /// is binarized with seed `seed + i`.
    pub fn sample_prior_decompositions(&self, count: usize, mode: SampleMode, seed: u64) -> Result<Vec<Decomposition>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let z = LatentPair::sample_prior(&self.config, &mut rng);
                self.sample_decomposition(&z, mode, seed.wrapping_add(i as u64))
            })
            .collect()
    }

    /// Decodes, binarizes and assembles; the result is unpadded.
    pub fn sample_graph(&self, z: &LatentPair, mode: SampleMode, seed: u64) -> Result<PeriodicGraph> {
        Ok(assemble(&self.sample_decomposition(z, mode, seed)?))
    }
}

/// Turns probabilities into a decomposition. Symmetric matrices are
/// sampled on the upper triangle and mirrored. Effective `n` (resp. `m`)
/// is one past the last row of the binarized unit (resp. unit-graph)
/// matrix that has an edge, and at least 1.
pub fn binarize(probs: &EdgeProbabilities, mode: SampleMode, seed: u64) -> Result<Decomposition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |p: f64| -> u8 {
        match mode {
            SampleMode::Threshold => u8::from(p >= 0.5),
            SampleMode::Bernoulli => u8::from(rng.random::<f64>() < p),
        }
    };
    let symmetric = |p: &Matrix, draw: &mut dyn FnMut(f64) -> u8| {
        let k = p.nrows();
        let mut a = BinaryMatrix::zeros((k, k));
        for i in 0..k {
            for j in (i + 1)..k {
                let v = draw(p[[i, j]]);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        a
    };
    let local = symmetric(&probs.local, &mut draw);
    let neighbor = probs.neighbor.mapv(&mut draw);
    let global = symmetric(&probs.global, &mut draw);

    let n = effective_size(&local);
    let m = effective_size(&global);
    Decomposition::new(
        local.slice(s![..n, ..n]).to_owned(),
        global.slice(s![..m, ..m]).to_owned(),
        neighbor.slice(s![..n, ..n]).to_owned(),
    )
}

fn effective_size(a: &BinaryMatrix) -> usize {
    a.rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v != 0))
        .map(|(i, _)| i + 1)
        .last()
        .unwrap_or(1)
}

/// Pads a decomposition's matrices with zeros to the model bounds, as
/// reconstruction targets.
pub fn padded_targets(d: &Decomposition, n_max: usize, m_max: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let (n, m) = (d.unit_size(), d.unit_count());
    if n > n_max || m > m_max {
        return Err(Error::InvalidArgument(format!(
            "graph with n={n}, m={m} exceeds model bounds n_max={n_max}, m_max={m_max}"
        )));
    }
    let pad = |a: &BinaryMatrix, size: usize| {
        let mut out = Array2::zeros((size, size));
        let k = a.nrows();
        out.slice_mut(s![..k, ..k]).assign(&a.mapv(f64::from));
        out
    };
    Ok((
        pad(d.local(), n_max),
        pad(d.neighbor(), n_max),
        pad(d.global(), m_max),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetManifest, GlobalPattern, UnitKind};
    use crate::pgraph::is_assembled_periodic;
    use ndarray::array;

    fn small_config() -> ModelConfig {
        ModelConfig {
            gin_layers: 2,
            clusters: 3,
            d_l: 4,
            d_g: 3,
            hidden: 8,
            n_max: 6,
            m_max: 4,
        }
    }

    fn graph(a: BinaryMatrix) -> PeriodicGraph {
        PeriodicGraph::from_adjacency(a).unwrap()
    }

    fn permutation(k: usize, seed: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut p: Vec<usize> = (0..k).collect();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    fn sample_graphs() -> Vec<PeriodicGraph> {
        let mut mf = DatasetManifest::uniform(&UnitKind::ALL, 2, GlobalPattern::Chain, 4);
        mf.m_range = (2, 4);
        mf.m_max = 4;
        generate_dataset(&mf)
            .unwrap()
            .into_iter()
            .map(|r| r.graph)
            .collect()
    }

    #[test]
    fn features() {
        let k3 = graph(array![[0, 1, 1], [1, 0, 1], [1, 1, 0]]);
        assert_eq!(node_features(&k3), Matrix::ones((3, 2)));
        let path = graph(array![[0, 1, 0], [1, 0, 1], [0, 1, 0]]);
        assert_eq!(node_features(&path), array![[1.0, 0.5], [1.0, 1.0], [1.0, 0.5]]);
        assert_eq!(node_features(&graph(array![[0]])), array![[1.0, 0.0]]);
    }

    #[test]
    fn gin_aggregation_examples() {
        let mut t = Tape::new();
        let eps = t.constant(array![[0.0]]);
        let h = t.constant(array![[1.0], [1.0]]);
        let edge = t.constant(array![[0.0, 1.0], [1.0, 0.0]]);
        let out = gin_aggregate(&mut t, h, edge, eps).unwrap();
        assert_eq!(t.value(out), &array![[2.0], [2.0]]);

        let h = t.constant(array![[3.0, -1.0]]);
        let lone = t.constant(array![[0.0]]);
        let out = gin_aggregate(&mut t, h, lone, eps).unwrap();
        assert_eq!(t.value(out), &array![[3.0, -1.0]]);

        let bad = t.constant(Matrix::zeros((3, 3)));
        assert!(gin_aggregate(&mut t, h, bad, eps).is_err());
    }

    #[test]
    fn node_embeddings_are_permutation_equivariant() {
        let params = ModelParams::init(&small_config(), 1).unwrap();
        for (i, g) in sample_graphs().iter().enumerate() {
            let perm = permutation(g.node_count(), i as u64);
            let pg = g.permuted(&perm).unwrap();
            let mut t = Tape::new();
            let b = params.bind(&mut t, false);
            let h = b.node_embeddings(&mut t, g).unwrap();
            let hp = b.node_embeddings(&mut t, &pg).unwrap();
            let (h, hp) = (t.value(h), t.value(hp));
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..h.ncols() {
                    assert!((hp[[new, c]] - h[[old, c]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn encoders_are_permutation_invariant() {
        let params = ModelParams::init(&small_config(), 2).unwrap();
        for (i, g) in sample_graphs().iter().enumerate() {
            let base = params.encode_graph(g).unwrap();
            let moved = params
                .encode_graph(&g.permuted(&permutation(g.node_count(), 10 + i as u64)).unwrap())
                .unwrap();
            for (a, b) in [
                (&base.mu_l, &moved.mu_l),
                (&base.logsig_l, &moved.logsig_l),
                (&base.mu_g, &moved.mu_g),
                (&base.logsig_g, &moved.logsig_g),
            ] {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-9, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn identical_graphs_encode_identically() {
        let params = ModelParams::init(&small_config(), 3).unwrap();
        let g = &sample_graphs()[0];
        assert_eq!(params.encode_graph(g).unwrap(), params.encode_graph(&g.clone()).unwrap());
    }

    #[test]
    fn single_cluster_is_mean_embedding() {
        let cfg = ModelConfig {
            clusters: 1,
            ..small_config()
        };
        let params = ModelParams::init(&cfg, 4).unwrap();
        let g = &sample_graphs()[3];
        let mut t = Tape::new();
        let b = params.bind(&mut t, false);
        let h = b.node_embeddings(&mut t, g).unwrap();
        let (assign, flat) = b.cluster_embedding(&mut t, h).unwrap();
        assert!(t.value(assign).iter().all(|&a| (a - 1.0).abs() < 1e-15));
        let mean = t.value(h).mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in t.value(flat).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_readout_is_additive_over_disjoint_copies() {
        let params = ModelParams::init(&small_config(), 5).unwrap();
        let tri = array![[0u8, 1, 1], [1, 0, 1], [1, 1, 0]];
        let single = graph(tri.clone());
        let mut doubled = BinaryMatrix::zeros((6, 6));
        doubled.slice_mut(s![..3, ..3]).assign(&tri);
        doubled.slice_mut(s![3.., 3..]).assign(&tri);
        let one = params.encode_graph(&single).unwrap();
        let two = params.encode_graph(&graph(doubled)).unwrap();
        for (a, b) in one.mu_g.iter().zip(&two.mu_g) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }

        // One isolated node: the readout is that node's head output.
        let lone = graph(array![[0]]);
        let mut t = Tape::new();
        let bnd = params.bind(&mut t, false);
        let h = bnd.node_embeddings(&mut t, &lone).unwrap();
        let head = bnd.mlp(&mut t, &params.layout.global_mu, h).unwrap();
        let enc = params.encode_graph(&lone).unwrap();
        assert_eq!(t.value(head).iter().copied().collect::<Vec<_>>(), enc.mu_g);
    }

    #[test]
    fn logsig_heads_start_at_zero() {
        let params = ModelParams::init(&small_config(), 6).unwrap();
        let enc = params.encode_graph(&sample_graphs()[1]).unwrap();
        assert!(enc.logsig_l.iter().chain(&enc.logsig_g).all(|&v| v == 0.0));
    }

    #[test]
    fn reparameterization() {
        let mut t = Tape::new();
        let mu = t.constant(array![[1.0, -2.0]]);
        let ls = t.constant(array![[0.0, 0.0]]);
        let z = reparameterize(&mut t, mu, ls, &array![[0.0, 0.0]]).unwrap();
        assert_eq!(t.value(z), &array![[1.0, -2.0]]);
        let z = reparameterize(&mut t, mu, ls, &array![[1.0, 1.0]]).unwrap();
        assert_eq!(t.value(z), &array![[2.0, -1.0]]);

        let cfg = small_config();
        let a = LatentPair::sample_prior(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = LatentPair::sample_prior(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    fn zero_decoders(params: &mut ModelParams) {
        let idx: Vec<usize> = params
            .specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.name.starts_with("decoder."))
            .map(|(i, _)| i)
            .collect();
        for i in idx {
            params.values[i].fill(0.0);
        }
    }

    #[test]
    fn zero_decoder_gives_half_probabilities() {
        let cfg = small_config();
        let mut params = ModelParams::init(&cfg, 7).unwrap();
        zero_decoders(&mut params);
        let z = LatentPair::sample_prior(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let p = params.decode_latent(&z).unwrap();
        for (mat, symmetric) in [(&p.local, true), (&p.neighbor, false), (&p.global, true)] {
            for ((i, j), &v) in mat.indexed_iter() {
                let want = if symmetric && i == j { 0.0 } else { 0.5 };
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn decoder_symmetry_and_determinism() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let z = LatentPair::sample_prior(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let p = params.decode_latent(&z).unwrap();
        assert_eq!(p.local, p.local.t());
        assert_eq!(p.global, p.global.t());
        assert_eq!(p, params.decode_latent(&z).unwrap());
        assert_eq!(p.local.dim(), (6, 6));
        assert_eq!(p.global.dim(), (4, 4));
    }

    fn two_triangle_probs() -> EdgeProbabilities {
        let mut local = Matrix::zeros((6, 6));
        let mut neighbor = Matrix::zeros((6, 6));
        let mut global = Matrix::zeros((4, 4));
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            local[[i, j]] = 1.0;
            local[[j, i]] = 1.0;
        }
        neighbor[[0, 0]] = 1.0;
        global[[0, 1]] = 1.0;
        global[[1, 0]] = 1.0;
        EdgeProbabilities {
            local,
            neighbor,
            global,
        }
    }

    #[test]
    fn threshold_binarization_reproduces_exact_decomposition() {
        let d = binarize(&two_triangle_probs(), SampleMode::Threshold, 0).unwrap();
        assert_eq!(d.unit_size(), 3);
        assert_eq!(d.unit_count(), 2);
        let g = assemble(&d);
        assert_eq!(g.edge_count(), 7);
        assert_eq!(g.adjacency()[[0, 3]], 1);
        // 0/1 probabilities are deterministic under Bernoulli sampling too.
        assert_eq!(binarize(&two_triangle_probs(), SampleMode::Bernoulli, 5).unwrap(), d);
    }

    #[test]
    fn all_zero_probabilities_give_single_node() {
        let p = EdgeProbabilities {
            local: Matrix::zeros((6, 6)),
            neighbor: Matrix::zeros((6, 6)),
            global: Matrix::zeros((4, 4)),
        };
        let d = binarize(&p, SampleMode::Threshold, 0).unwrap();
        assert_eq!((d.unit_size(), d.unit_count()), (1, 1));
        assert_eq!(assemble(&d).node_count(), 1);
    }

    #[test]
    fn bernoulli_sampling_is_seeded() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let z = LatentPair::sample_prior(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let a = params.sample_graph(&z, SampleMode::Bernoulli, 11).unwrap();
        let b = params.sample_graph(&z, SampleMode::Bernoulli, 11).unwrap();
        assert_eq!(a, b);
        assert!(is_assembled_periodic(&a));
    }

    #[test]
    fn params_file_roundtrip_and_shape_rejection() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 10).unwrap();
        let file = params.to_file();
        let json = serde_json::to_string(&file).unwrap();
        let back = ModelParams::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, params);

        let mut bad = file.clone();
        bad.config.d_l = 5;
        assert!(matches!(ModelParams::from_file(&bad), Err(Error::ParamShape { .. })));
        let mut bad = file;
        bad.params[0].values.pop();
        assert!(ModelParams::from_file(&bad).is_err());
    }

    #[test]
    fn decoder_shapes_depend_only_on_bounds() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 11).unwrap();
        let expected = cfg.hidden * (cfg.d_l + 1) * 2
            + (cfg.hidden * (cfg.hidden + 1)) * 3
            + cfg.hidden * cfg.d_g + cfg.hidden
            + (cfg.hidden + 1) * cfg.n_max * cfg.n_max * 2
            + (cfg.hidden + 1) * cfg.m_max * cfg.m_max;
        assert_eq!(params.decoder_scalar_count(), expected);
    }
}
