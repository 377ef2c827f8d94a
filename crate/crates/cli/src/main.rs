use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pgdvae_core::datagen::{
    generate_dataset, load_dataset, matrix_to_rows, rows_to_matrix, write_dataset, DatasetManifest, DatasetRecord,
    GlobalPattern,
};
use pgdvae_core::eval::{bfs_stability, evaluate, latent_traversal, Latent};
use pgdvae_core::model::{LatentPair, ModelParams, SampleMode};
use pgdvae_core::pgraph::{assemble, decompose, Decomposition, PeriodicGraph, UnitKind};
use pgdvae_core::train::{write_atomic, CheckpointFile, Trainer, TrainConfig, EPOCH_LOG, FINAL_CHECKPOINT};

mod manifest;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "pgdvae", version, about = "Periodic graph generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic periodic-graph dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Sample graphs from a trained model.
    Sample(SampleArgs),
    /// Compare generated graphs against reference and training sets.
    Eval(EvalArgs),
    /// Sweep one latent coordinate and decode each step.
    Traverse(TraverseArgs),
    /// Split full adjacencies into unit, unit-graph and bond matrices.
    Decompose(DecomposeArgs),
    /// Build full adjacencies from unit, unit-graph and bond matrices.
    Assemble(AssembleArgs),
    /// Rank-correlation stability of BFS orderings under relabelling.
    BfsStability(BfsArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_delimiter = ',', default_value = "triangle,grid,hexagon")]
    units: Vec<UnitKind>,
    #[arg(long, default_value_t = 100)]
    count_per_unit: usize,
    #[arg(long, default_value_t = 8)]
    m_max: usize,
    /// Smallest unit count drawn.
    #[arg(long, default_value_t = 2)]
    m_min: usize,
    #[arg(long, default_value_t = 6)]
    n_max: usize,
    #[arg(long, default_value = "chain")]
    pattern: GlobalPattern,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with training, `[model]` and `[objective]` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value = "bernoulli")]
    mode: SampleMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long)]
    train_set: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TraverseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    latent: Latent,
    #[arg(long)]
    dim: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    values: Vec<f64>,
    /// Draw the fixed latents from the prior with this seed instead of
    /// using zeros.
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    n: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AssembleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BfsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    perms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Traverse(a) => traverse(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::Assemble(a) => assemble_cmd(a),
        Command::BfsStability(a) => bfs(a),
    }
}

fn load(path: &Path) -> Result<Vec<DatasetRecord>> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn save_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    write_atomic(path, |out| write_dataset(out, records)).with_context(|| format!("writing {}", path.display()))
}

fn save_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |out| Ok(out.write_all(text.as_bytes())?))
        .with_context(|| format!("writing {}", path.display()))
}

fn load_params(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.units.is_empty() {
        bail!("--units lists no unit kinds");
    }
    let mut mf = DatasetManifest::uniform(&a.units, a.count_per_unit, a.pattern, a.seed);
    mf.n_max = a.n_max;
    mf.m_max = a.m_max;
    mf.m_range = (a.m_min, a.m_max);
    let records = generate_dataset(&mf)?;
    save_records(&a.out, &records)?;
    RunManifest::new("gen-data", &mf)?
        .seed(a.seed)
        .output(&a.out)
        .write_beside(&a.out)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let data = load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = CheckpointFile::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            Trainer::from_checkpoint(&ckpt, cfg.clone())?
        }
        None => Trainer::new(cfg.clone())?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = RunManifest::new("train", &cfg)?
        .seed(cfg.seed)
        .input(&a.data)
        .output(&a.out.join(FINAL_CHECKPOINT))
        .output(&a.out.join(EPOCH_LOG));
    if let Some(c) = &a.config {
        manifest = manifest.input(c);
    }
    if let Some(r) = &a.resume {
        manifest = manifest.input(r);
    }
    trainer.run(&data, Some(&a.out))?;
    manifest.write_to(&a.out.join("manifest.json"))
}

fn sample(a: SampleArgs) -> Result<()> {
    let params = load_params(&a.ckpt)?;
    let cfg = params.config();
    let padded = cfg.n_max * cfg.m_max;
    let records = params
        .sample_prior_decompositions(a.count, a.mode, a.seed)?
        .into_iter()
        .enumerate()
        .map(|(i, d)| DatasetRecord::new(None, d, padded, a.seed.wrapping_add(i as u64)))
        .collect::<pgdvae_core::Result<Vec<_>>>()?;
    save_records(&a.out, &records)?;
    #[derive(Serialize)]
    struct Resolved {
        count: usize,
        mode: String,
    }
    let mode = match a.mode {
        SampleMode::Threshold => "threshold",
        SampleMode::Bernoulli => "bernoulli",
    };
    RunManifest::new("sample", &Resolved { count: a.count, mode: mode.into() })?
        .seed(a.seed)
        .input(&a.ckpt)
        .output(&a.out)
        .write_beside(&a.out)
}

fn graphs(records: Vec<DatasetRecord>) -> Vec<PeriodicGraph> {
    records.into_iter().map(|r| r.graph).collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let reference = graphs(load(&a.reference)?);
    let gen = graphs(load(&a.gen)?);
    let train = graphs(load(&a.train_set)?);
    let report = evaluate(&gen, &reference, &train)?;
    save_text(&a.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    RunManifest::new("eval", &report)?
        .input(&a.reference)
        .input(&a.gen)
        .input(&a.train_set)
        .output(&a.out)
        .write_beside(&a.out)
}

fn traverse(a: TraverseArgs) -> Result<()> {
    let params = load_params(&a.ckpt)?;
    let cfg = params.config().clone();
    let base = match a.base_seed {
        Some(s) => LatentPair::sample_prior(&cfg, &mut ChaCha8Rng::seed_from_u64(s)),
        None => LatentPair {
            z_l: vec![0.0; cfg.d_l],
            z_g: vec![0.0; cfg.d_g],
        },
    };
    let steps = latent_traversal(&params, &base, a.latent, a.dim, &a.values)?;
    let padded = cfg.n_max * cfg.m_max;
    let records = steps
        .iter()
        .map(|s| DatasetRecord::new(None, s.decomposition.clone(), padded, 0))
        .collect::<pgdvae_core::Result<Vec<_>>>()?;
    save_records(&a.out, &records)?;

    let mut table = String::from("step,value,n,m,clustering,density\n");
    for (i, s) in steps.iter().enumerate() {
        let density = s.density.map(|d| d.to_string()).unwrap_or_default();
        table.push_str(&format!("{i},{},{},{},{},{density}\n", s.value, s.n, s.m, s.clustering));
    }
    let table_path = sibling(&a.out, ".steps.csv");
    save_text(&table_path, &table)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        latent: String,
        dim: usize,
        values: &'a [f64],
        base_seed: Option<u64>,
    }
    let resolved = Resolved {
        latent: a.latent.to_string(),
        dim: a.dim,
        values: &a.values,
        base_seed: a.base_seed,
    };
    let mut manifest = RunManifest::new("traverse", &resolved)?
        .input(&a.ckpt)
        .output(&a.out)
        .output(&table_path);
    if let Some(s) = a.base_seed {
        manifest = manifest.seed(s);
    }
    manifest.write_beside(&a.out)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Line of a `decompose` input; dataset lines qualify.
#[derive(Deserialize)]
struct AdjacencyLine {
    #[serde(rename = "A")]
    adjacency: Vec<Vec<u8>>,
    n: Option<usize>,
    m: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct DecompositionLine {
    n: usize,
    m: usize,
    #[serde(rename = "A_l")]
    local: Vec<Vec<u8>>,
    #[serde(rename = "A_g")]
    global: Vec<Vec<u8>>,
    #[serde(rename = "A_n")]
    neighbor: Vec<Vec<u8>>,
}

#[derive(Serialize)]
struct AssembledLine {
    n: usize,
    m: usize,
    #[serde(rename = "A")]
    adjacency: Vec<Vec<u8>>,
}

fn map_lines<T, F>(input: &Path, mut convert: F) -> Result<String>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T) -> Result<String>,
{
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: T = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
        out.push_str(&convert(parsed).with_context(|| format!("line {}", i + 1))?);
        out.push('\n');
    }
    Ok(out)
}

fn emit(out: Option<&Path>, text: &str, subcommand: &str, input: &Path, resolved: &impl Serialize) -> Result<()> {
    match out {
        Some(path) => {
            save_text(path, text)?;
            RunManifest::new(subcommand, resolved)?
                .input(input)
                .output(path)
                .write_beside(path)
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn decompose_cmd(a: DecomposeArgs) -> Result<()> {
    let text = map_lines(&a.input, |line: AdjacencyLine| {
        let adjacency = rows_to_matrix(&line.adjacency, "A").map_err(anyhow::Error::msg)?;
        let graph = match (line.n, line.m) {
            (Some(n), Some(m)) => PeriodicGraph::new(adjacency, n, m)?,
            _ => PeriodicGraph::from_adjacency(adjacency)?,
        };
        let d = decompose(&graph, a.n)?;
        Ok(serde_json::to_string(&DecompositionLine {
            n: d.unit_size(),
            m: d.unit_count(),
            local: matrix_to_rows(d.local()),
            global: matrix_to_rows(d.global()),
            neighbor: matrix_to_rows(d.neighbor()),
        })?)
    })?;
    #[derive(Serialize)]
    struct Resolved {
        n: usize,
    }
    emit(a.out.as_deref(), &text, "decompose", &a.input, &Resolved { n: a.n })
}

fn assemble_cmd(a: AssembleArgs) -> Result<()> {
    let text = map_lines(&a.input, |line: DecompositionLine| {
        let d = Decomposition::new(
            rows_to_matrix(&line.local, "A_l").map_err(anyhow::Error::msg)?,
            rows_to_matrix(&line.global, "A_g").map_err(anyhow::Error::msg)?,
            rows_to_matrix(&line.neighbor, "A_n").map_err(anyhow::Error::msg)?,
        )?;
        let g = assemble(&d);
        Ok(serde_json::to_string(&AssembledLine {
            n: g.unit_size(),
            m: g.unit_count(),
            adjacency: matrix_to_rows(g.adjacency()),
        })?)
    })?;
    emit(a.out.as_deref(), &text, "assemble", &a.input, &serde_json::json!({}))
}

fn bfs(a: BfsArgs) -> Result<()> {
    let data = graphs(load(&a.data)?);
    let r = bfs_stability(&data, a.perms, a.seed)?;
    let table = format!(
        "scheme,spearman,kendall\nbfs,{},{}\nrandom,{},{}\n",
        r.spearman_bfs, r.kendall_bfs, r.spearman_rand, r.kendall_rand
    );
    match &a.out {
        Some(path) => {
            save_text(path, &table)?;
            RunManifest::new("bfs-stability", &r)?
                .seed(a.seed)
                .input(&a.data)
                .output(path)
                .write_beside(path)
        }
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
