//! Synthetic periodic-graph corpora and the line-delimited dataset format.
//!
//! Each line of a dataset file is one JSON object
//! `{"unit_kind", "n", "m", "A_l", "A_g", "A_n", "A", "seed"}` with dense
//! row-major 0/1 matrices written as arrays of rows. `A` is the assembled
//! graph zero-padded to the corpus bound.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgraph::{assemble, BinaryMatrix, Decomposition, PeriodicGraph};
pub use crate::pgraph::UnitKind;

/// How units are wired to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalPattern {
    Chain,
    Cycle,
}

impl std::str::FromStr for GlobalPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chain" => Ok(GlobalPattern::Chain),
            "cycle" => Ok(GlobalPattern::Cycle),
            other => Err(Error::InvalidArgument(format!("unknown global pattern `{other}`"))),
        }
    }
}

/// Basic-unit adjacency: K3, the 4-cycle or the 6-cycle.
pub fn make_unit(kind: UnitKind) -> BinaryMatrix {
    let n = kind.unit_size();
    match kind {
        UnitKind::Triangle => Array2::from_shape_fn((n, n), |(i, j)| u8::from(i != j)),
        UnitKind::Grid | UnitKind::Hexagon => cycle_graph(n),
    }
}

fn cycle_graph(n: usize) -> BinaryMatrix {
    let mut a = BinaryMatrix::zeros((n, n));
    for i in 0..n {
        let j = (i + 1) % n;
        a[[i, j]] = 1;
        a[[j, i]] = 1;
    }
    a
}

pub fn make_global(pattern: GlobalPattern, m: usize) -> Result<BinaryMatrix> {
    if m == 0 {
        return Err(Error::InvalidArgument("unit count must be at least 1".into()));
    }
    match pattern {
        GlobalPattern::Chain => {
            let mut a = BinaryMatrix::zeros((m, m));
            for u in 1..m {
                a[[u - 1, u]] = 1;
                a[[u, u - 1]] = 1;
            }
            Ok(a)
        }
        GlobalPattern::Cycle if m < 3 => Err(Error::InvalidArgument(format!(
            "cycle pattern needs at least 3 units, got {m}"
        ))),
        GlobalPattern::Cycle => Ok(cycle_graph(m)),
    }
}

/// A single bond from the last node of the lower unit to the first node of
/// the higher unit.
pub fn make_neighborhood(kind: UnitKind) -> BinaryMatrix {
    let n = kind.unit_size();
    let mut a = BinaryMatrix::zeros((n, n));
    a[[n - 1, 0]] = 1;
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Padding bound on unit size.
    pub n_max: usize,
    /// Padding bound on unit count.
    pub m_max: usize,
    /// Inclusive range unit counts are drawn from.
    pub m_range: (usize, usize),
    pub counts: BTreeMap<UnitKind, usize>,
    pub global_pattern: GlobalPattern,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(counts: BTreeMap<UnitKind, usize>, global_pattern: GlobalPattern, seed: u64) -> Self {
        Self {
            n_max: 6,
            m_max: 8,
            m_range: (2, 8),
            counts,
            global_pattern,
            seed,
        }
    }

    /// Same count for each listed kind.
    pub fn uniform(kinds: &[UnitKind], count: usize, global_pattern: GlobalPattern, seed: u64) -> Self {
        Self::new(kinds.iter().map(|&k| (k, count)).collect(), global_pattern, seed)
    }

    pub fn padded_size(&self) -> usize {
        self.n_max * self.m_max
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.m_range;
        if lo == 0 || lo > hi || hi > self.m_max {
            return Err(Error::InvalidArgument(format!(
                "unit-count range {lo}..={hi} must be nonempty, positive and within m_max={}",
                self.m_max
            )));
        }
        if self.global_pattern == GlobalPattern::Cycle && hi < 3 {
            return Err(Error::InvalidArgument("cycle pattern needs m_range reaching 3".into()));
        }
        if self.counts.is_empty() {
            return Err(Error::InvalidArgument("no unit kinds requested".into()));
        }
        for (&kind, &count) in &self.counts {
            if count == 0 {
                return Err(Error::InvalidArgument(format!("count for {kind} must be ≥ 1")));
            }
            if kind.unit_size() > self.n_max {
                return Err(Error::InvalidArgument(format!(
                    "{kind} has {} nodes, above n_max={}",
                    kind.unit_size(),
                    self.n_max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    /// `None` for generated graphs, which carry no unit label.
    pub unit_kind: Option<UnitKind>,
    pub decomposition: Decomposition,
    /// Assembled graph, zero-padded.
    pub graph: PeriodicGraph,
    pub seed: u64,
}

impl DatasetRecord {
    /// Assembles `decomposition` and pads the result to `padded_size`.
    pub fn new(
        unit_kind: Option<UnitKind>,
        decomposition: Decomposition,
        padded_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let graph = assemble(&decomposition)
            .padded(padded_size)?
            .with_label(unit_kind);
        Ok(Self {
            unit_kind,
            decomposition,
            graph,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.decomposition.unit_size()
    }

    pub fn m(&self) -> usize {
        self.decomposition.unit_count()
    }
}

pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Vec<DatasetRecord>> {
    manifest.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(manifest.seed);
    let (mut lo, hi) = manifest.m_range;
    if manifest.global_pattern == GlobalPattern::Cycle {
        lo = lo.max(3);
    }
    let mut records = Vec::new();
    for (&kind, &count) in &manifest.counts {
        for _ in 0..count {
            let seed = master.next_u64();
            let m = ChaCha8Rng::seed_from_u64(seed).random_range(lo..=hi);
            let d = Decomposition::new(
                make_unit(kind),
                make_global(manifest.global_pattern, m)?,
                make_neighborhood(kind),
            )?;
            records.push(DatasetRecord::new(Some(kind), d, manifest.padded_size(), seed)?);
        }
    }
    Ok(records)
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    unit_kind: Option<UnitKind>,
    n: usize,
    m: usize,
    #[serde(rename = "A_l")]
    local: Vec<Vec<u8>>,
    #[serde(rename = "A_g")]
    global: Vec<Vec<u8>>,
    #[serde(rename = "A_n")]
    neighbor: Vec<Vec<u8>>,
    #[serde(rename = "A")]
    adjacency: Vec<Vec<u8>>,
    #[serde(default)]
    seed: u64,
}

pub fn matrix_to_rows(a: &BinaryMatrix) -> Vec<Vec<u8>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Dense matrix from rows; every row must have `cols` entries.
pub fn rows_to_matrix(rows: &[Vec<u8>], what: &str) -> std::result::Result<BinaryMatrix, String> {
    let cols = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(format!("{what} row {i} has {} entries, expected {cols}", r.len()));
        }
    }
    let flat: Vec<u8> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| format!("{what}: {e}"))
}

impl DatasetRecord {
    /// One dataset line, without the trailing newline.
    pub fn to_line(&self) -> Result<String> {
        let line = RecordLine {
            unit_kind: self.unit_kind,
            n: self.n(),
            m: self.m(),
            local: matrix_to_rows(self.decomposition.local()),
            global: matrix_to_rows(self.decomposition.global()),
            neighbor: matrix_to_rows(self.decomposition.neighbor()),
            adjacency: matrix_to_rows(self.graph.adjacency()),
            seed: self.seed,
        };
        Ok(serde_json::to_string(&line)?)
    }

    /// Parses and validates one line; `line_no` is 1-based and only used
    /// in error messages.
    pub fn from_line(text: &str, line_no: usize) -> Result<Self> {
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let raw: RecordLine = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        let local = rows_to_matrix(&raw.local, "A_l").map_err(err)?;
        let global = rows_to_matrix(&raw.global, "A_g").map_err(err)?;
        let neighbor = rows_to_matrix(&raw.neighbor, "A_n").map_err(err)?;
        let adjacency = rows_to_matrix(&raw.adjacency, "A").map_err(err)?;
        for (what, mat, want) in [
            ("A_l", &local, raw.n),
            ("A_g", &global, raw.m),
            ("A_n", &neighbor, raw.n),
        ] {
            if mat.dim() != (want, want) {
                return Err(err(format!(
                    "{what} is {:?}, declared size is {want}×{want}",
                    mat.dim()
                )));
            }
        }
        let decomposition =
            Decomposition::new(local, global, neighbor).map_err(|e| err(e.to_string()))?;
        let graph = PeriodicGraph::new(adjacency, raw.n, raw.m)
            .map_err(|e| err(e.to_string()))?
            .with_label(raw.unit_kind);
        if assemble(&decomposition).active_adjacency() != graph.active_adjacency() {
            return Err(err("A does not match the assembled A_l, A_g, A_n".into()));
        }
        Ok(Self {
            unit_kind: raw.unit_kind,
            decomposition,
            graph,
            seed: raw.seed,
        })
    }
}

pub fn write_dataset<W: Write>(mut out: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line()?)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(DatasetRecord::from_line(&line, i + 1)?);
    }
    Ok(records)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(&mut out, records)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    read_dataset(BufReader::new(File::open(path)?))
}
