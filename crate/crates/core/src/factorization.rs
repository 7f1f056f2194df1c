//! Implicit-feedback matrix factorization over transaction counts.
//!
//! Transactions (add-to-cart events) per (user, item) or (user, category)
//! become a sparse count matrix. Alternating least squares with
//! confidence weights `c = 1 + conf_alpha * count` and binary preference
//! `p = 1` on observed cells fits dense factor vectors; the dot product of a
//! user row with an item (or category) column is the affinity score the
//! ranking layer consumes.
//!
//! Both half-sweeps solve exact per-row normal equations, so the objective
//! [`als_objective`] is non-increasing after every half-sweep; tests lean on
//! that invariant.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{CategoryMap, DomainError, EventType, InteractionEvent, ItemId, UserId};

const SECONDS_PER_DAY: i64 = 86_400;
const INIT_HALF_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FactorizationError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("no transactions in window")]
    NoTransactions,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("table ids do not match matrix ids ({0})")]
    IdMismatch(String),
    #[error("non-finite factor for {side} {id:?} after sweep {sweep}")]
    NonFinite {
        side: &'static str,
        id: String,
        sweep: usize,
    },
    #[error("embedding table: {0}")]
    InvalidTable(String),
    #[error("embedding file {path}: {reason}")]
    EmbFormat { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which column axis a transaction matrix is built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixAxis {
    Item,
    Category,
}

/// Sparse user × (item | category) transaction counts.
///
/// Counts are strictly positive; zero cells are implicit. Row and column
/// indices are assigned in first-appearance order of the input events, and
/// never leak outside this module's tables.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    /// Per row: (col index, count), sorted by col index.
    rows: Vec<Vec<(u32, f64)>>,
}

impl InteractionMatrix {
    /// Builds the matrix from raw (row key, col key) transaction pairs,
    /// counting occurrences.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self, FactorizationError> {
        let mut row_index: HashMap<String, u32> = HashMap::new();
        let mut col_index: HashMap<String, u32> = HashMap::new();
        let mut row_ids = Vec::new();
        let mut col_ids = Vec::new();
        let mut counts: HashMap<(u32, u32), f64> = HashMap::new();

        for (row_key, col_key) in pairs {
            let r = *row_index.entry(row_key.clone()).or_insert_with(|| {
                row_ids.push(row_key.clone());
                (row_ids.len() - 1) as u32
            });
            let c = *col_index.entry(col_key.clone()).or_insert_with(|| {
                col_ids.push(col_key.clone());
                (col_ids.len() - 1) as u32
            });
            *counts.entry((r, c)).or_insert(0.0) += 1.0;
        }

        if counts.is_empty() {
            return Err(FactorizationError::NoTransactions);
        }

        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); row_ids.len()];
        for ((r, c), count) in counts {
            rows[r as usize].push((c, count));
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|&(c, _)| c);
        }

        Ok(Self {
            row_ids,
            col_ids,
            rows,
        })
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Observed cells of one row as (col index, count).
    pub fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.rows[r]
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, cells)| cells.iter().map(move |&(c, n)| (r, c as usize, n)))
    }

    /// Column-major adjacency: per col, (row index, count) sorted by row.
    fn transpose(&self) -> Vec<Vec<(u32, f64)>> {
        let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); self.col_ids.len()];
        for (r, cells) in self.rows.iter().enumerate() {
            for &(c, n) in cells {
                cols[c as usize].push((r as u32, n));
            }
        }
        cols
    }
}

/// Counts add-to-cart transactions per (user, item) or (user, category)
/// within a trailing window ending at the newest event timestamp.
pub fn build_matrix(
    events: &[InteractionEvent],
    axis: MatrixAxis,
    catalog: &CategoryMap,
    window_days: u32,
) -> Result<InteractionMatrix, FactorizationError> {
    let max_ts = events
        .iter()
        .filter(|e| e.event == EventType::Atc)
        .map(|e| e.ts)
        .max()
        .ok_or(FactorizationError::NoTransactions)?;
    let cutoff = max_ts - i64::from(window_days) * SECONDS_PER_DAY;

    let mut pairs = Vec::new();
    for event in events {
        if event.event != EventType::Atc || event.ts < cutoff {
            continue;
        }
        let Some(item) = &event.item else { continue };
        let col_key = match axis {
            MatrixAxis::Item => item.as_str().to_string(),
            MatrixAxis::Category => catalog.category_of(item)?.as_str().to_string(),
        };
        pairs.push((event.user.as_str().to_string(), col_key));
    }
    InteractionMatrix::from_pairs(pairs)
}

/// Hyperparameters of the ALS trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Factor dimensionality.
    pub dim: usize,
    /// Full alternating sweeps (rows then cols counts as one).
    pub iterations: usize,
    /// L2 regularization on every factor vector.
    pub reg: f64,
    /// Confidence slope: c = 1 + conf_alpha * count.
    pub conf_alpha: f64,
    /// Seed for factor initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            iterations: 15,
            reg: 0.01,
            conf_alpha: 40.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FactorizationError> {
        if self.dim < 1 {
            return Err(FactorizationError::InvalidConfig("dim must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(FactorizationError::InvalidConfig(
                "iterations must be >= 1".into(),
            ));
        }
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(FactorizationError::InvalidConfig("reg must be > 0".into()));
        }
        if !(self.conf_alpha >= 0.0 && self.conf_alpha.is_finite()) {
            return Err(FactorizationError::InvalidConfig(
                "conf_alpha must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Dense factor vectors for one trained model: row (user) factors plus
/// column (item or category) factors, with id ↔ index maps.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    row_ids: Vec<String>,
    row_index: HashMap<String, usize>,
    row_factors: Vec<f64>,
    row_mean: Vec<f64>,
    col_ids: Vec<String>,
    col_index: HashMap<String, usize>,
    col_factors: Vec<f64>,
    col_mean: Vec<f64>,
}

fn index_of(ids: &[String]) -> HashMap<String, usize> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect()
}

fn mean_vector(factors: &[f64], dim: usize) -> Vec<f64> {
    let n = factors.len() / dim.max(1);
    let mut mean = vec![0.0; dim];
    for row in factors.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    if n > 0 {
        for m in &mut mean {
            *m /= n as f64;
        }
    }
    mean
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EmbeddingTable {
    pub fn from_parts(
        dim: usize,
        row_ids: Vec<String>,
        row_factors: Vec<f64>,
        col_ids: Vec<String>,
        col_factors: Vec<f64>,
    ) -> Result<Self, FactorizationError> {
        if dim == 0 {
            return Err(FactorizationError::InvalidTable("dim must be >= 1".into()));
        }
        if row_factors.len() != row_ids.len() * dim || col_factors.len() != col_ids.len() * dim {
            return Err(FactorizationError::InvalidTable(format!(
                "factor lengths {}x{} do not match {} rows / {} cols",
                row_factors.len(),
                col_factors.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if row_factors.iter().chain(&col_factors).any(|v| !v.is_finite()) {
            return Err(FactorizationError::InvalidTable(
                "factors contain non-finite values".into(),
            ));
        }
        let row_index = index_of(&row_ids);
        let col_index = index_of(&col_ids);
        if row_index.len() != row_ids.len() || col_index.len() != col_ids.len() {
            return Err(FactorizationError::InvalidTable("duplicate ids".into()));
        }
        let row_mean = mean_vector(&row_factors, dim);
        let col_mean = mean_vector(&col_factors, dim);
        Ok(Self {
            dim,
            row_ids,
            row_index,
            row_factors,
            row_mean,
            col_ids,
            col_index,
            col_factors,
            col_mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn row_factors(&self) -> &[f64] {
        &self.row_factors
    }

    pub fn col_factors(&self) -> &[f64] {
        &self.col_factors
    }

    pub fn row_vector(&self, id: &str) -> Option<&[f64]> {
        self.row_index
            .get(id)
            .map(|&i| &self.row_factors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn col_vector(&self, id: &str) -> Option<&[f64]> {
        self.col_index
            .get(id)
            .map(|&i| &self.col_factors[i * self.dim..(i + 1) * self.dim])
    }

    /// Mean of all row (user) vectors; the cold-user fallback.
    pub fn mean_row_vector(&self) -> &[f64] {
        &self.row_mean
    }

    /// Mean of all column vectors; the cold-column fallback for scores that
    /// tolerate unseen columns.
    pub fn mean_col_vector(&self) -> &[f64] {
        &self.col_mean
    }

    /// User-item affinity: the dot product of the user row with the item
    /// column. Cold users fall back to the mean user vector; unknown items
    /// are an error (the scoring layer decides the fallback there).
    pub fn predict_affinity(&self, user: &UserId, item: &ItemId) -> Result<f64, FactorizationError> {
        let y = self
            .col_vector(item.as_str())
            .ok_or_else(|| FactorizationError::IdMismatch(format!("unknown item {}", item)))?;
        let x = self.row_vector(user.as_str()).unwrap_or(&self.row_mean);
        Ok(dot(x, y))
    }

    /// Writes the two factor blocks (rows then columns), each as a
    /// `dim=<n> rows=<r>` header followed by one `<id> <v1> ... <vn>` line
    /// per id. Floats use the shortest representation that round-trips.
    pub fn write_to(&self, path: &Path) -> Result<(), FactorizationError> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for (ids, factors) in [(&self.row_ids, &self.row_factors), (&self.col_ids, &self.col_factors)] {
            writeln!(out, "dim={} rows={}", self.dim, ids.len())?;
            for (i, id) in ids.iter().enumerate() {
                write!(out, "{id}")?;
                for v in &factors[i * self.dim..(i + 1) * self.dim] {
                    write!(out, " {v}")?;
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a file produced by [`EmbeddingTable::write_to`].
    pub fn read_from(path: &Path) -> Result<Self, FactorizationError> {
        let fmt_err = |reason: String| FactorizationError::EmbFormat {
            path: path.display().to_string(),
            reason,
        };
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let mut blocks: Vec<(usize, Vec<String>, Vec<f64>)> = Vec::new();

        while let Some(header) = lines.next() {
            let header = header?;
            if header.trim().is_empty() {
                continue;
            }
            let (dim, rows) = parse_emb_header(&header).map_err(|r| fmt_err(r))?;
            let mut ids = Vec::with_capacity(rows);
            let mut factors = Vec::with_capacity(rows * dim);
            for _ in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| fmt_err("unexpected end of file".into()))??;
                let mut parts = line.split(' ');
                let id = parts
                    .next()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| fmt_err(format!("bad factor line {line:?}")))?;
                ids.push(id.to_string());
                for part in parts {
                    let v: f64 = part
                        .parse()
                        .map_err(|_| fmt_err(format!("bad float {part:?}")))?;
                    factors.push(v);
                }
                if factors.len() != ids.len() * dim {
                    return Err(fmt_err(format!(
                        "row {id} has {} values, expected {dim}",
                        factors.len() - (ids.len() - 1) * dim
                    )));
                }
            }
            blocks.push((dim, ids, factors));
        }

        if blocks.len() != 2 {
            return Err(fmt_err(format!(
                "expected 2 factor blocks (rows, cols), found {}",
                blocks.len()
            )));
        }
        let (col_dim, col_ids, col_factors) = blocks.pop().expect("checked length");
        let (row_dim, row_ids, row_factors) = blocks.pop().expect("checked length");
        if row_dim != col_dim {
            return Err(fmt_err(format!(
                "row block dim={row_dim} does not match col block dim={col_dim}"
            )));
        }
        Self::from_parts(row_dim, row_ids, row_factors, col_ids, col_factors)
    }
}

fn parse_emb_header(header: &str) -> Result<(usize, usize), String> {
    let mut dim = None;
    let mut rows = None;
    for part in header.split_whitespace() {
        if let Some(v) = part.strip_prefix("dim=") {
            dim = v.parse::<usize>().ok();
        } else if let Some(v) = part.strip_prefix("rows=") {
            rows = v.parse::<usize>().ok();
        }
    }
    match (dim, rows) {
        (Some(d), Some(r)) if d >= 1 => Ok((d, r)),
        _ => Err(format!("bad header {header:?}")),
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Small symmetric init drawn per id (not per index), so permuting input
/// row order permutes the init with it and predictions stay put.
fn init_factors(ids: &[String], dim: usize, seed: u64, side: u8) -> Vec<f64> {
    let dist = Uniform::new(-INIT_HALF_RANGE, INIT_HALF_RANGE);
    let mut factors = Vec::with_capacity(ids.len() * dim);
    for id in ids {
        let mut tagged = Vec::with_capacity(id.len() + 1);
        tagged.push(side);
        tagged.extend_from_slice(id.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(&tagged));
        for _ in 0..dim {
            factors.push(rng.sample(dist));
        }
    }
    factors
}

/// Alternating least squares state, exposing individual half-sweeps so tests
/// can watch the objective between them.
pub struct AlsTrainer<'a> {
    matrix: &'a InteractionMatrix,
    cols_by_row: &'a [Vec<(u32, f64)>],
    rows_by_col: Vec<Vec<(u32, f64)>>,
    cfg: TrainConfig,
    row_factors: Vec<f64>,
    col_factors: Vec<f64>,
    sweeps_done: usize,
}

impl<'a> AlsTrainer<'a> {
    pub fn new(matrix: &'a InteractionMatrix, cfg: TrainConfig) -> Result<Self, FactorizationError> {
        cfg.validate()?;
        if matrix.n_rows() == 0 || matrix.n_cols() == 0 {
            return Err(FactorizationError::NoTransactions);
        }
        Ok(Self {
            matrix,
            cols_by_row: &matrix.rows,
            rows_by_col: matrix.transpose(),
            cfg,
            row_factors: init_factors(&matrix.row_ids, cfg.dim, cfg.seed, b'r'),
            col_factors: init_factors(&matrix.col_ids, cfg.dim, cfg.seed, b'c'),
            sweeps_done: 0,
        })
    }

    /// Re-solves every row (user) factor against fixed column factors.
    pub fn sweep_rows(&mut self) -> Result<(), FactorizationError> {
        let gram = gram_matrix(&self.col_factors, self.cfg.dim);
        solve_side(
            &mut self.row_factors,
            &self.col_factors,
            self.cols_by_row,
            &gram,
            &self.cfg,
        );
        self.sweeps_done += 1;
        self.check_finite(&["row"])
    }

    /// Re-solves every column (item/category) factor against fixed rows.
    pub fn sweep_cols(&mut self) -> Result<(), FactorizationError> {
        let gram = gram_matrix(&self.row_factors, self.cfg.dim);
        solve_side(
            &mut self.col_factors,
            &self.row_factors,
            &self.rows_by_col,
            &gram,
            &self.cfg,
        );
        self.sweeps_done += 1;
        self.check_finite(&["col"])
    }

    fn check_finite(&self, sides: &[&'static str]) -> Result<(), FactorizationError> {
        for side in sides {
            let (factors, ids) = match *side {
                "row" => (&self.row_factors, &self.matrix.row_ids),
                _ => (&self.col_factors, &self.matrix.col_ids),
            };
            if let Some(pos) = factors.iter().position(|v| !v.is_finite()) {
                return Err(FactorizationError::NonFinite {
                    side,
                    id: ids[pos / self.cfg.dim].clone(),
                    sweep: self.sweeps_done,
                });
            }
        }
        Ok(())
    }

    /// Copies the current factors into an immutable table.
    pub fn snapshot(&self) -> EmbeddingTable {
        EmbeddingTable::from_parts(
            self.cfg.dim,
            self.matrix.row_ids.clone(),
            self.row_factors.clone(),
            self.matrix.col_ids.clone(),
            self.col_factors.clone(),
        )
        .expect("trainer state is always a valid table")
    }

    pub fn into_table(self) -> EmbeddingTable {
        EmbeddingTable::from_parts(
            self.cfg.dim,
            self.matrix.row_ids.clone(),
            self.row_factors,
            self.matrix.col_ids.clone(),
            self.col_factors,
        )
        .expect("trainer state is always a valid table")
    }
}

/// `XᵀX` over one side's factors, accumulated sequentially so results are
/// bit-identical run to run.
fn gram_matrix(factors: &[f64], dim: usize) -> Vec<f64> {
    let mut gram = vec![0.0; dim * dim];
    for row in factors.chunks_exact(dim) {
        for i in 0..dim {
            let vi = row[i];
            for j in 0..dim {
                gram[i * dim + j] += vi * row[j];
            }
        }
    }
    gram
}

/// One exact half-sweep: for every row of `target`, solve
/// `(G + Σ (c-1) y yᵀ + reg I) x = Σ c y` over that row's observed cells.
/// Rows are independent, so the parallel loop is deterministic.
fn solve_side(
    target: &mut [f64],
    other: &[f64],
    adjacency: &[Vec<(u32, f64)>],
    gram: &[f64],
    cfg: &TrainConfig,
) {
    let dim = cfg.dim;
    target
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(r, out_row)| {
            let cells = &adjacency[r];
            if cells.is_empty() {
                // rows with no observations only see the regularizer; keep
                // them at zero rather than solving a degenerate system
                out_row.fill(0.0);
                return;
            }
            let mut a = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    a[(i, j)] = gram[i * dim + j];
                }
                a[(i, i)] += cfg.reg;
            }
            let mut b = DVector::<f64>::zeros(dim);
            for &(c, count) in cells {
                let y = &other[c as usize * dim..(c as usize + 1) * dim];
                let conf = 1.0 + cfg.conf_alpha * count;
                let extra = conf - 1.0;
                for i in 0..dim {
                    b[i] += conf * y[i];
                    let yi_scaled = extra * y[i];
                    for j in 0..dim {
                        a[(i, j)] += yi_scaled * y[j];
                    }
                }
            }
            // reg > 0 makes the normal matrix positive definite
            let chol: Cholesky<f64, nalgebra::Dyn> = a
                .cholesky()
                .expect("normal equations are positive definite for reg > 0");
            let x = chol.solve(&b);
            out_row.copy_from_slice(x.as_slice());
        });
}

/// Trains factors with `cfg.iterations` full alternating sweeps.
/// Deterministic given (matrix, cfg): identical inputs give bit-identical
/// embeddings on one platform.
pub fn train_als(
    matrix: &InteractionMatrix,
    cfg: TrainConfig,
) -> Result<EmbeddingTable, FactorizationError> {
    let mut trainer = AlsTrainer::new(matrix, cfg)?;
    for _ in 0..cfg.iterations {
        trainer.sweep_rows()?;
        trainer.sweep_cols()?;
    }
    Ok(trainer.into_table())
}

/// Exact confidence-weighted objective
/// `Σ_{u,i} c_ui (p_ui − x_uᵀy_i)² + reg (Σ‖x‖² + Σ‖y‖²)`, evaluated with the
/// (c−1)-on-observed decomposition: every cell costs `(x_uᵀy_i)²` at weight 1
/// and observed cells add `c (1 − r)² − r²` on top.
pub fn als_objective(
    matrix: &InteractionMatrix,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<f64, FactorizationError> {
    if table.row_ids() != matrix.row_ids() {
        return Err(FactorizationError::IdMismatch("row ids differ".into()));
    }
    if table.col_ids() != matrix.col_ids() {
        return Err(FactorizationError::IdMismatch("col ids differ".into()));
    }
    let dim = table.dim();
    let gram = gram_matrix(table.col_factors(), dim);

    let mut j = 0.0;
    for (r, x) in table.row_factors().chunks_exact(dim).enumerate() {
        // Σ_i (xᵀy_i)² = xᵀ (YᵀY) x: the weight-1, p=0 cost over all cells
        let mut quad = 0.0;
        for i in 0..dim {
            let mut gx = 0.0;
            for k in 0..dim {
                gx += gram[i * dim + k] * x[k];
            }
            quad += x[i] * gx;
        }
        j += quad;
        for &(c, count) in matrix.row(r) {
            let y = &table.col_factors()[c as usize * dim..(c as usize + 1) * dim];
            let r_ui = dot(x, y);
            let conf = 1.0 + cfg.conf_alpha * count;
            j += conf * (1.0 - r_ui) * (1.0 - r_ui) - r_ui * r_ui;
        }
    }

    let reg_cost: f64 = table
        .row_factors()
        .iter()
        .chain(table.col_factors())
        .map(|v| v * v)
        .sum();
    Ok(j + cfg.reg * reg_cost)
}
