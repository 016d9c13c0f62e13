//! Low-rank completion of the sparse city × market distance matrix.
//!
//! Observed distances above a noise threshold are averaged per
//! (user_location_city, hotel_market) pair, normalized by the maximum entry,
//! factored by alternating ridge-regression sweeps, and rescaled back to km
//! at prediction time. Rows and columns cover every city/market seen in the
//! dataset, so a city whose events all lack distances exists as an
//! observation-free row and falls back to the global mean.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::schema::Dataset;
use crate::stream_seed;

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("no observed distances above the threshold; matrix is empty")]
    EmptyMatrix,
    #[error("matrix must be normalized before completion")]
    NotNormalized,
    #[error("rank {rank} exceeds min dimension {min_dim}")]
    RankTooLarge { rank: usize, min_dim: usize },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("factors file: {0}")]
    BadFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sparse mean-distance matrix over (city, market) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    /// city id → row index
    row_index: HashMap<u32, usize>,
    /// hotel_market id → column index
    col_index: HashMap<u32, usize>,
    /// city ids by row index
    row_ids: Vec<u32>,
    /// market ids by column index
    col_ids: Vec<u32>,
    /// (row, col, value) sorted by (row, col); one entry per observed pair
    observed: Vec<(usize, usize, f64)>,
    /// maximum observed entry before normalization, in km
    max_value: f64,
    normalized: bool,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn observed(&self) -> &[(usize, usize, f64)] {
        &self.observed
    }

    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row_of(&self, city: u32) -> Option<usize> {
        self.row_index.get(&city).copied()
    }

    pub fn col_of(&self, market: u32) -> Option<usize> {
        self.col_index.get(&market).copied()
    }

    /// Builds a matrix directly from (city, market, km) observations.
    /// Duplicate pairs are averaged. Used by tests and tools; the pipeline
    /// path is [`build_matrix`].
    pub fn from_entries(entries: &[(u32, u32, f64)]) -> Result<Self, CompletionError> {
        let mut acc: HashMap<(u32, u32), (f64, usize)> = HashMap::new();
        for &(city, market, km) in entries {
            let slot = acc.entry((city, market)).or_insert((0.0, 0));
            slot.0 += km;
            slot.1 += 1;
        }
        let mut cities: Vec<u32> = entries.iter().map(|e| e.0).collect();
        let mut markets: Vec<u32> = entries.iter().map(|e| e.1).collect();
        cities.sort_unstable();
        cities.dedup();
        markets.sort_unstable();
        markets.dedup();
        finish_matrix(cities, markets, acc)
    }
}

fn finish_matrix(
    cities: Vec<u32>,
    markets: Vec<u32>,
    acc: HashMap<(u32, u32), (f64, usize)>,
) -> Result<DistanceMatrix, CompletionError> {
    if acc.is_empty() {
        return Err(CompletionError::EmptyMatrix);
    }
    let row_index: HashMap<u32, usize> = cities.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let col_index: HashMap<u32, usize> = markets.iter().enumerate().map(|(i, &m)| (m, i)).collect();

    let mut observed: Vec<(usize, usize, f64)> = acc
        .into_iter()
        .map(|((city, market), (sum, count))| {
            (row_index[&city], col_index[&market], sum / count as f64)
        })
        .collect();
    observed.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let max_value = observed
        .iter()
        .map(|&(_, _, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(DistanceMatrix {
        row_index,
        col_index,
        row_ids: cities,
        col_ids: markets,
        observed,
        max_value,
        normalized: false,
    })
}

/// Builds the sparse distance matrix from a train dataset.
///
/// Each (city, market) entry averages the observed distances for that pair
/// that exceed `min_distance_km`; pairs without a qualifying observation are
/// unobserved. Rows and columns index every city/market in the dataset, even
/// observation-free ones.
pub fn build_matrix(
    dataset: &Dataset,
    min_distance_km: f64,
) -> Result<DistanceMatrix, CompletionError> {
    let mut acc: HashMap<(u32, u32), (f64, usize)> = HashMap::new();
    let mut cities: Vec<u32> = Vec::new();
    let mut markets: Vec<u32> = Vec::new();
    for e in &dataset.events {
        cities.push(e.user_location_city);
        markets.push(e.hotel_market);
        if let Some(d) = e.orig_destination_distance {
            if d > min_distance_km {
                let slot = acc
                    .entry((e.user_location_city, e.hotel_market))
                    .or_insert((0.0, 0));
                slot.0 += d;
                slot.1 += 1;
            }
        }
    }
    cities.sort_unstable();
    cities.dedup();
    markets.sort_unstable();
    markets.dedup();
    finish_matrix(cities, markets, acc)
}

/// Divides every entry by the maximum so values land in (0,1]; the maximum
/// is retained for rescaling.
pub fn normalize(matrix: &DistanceMatrix) -> DistanceMatrix {
    let mut out = matrix.clone();
    if out.normalized {
        return out;
    }
    for entry in &mut out.observed {
        entry.2 /= matrix.max_value;
    }
    out.normalized = true;
    out
}

/// ALS hyperparameters. The solver is deterministic for a fixed seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionParams {
    pub rank: usize,
    pub ridge: f64,
    pub max_iters: usize,
    /// Stop when the relative change in masked RMSE falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            rank: 8,
            ridge: 0.1,
            max_iters: 200,
            tol: 1e-5,
            seed: 0,
        }
    }
}

/// Factored completion plus the information needed to serve predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedMatrix {
    row_index: HashMap<u32, usize>,
    col_index: HashMap<u32, usize>,
    row_ids: Vec<u32>,
    col_ids: Vec<u32>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// rows/cols that had at least one observation
    row_seen: Vec<bool>,
    col_seen: Vec<bool>,
    max_value: f64,
    /// global mean of observed entries, in km
    fallback: f64,
    /// masked RMSE after each sweep, on the normalized scale
    diagnostics: Vec<f64>,
}

impl CompletedMatrix {
    pub fn rank(&self) -> usize {
        self.u.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn fallback(&self) -> f64 {
        self.fallback
    }

    /// Masked RMSE per sweep on the normalized scale; non-increasing.
    pub fn diagnostics(&self) -> &[f64] {
        &self.diagnostics
    }
}

/// Completes a normalized matrix by alternating ridge regressions.
///
/// Each sweep solves the per-row systems then the per-column systems; the
/// masked RMSE is recorded after every sweep and iteration stops when its
/// relative change drops below `tol` or `max_iters` is reached.
pub fn als_complete(
    matrix: &DistanceMatrix,
    params: &CompletionParams,
) -> Result<CompletedMatrix, CompletionError> {
    if !matrix.normalized {
        return Err(CompletionError::NotNormalized);
    }
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let min_dim = rows.min(cols);
    if params.rank == 0 {
        return Err(CompletionError::BadParameter("rank must be positive".into()));
    }
    if params.rank > min_dim {
        return Err(CompletionError::RankTooLarge {
            rank: params.rank,
            min_dim,
        });
    }
    if params.ridge < 0.0 {
        return Err(CompletionError::BadParameter("ridge must be >= 0".into()));
    }
    if params.max_iters == 0 {
        return Err(CompletionError::BadParameter(
            "max_iters must be positive".into(),
        ));
    }
    if params.tol <= 0.0 {
        return Err(CompletionError::BadParameter("tol must be positive".into()));
    }
    let k = params.rank;

    // per-row and per-column observation lists
    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cols];
    for &(r, c, val) in &matrix.observed {
        by_row[r].push((c, val));
        by_col[c].push((r, val));
    }

    let gaussian = Normal::new(0.0, 0.01).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(params.seed, 0));
    let mut u: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..k).map(|_| gaussian.sample(&mut rng)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..k).map(|_| gaussian.sample(&mut rng)).collect())
        .collect();

    let masked_rmse = |u: &[Vec<f64>], v: &[Vec<f64>]| -> f64 {
        let sse: f64 = matrix
            .observed
            .par_iter()
            .map(|&(r, c, val)| {
                let pred: f64 = u[r].iter().zip(&v[c]).map(|(a, b)| a * b).sum();
                let d = pred - val;
                d * d
            })
            .sum();
        (sse / matrix.observed.len() as f64).sqrt()
    };

    let mut diagnostics = Vec::new();
    let mut prev = f64::INFINITY;
    for _iter in 0..params.max_iters {
        u = solve_side(&by_row, &v, k, params.ridge);
        v = solve_side(&by_col, &u, k, params.ridge);
        let rmse = masked_rmse(&u, &v);
        diagnostics.push(rmse);
        if prev.is_finite() {
            let rel = (prev - rmse).abs() / prev.max(f64::MIN_POSITIVE);
            if rel < params.tol {
                break;
            }
        }
        prev = rmse;
    }

    let mut row_seen = vec![false; rows];
    let mut col_seen = vec![false; cols];
    let mut sum = 0.0;
    for &(r, c, val) in &matrix.observed {
        row_seen[r] = true;
        col_seen[c] = true;
        sum += val;
    }
    // fallback in km regardless of normalization
    let fallback = sum / matrix.observed.len() as f64 * matrix.max_value;

    Ok(CompletedMatrix {
        row_index: matrix.row_index.clone(),
        col_index: matrix.col_index.clone(),
        row_ids: matrix.row_ids.clone(),
        col_ids: matrix.col_ids.clone(),
        u,
        v,
        row_seen,
        col_seen,
        max_value: matrix.max_value,
        fallback,
        diagnostics,
    })
}

/// Solves the independent per-row ridge systems for one half-sweep.
fn solve_side(
    obs: &[Vec<(usize, f64)>],
    other: &[Vec<f64>],
    k: usize,
    ridge: f64,
) -> Vec<Vec<f64>> {
    obs.par_iter()
        .map(|entries| {
            if entries.is_empty() {
                return vec![0.0; k];
            }
            // normal equations: (FᵀF + ridge·I) x = Fᵀy over observed entries
            let mut a = vec![0.0; k * k];
            let mut b = vec![0.0; k];
            for &(j, y) in entries {
                let f = &other[j];
                for p in 0..k {
                    let fp = f[p];
                    b[p] += fp * y;
                    for q in p..k {
                        a[p * k + q] += fp * f[q];
                    }
                }
            }
            for p in 0..k {
                a[p * k + p] += ridge;
                for q in 0..p {
                    a[p * k + q] = a[q * k + p];
                }
            }
            solve_sym(&mut a, &mut b, k)
        })
        .collect()
}

/// Solves a small symmetric positive (semi)definite system in place via
/// Gaussian elimination with partial pivoting. Singular systems yield zeros.
fn solve_sym(a: &mut [f64], b: &mut [f64], k: usize) -> Vec<f64> {
    for col in 0..k {
        let mut pivot_row = col;
        let mut pivot_val = a[col * k + col].abs();
        for r in (col + 1)..k {
            let v = a[r * k + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val < 1e-300 {
            return vec![0.0; k];
        }
        if pivot_row != col {
            for c in 0..k {
                a.swap(pivot_row * k + c, col * k + c);
            }
            b.swap(pivot_row, col);
        }
        let inv = 1.0 / a[col * k + col];
        for r in (col + 1)..k {
            let factor = a[r * k + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for c in col..k {
                a[r * k + c] -= factor * a[col * k + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for col in (0..k).rev() {
        let mut acc = b[col];
        for c in (col + 1)..k {
            acc -= a[col * k + c] * x[c];
        }
        x[col] = acc / a[col * k + col];
    }
    x
}

/// Predicted distance in km for a (city, market) pair.
///
/// `max_value · (U_r · V_c)` clamped at 0 when both sides are known and had
/// observations; the global mean otherwise.
pub fn predict_distance(completed: &CompletedMatrix, city: u32, market: u32) -> f64 {
    let row = completed.row_index.get(&city);
    let col = completed.col_index.get(&market);
    match (row, col) {
        (Some(&r), Some(&c)) if completed.row_seen[r] && completed.col_seen[c] => {
            let raw: f64 = completed.u[r]
                .iter()
                .zip(&completed.v[c])
                .map(|(a, b)| a * b)
                .sum();
            (raw * completed.max_value).max(0.0)
        }
        _ => completed.fallback,
    }
}

const FACTORS_MAGIC: &str = "distance-factors";
const FACTORS_VERSION: u32 = 1;

/// Persists completed factors in the same line-oriented family as the
/// latent-projection file.
pub fn write_factors<W: Write>(m: &CompletedMatrix, mut w: W) -> Result<(), CompletionError> {
    writeln!(w, "{FACTORS_MAGIC} v{FACTORS_VERSION}")?;
    writeln!(
        w,
        "rank {} rows {} cols {}",
        m.rank(),
        m.row_ids.len(),
        m.col_ids.len()
    )?;
    writeln!(w, "max_value {} fallback {}", m.max_value, m.fallback)?;
    for (i, id) in m.row_ids.iter().enumerate() {
        writeln!(
            w,
            "row {id} {} {}",
            m.row_seen[i] as u8,
            join_floats(&m.u[i])
        )?;
    }
    for (j, id) in m.col_ids.iter().enumerate() {
        writeln!(
            w,
            "col {id} {} {}",
            m.col_seen[j] as u8,
            join_floats(&m.v[j])
        )?;
    }
    Ok(())
}

pub fn read_factors<R: Read>(r: R) -> Result<CompletedMatrix, CompletionError> {
    let mut lines = BufReader::new(r).lines();
    let mut next = |what: &str| -> Result<String, CompletionError> {
        lines
            .next()
            .ok_or_else(|| CompletionError::BadFile(format!("missing {what} line")))?
            .map_err(CompletionError::Io)
    };
    let magic = next("magic")?;
    if magic != format!("{FACTORS_MAGIC} v{FACTORS_VERSION}") {
        return Err(CompletionError::BadFile(format!(
            "unrecognized header `{magic}`"
        )));
    }
    let shape = next("shape")?;
    let p: Vec<&str> = shape.split_whitespace().collect();
    if p.len() != 6 || p[0] != "rank" || p[2] != "rows" || p[4] != "cols" {
        return Err(CompletionError::BadFile(format!("bad shape line `{shape}`")));
    }
    let parse_usize = |s: &str| -> Result<usize, CompletionError> {
        s.parse()
            .map_err(|_| CompletionError::BadFile(format!("bad integer `{s}`")))
    };
    let rank = parse_usize(p[1])?;
    let rows = parse_usize(p[3])?;
    let cols = parse_usize(p[5])?;

    let scale = next("scale")?;
    let p: Vec<&str> = scale.split_whitespace().collect();
    if p.len() != 4 || p[0] != "max_value" || p[2] != "fallback" {
        return Err(CompletionError::BadFile(format!("bad scale line `{scale}`")));
    }
    let parse_f64 = |s: &str| -> Result<f64, CompletionError> {
        s.parse()
            .map_err(|_| CompletionError::BadFile(format!("bad float `{s}`")))
    };
    let max_value = parse_f64(p[1])?;
    let fallback = parse_f64(p[3])?;

    let mut row_ids = Vec::with_capacity(rows);
    let mut row_seen = Vec::with_capacity(rows);
    let mut u = Vec::with_capacity(rows);
    let mut col_ids = Vec::with_capacity(cols);
    let mut col_seen = Vec::with_capacity(cols);
    let mut v = Vec::with_capacity(cols);

    for (tag, count, ids, seen, factors) in [
        ("row", rows, &mut row_ids, &mut row_seen, &mut u),
        ("col", cols, &mut col_ids, &mut col_seen, &mut v),
    ] {
        for _ in 0..count {
            let line = next(tag)?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 + rank || parts[0] != tag {
                return Err(CompletionError::BadFile(format!("bad {tag} line `{line}`")));
            }
            ids.push(
                parts[1]
                    .parse::<u32>()
                    .map_err(|_| CompletionError::BadFile(format!("bad id `{}`", parts[1])))?,
            );
            seen.push(parts[2] == "1");
            let vals: Result<Vec<f64>, _> = parts[3..].iter().map(|t| t.parse::<f64>()).collect();
            factors.push(
                vals.map_err(|_| CompletionError::BadFile(format!("bad float on {tag} line")))?,
            );
        }
    }

    Ok(CompletedMatrix {
        row_index: row_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        col_index: col_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        row_ids,
        col_ids,
        u,
        v,
        row_seen,
        col_seen,
        max_value,
        fallback,
        diagnostics: Vec::new(),
    })
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
