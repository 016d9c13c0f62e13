//! Principal-component reduction of the destination latent vectors.
//!
//! Fitting mean-centers the data (no variance scaling), eigendecomposes the
//! sample covariance (1/(n−1) normalization) with a cyclic Jacobi solver,
//! and keeps the top-k components by descending eigenvalue. Component signs
//! are fixed so each component's largest-magnitude coordinate is positive,
//! which keeps fixtures stable across runs.

use std::io::{BufRead, BufReader, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("component count {k} outside [1,{dim}]")]
    BadComponentCount { k: usize, dim: usize },
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("input rows must all have dimension {expected}, row {row} has {got}")]
    RaggedInput { row: usize, expected: usize, got: usize },
    #[error("expected input of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("projection file: {0}")]
    BadFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A fitted mean + orthonormal component basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentProjection {
    mean: Vec<f64>,
    /// k rows, each of length `dim`, pairwise orthonormal.
    components: Vec<Vec<f64>>,
    /// Per-component share of total variance, non-increasing.
    explained: Vec<f64>,
    /// All eigenvalues of the covariance, descending. Kept for the
    /// reconstruction-error curve.
    eigenvalues: Vec<f64>,
    rows: usize,
}

impl LatentProjection {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained(&self) -> &[f64] {
        &self.explained
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

/// Fits the top-k principal components of mean-centered data.
///
/// Deterministic: the eigenbasis is ordered by descending eigenvalue and
/// sign-fixed, so repeated fits on the same data are identical.
pub fn fit_pca(rows: &[Vec<f64>], k: usize) -> Result<LatentProjection, PcaError> {
    let n = rows.len();
    if n < 2 {
        return Err(PcaError::TooFewRows { need: 2, got: n });
    }
    let dim = rows[0].len();
    if k < 1 || k > dim {
        return Err(PcaError::BadComponentCount { k, dim });
    }
    if n < k {
        return Err(PcaError::TooFewRows { need: k, got: n });
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(PcaError::RaggedInput {
                row: i,
                expected: dim,
                got: r.len(),
            });
        }
    }

    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Sample covariance, 1/(n-1).
    let mut cov = vec![vec![0.0; dim]; dim];
    let mut centered = vec![0.0; dim];
    for r in rows {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i];
            for j in i..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] *= norm;
            cov[j][i] = cov[i][j];
        }
    }

    let (mut eigenvalues, vectors) = jacobi_eigen(&cov);
    // Numerical noise can leave tiny negative eigenvalues on rank-deficient
    // inputs; the covariance is PSD by construction.
    for ev in &mut eigenvalues {
        if *ev < 0.0 && *ev > -1e-12 {
            *ev = 0.0;
        }
    }

    let total: f64 = eigenvalues.iter().sum();
    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for (ev, mut vec) in eigenvalues.iter().zip(vectors).take(k) {
        fix_sign(&mut vec);
        components.push(vec);
        explained.push(if total > 0.0 { ev / total } else { 0.0 });
    }

    Ok(LatentProjection {
        mean,
        components,
        explained,
        eigenvalues,
        rows: n,
    })
}

fn fix_sign(v: &mut [f64]) {
    let mut max_abs = 0.0;
    let mut max_val = 0.0;
    for &x in v.iter() {
        if x.abs() > max_abs {
            max_abs = x.abs();
            max_val = x;
        }
    }
    if max_val < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Projects a vector: `components · (x − mean)`.
pub fn transform(projection: &LatentProjection, x: &[f64]) -> Result<Vec<f64>, PcaError> {
    if x.len() != projection.dim() {
        return Err(PcaError::DimensionMismatch {
            expected: projection.dim(),
            got: x.len(),
        });
    }
    let centered: Vec<f64> = x.iter().zip(&projection.mean).map(|(v, m)| v - m).collect();
    Ok(projection
        .components
        .iter()
        .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
        .collect())
}

/// Maps a projected vector back to the input space: `mean + zᵀ·components`.
pub fn reconstruct(projection: &LatentProjection, z: &[f64]) -> Result<Vec<f64>, PcaError> {
    if z.len() != projection.k() {
        return Err(PcaError::DimensionMismatch {
            expected: projection.k(),
            got: z.len(),
        });
    }
    let mut out = projection.mean.clone();
    for (zi, comp) in z.iter().zip(&projection.components) {
        for (o, c) in out.iter_mut().zip(comp) {
            *o += zi * c;
        }
    }
    Ok(out)
}

/// Mean squared reconstruction error (per-row squared L2 norm, averaged over
/// rows) for each k in `1..=k_max`. Non-increasing in k.
///
/// Uses the eigenvalue tail identity for PCA rather than reconstructing each
/// row: the sum of squared residuals equals (n−1) times the unused
/// eigenvalue mass.
pub fn reconstruction_error_curve(
    rows: &[Vec<f64>],
    k_max: usize,
) -> Result<Vec<(usize, f64)>, PcaError> {
    let projection = fit_pca(rows, k_max)?;
    let n = projection.rows as f64;
    let evs = &projection.eigenvalues;
    let mut curve = Vec::with_capacity(k_max);
    let mut tail: f64 = evs.iter().sum();
    for (k, ev) in evs.iter().take(k_max).enumerate() {
        tail -= ev;
        let mse = ((n - 1.0) / n) * tail.max(0.0);
        curve.push((k + 1, mse));
    }
    Ok(curve)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue;
/// eigenvectors are rows of the returned list.
fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }

    let scale: f64 = matrix
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = a[p][p];
                let aqq = a[q][q];
                let theta = (aqq - app) / (2.0 * apq);
                // smaller-magnitude root for stability
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

const PROJECTION_MAGIC: &str = "latent-projection";
const PROJECTION_VERSION: u32 = 1;

/// Persists a projection as a small line-oriented text file.
///
/// Layout: magic+version line, `k`/`dim`/`rows` line, `mean` line,
/// k `component` lines (row-major), `explained` line, `eigenvalues` line.
pub fn write_projection<W: Write>(p: &LatentProjection, mut w: W) -> Result<(), PcaError> {
    writeln!(w, "{PROJECTION_MAGIC} v{PROJECTION_VERSION}")?;
    writeln!(w, "k {} dim {} rows {}", p.k(), p.dim(), p.rows)?;
    writeln!(w, "mean {}", join_floats(&p.mean))?;
    for c in &p.components {
        writeln!(w, "component {}", join_floats(c))?;
    }
    writeln!(w, "explained {}", join_floats(&p.explained))?;
    writeln!(w, "eigenvalues {}", join_floats(&p.eigenvalues))?;
    Ok(())
}

pub fn read_projection<R: Read>(r: R) -> Result<LatentProjection, PcaError> {
    let mut lines = BufReader::new(r).lines();
    let mut next = |what: &str| -> Result<String, PcaError> {
        lines
            .next()
            .ok_or_else(|| PcaError::BadFile(format!("missing {what} line")))?
            .map_err(PcaError::Io)
    };

    let magic = next("magic")?;
    if magic != format!("{PROJECTION_MAGIC} v{PROJECTION_VERSION}") {
        return Err(PcaError::BadFile(format!("unrecognized header `{magic}`")));
    }
    let shape = next("shape")?;
    let parts: Vec<&str> = shape.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "k" || parts[2] != "dim" || parts[4] != "rows" {
        return Err(PcaError::BadFile(format!("bad shape line `{shape}`")));
    }
    let k: usize = parts[1]
        .parse()
        .map_err(|_| PcaError::BadFile("bad k".into()))?;
    let dim: usize = parts[3]
        .parse()
        .map_err(|_| PcaError::BadFile("bad dim".into()))?;
    let rows: usize = parts[5]
        .parse()
        .map_err(|_| PcaError::BadFile("bad rows".into()))?;

    let mean = parse_floats_line(&next("mean")?, "mean", dim)?;
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        components.push(parse_floats_line(&next("component")?, "component", dim)?);
    }
    let explained = parse_floats_line(&next("explained")?, "explained", k)?;
    let eigenvalues = parse_floats_line(&next("eigenvalues")?, "eigenvalues", dim)?;

    Ok(LatentProjection {
        mean,
        components,
        explained,
        eigenvalues,
        rows,
    })
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_floats_line(line: &str, tag: &str, expected: usize) -> Result<Vec<f64>, PcaError> {
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| PcaError::BadFile(format!("expected `{tag}` line, got `{line}`")))?;
    let vals: Result<Vec<f64>, _> = rest.split_whitespace().map(|t| t.parse::<f64>()).collect();
    let vals = vals.map_err(|_| PcaError::BadFile(format!("bad float on `{tag}` line")))?;
    if vals.len() != expected {
        return Err(PcaError::BadFile(format!(
            "`{tag}` line has {} values, expected {expected}",
            vals.len()
        )));
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect()
    }

    fn planted_rank(rng: &mut ChaCha8Rng, n: usize, dim: usize, rank: usize) -> Vec<Vec<f64>> {
        let basis = random_rows(rng, rank, dim);
        (0..n)
            .map(|_| {
                let mut row = vec![0.0; dim];
                for b in &basis {
                    let w = rng.random::<f64>() * 2.0 - 1.0;
                    for (r, x) in row.iter_mut().zip(b) {
                        *r += w * x;
                    }
                }
                row
            })
            .collect()
    }

    fn mse_direct(p: &LatentProjection, rows: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for r in rows {
            let z = transform(p, r).unwrap();
            let back = reconstruct(p, &z).unwrap();
            total += r
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total / rows.len() as f64
    }

    #[test]
    fn single_axis_data_is_one_component() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, 2.0 * i as f64, -i as f64])
            .collect();
        let p = fit_pca(&rows, 1).unwrap();
        assert!((p.explained()[0] - 1.0).abs() < 1e-12);
        assert!(mse_direct(&p, &rows) < 1e-18);
    }

    #[test]
    fn full_basis_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = random_rows(&mut rng, 30, 8);
        let p = fit_pca(&rows, 8).unwrap();
        assert!(mse_direct(&p, &rows) < 1e-18);
    }

    #[test]
    fn eigenvalues_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 25;
        let rows = random_rows(&mut rng, 120, dim);
        let p = fit_pca(&rows, dim).unwrap();

        // independent oracle: dense symmetric eigensolver on the covariance
        let n = rows.len();
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut cov = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for r in &rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += c[i] * c[j] / (n as f64 - 1.0);
                }
            }
        }
        let mut oracle: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());

        for (mine, theirs) in p.eigenvalues().iter().zip(&oracle) {
            assert!(
                (mine - theirs).abs() < 1e-8,
                "eigenvalue mismatch: {mine} vs {theirs}"
            );
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = random_rows(&mut rng, 60, 12);
        let p = fit_pca(&rows, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = p.components()[i]
                    .iter()
                    .zip(&p.components()[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-8, "({i},{j}): {dot}");
            }
        }
    }

    #[test]
    fn total_variance_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 15;
        let rows = random_rows(&mut rng, 80, dim);
        let p = fit_pca(&rows, dim).unwrap();

        let n = rows.len();
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut trace = 0.0;
        for j in 0..dim {
            let var: f64 = rows
                .iter()
                .map(|r| (r[j] - mean[j]) * (r[j] - mean[j]))
                .sum::<f64>()
                / (n as f64 - 1.0);
            trace += var;
        }
        let total: f64 = p.eigenvalues().iter().sum();
        assert!((total - trace).abs() / trace < 1e-6);
    }

    #[test]
    fn transform_of_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = random_rows(&mut rng, 40, 10);
        let p = fit_pca(&rows, 4).unwrap();
        let z = transform(&p, p.mean()).unwrap();
        for v in z {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn transform_of_mean_plus_component_is_unit_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = random_rows(&mut rng, 40, 10);
        let p = fit_pca(&rows, 4).unwrap();
        let x: Vec<f64> = p
            .mean()
            .iter()
            .zip(&p.components()[0])
            .map(|(m, c)| m + c)
            .collect();
        let z = transform(&p, &x).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-9);
        for v in &z[1..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn k_projection_beats_smaller_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let rows = random_rows(&mut rng, 50, 9);
        let mut prev = f64::INFINITY;
        for k in 1..=9 {
            let p = fit_pca(&rows, k).unwrap();
            let err = mse_direct(&p, &rows);
            assert!(err <= prev + 1e-12, "k={k}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn curve_matches_direct_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rows = random_rows(&mut rng, 35, 7);
        let curve = reconstruction_error_curve(&rows, 7).unwrap();
        for &(k, mse) in &curve {
            let p = fit_pca(&rows, k).unwrap();
            let direct = mse_direct(&p, &rows);
            assert!(
                (mse - direct).abs() < 1e-9 * (1.0 + direct),
                "k={k}: curve {mse} vs direct {direct}"
            );
        }
        assert!((curve.last().unwrap().1).abs() < 1e-9);
    }

    #[test]
    fn planted_rank5_flattens_at_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let rows = planted_rank(&mut rng, 100, 30, 5);
        let curve = reconstruction_error_curve(&rows, 10).unwrap();
        for &(k, mse) in &curve {
            if k >= 5 {
                assert!(mse < 1e-9, "k={k}: {mse}");
            } else {
                assert!(mse > 1e-6, "k={k} should not be flat yet: {mse}");
            }
        }
    }

    #[test]
    fn parameter_errors() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 4]).collect();
        assert!(matches!(
            fit_pca(&rows, 0),
            Err(PcaError::BadComponentCount { .. })
        ));
        assert!(matches!(
            fit_pca(&rows, 5),
            Err(PcaError::BadComponentCount { .. })
        ));
        assert!(matches!(
            fit_pca(&rows[..1], 1),
            Err(PcaError::TooFewRows { .. })
        ));
        let tall: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64; 8]).collect();
        assert!(matches!(
            fit_pca(&tall, 4),
            Err(PcaError::TooFewRows { need: 4, got: 3 })
        ));

        let p = fit_pca(&rows, 2).unwrap();
        assert!(matches!(
            transform(&p, &[1.0, 2.0]),
            Err(PcaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn projection_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let rows = random_rows(&mut rng, 25, 6);
        let p = fit_pca(&rows, 3).unwrap();
        let mut buf = Vec::new();
        write_projection(&p, &mut buf).unwrap();
        let back = read_projection(buf.as_slice()).unwrap();
        assert_eq!(p, back);
    }
}
