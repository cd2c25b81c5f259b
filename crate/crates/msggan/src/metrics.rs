//! Evaluation: Frechet distance between feature distributions, the
//! class-entropy score over posteriors, the per-scale epoch-to-epoch sample
//! stability curve, and sample-grid image emission.
//!
//! All computation runs in f64 regardless of the training width.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::checkpoint::EpochSnapshot;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

// ---------------------------------------------------------------------------
// Symmetric linear algebra
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric row-major `d x d` matrix by cyclic
/// Jacobi rotations. Returns (eigenvalues, eigenvectors) with eigenvector `j`
/// stored in column `j` of the returned matrix.
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), d * d, "matrix size mismatch");
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    if d <= 1 {
        return Ok((m, v));
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-14 * norm;
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            let eig = (0..d).map(|i| m[i * d + i]).collect();
            return Ok((eig, v));
        }
        for p in 0..d - 1 {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() <= tol / d as f64 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = m[k * d + p];
                    let akq = m[k * d + q];
                    m[k * d + p] = c * akp - s * akq;
                    m[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = m[p * d + k];
                    let aqk = m[q * d + k];
                    m[p * d + k] = c * apk - s * aqk;
                    m[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi eigensolver did not converge in {} sweeps for a {}x{} matrix",
        max_sweeps, d, d
    )))
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

fn symmetrize(a: &mut [f64], d: usize) {
    for i in 0..d {
        for j in (i + 1)..d {
            let m = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = m;
            a[j * d + i] = m;
        }
    }
}

/// Largest eigenvalue-relative tolerance below which a matrix is treated as
/// PSD with clamping; anything more negative is an error.
const PSD_TOL: f64 = 1e-7;

fn check_psd(eig: &[f64], what: &str) -> Result<()> {
    let max = eig.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    for &l in eig {
        if l < -PSD_TOL * max {
            return Err(Error::Numeric(format!(
                "{} has eigenvalue {:.3e}, far from positive semi-definite",
                what, l
            )));
        }
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix; slightly negative
/// eigenvalues (within tolerance) clamp to zero.
pub fn sqrtm_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (eig, v) = symmetric_eigen(a, d)?;
    check_psd(&eig, "matrix square root input")?;
    // V diag(sqrt(max(eig,0))) V^T
    let mut scaled = vec![0.0; d * d]; // column j of V times sqrt(eig_j)
    for j in 0..d {
        let s = eig[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[i * d + j] = v[i * d + j] * s;
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += scaled[i * d + k] * v[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    symmetrize(&mut out, d);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Feature statistics and the Frechet distance
// ---------------------------------------------------------------------------

/// Sample mean and unbiased covariance of a feature batch.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, symmetric.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased covariance of `[n, d, 1, 1]` feature rows; needs n >= 2.
pub fn feature_stats<T: Real>(features: &Tensor<T>) -> Result<FeatureStats> {
    let [n, d, h, w] = features.shape().0;
    if h != 1 || w != 1 {
        return Err(Error::InvalidArgument(format!(
            "features must be [n, d, 1, 1], got {:?}",
            features.shape().0
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 feature rows, got {}",
            n
        )));
    }
    let rows: Vec<f64> = features.data().iter().map(|&v| v.to_f64()).collect();
    let mut mean = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in rows.chunks_exact(d) {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    Ok(FeatureStats { mean, cov })
}

/// Trace residue more negative than this is a numeric failure; anything in
/// `(-FRECHET_CLAMP, 0)` clamps to zero.
const FRECHET_CLAMP: f64 = 1e-6;

/// Squared Frechet distance between two Gaussians summarized by their stats:
/// `|mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2})`, with the
/// cross term computed through the symmetrized product
/// `sqrt(cov_a) cov_b sqrt(cov_a)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "feature dimensions differ: {} vs {}",
            d,
            b.dim()
        )));
    }
    if a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::InvalidArgument("covariance shape mismatch".into()));
    }
    let sqrt_a = sqrtm_psd(&a.cov, d)?;
    let mut inner = matmul_sq(&matmul_sq(&sqrt_a, &b.cov, d), &sqrt_a, d);
    symmetrize(&mut inner, d);
    let (eig, _) = symmetric_eigen(&inner, d)?;
    check_psd(&eig, "symmetrized covariance product")?;
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    let mut residue = tr_a + tr_b - 2.0 * tr_sqrt;
    if residue < 0.0 {
        if residue > -FRECHET_CLAMP {
            residue = 0.0;
        } else {
            return Err(Error::Numeric(format!(
                "trace residue {:.3e} is negative beyond tolerance",
                residue
            )));
        }
    }
    let mean_sq: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(mean_sq + residue)
}

// ---------------------------------------------------------------------------
// Class-entropy score over posteriors
// ---------------------------------------------------------------------------

/// Exponentiated mean KL between per-sample class posteriors and the split
/// marginal; returns the (mean, population std) over contiguous splits.
/// `probs` is `[n, classes, 1, 1]` with row sums within 1e-5 of one.
pub fn inception_score<T: Real>(probs: &Tensor<T>, splits: usize) -> Result<(f64, f64)> {
    let [n, c, h, w] = probs.shape().0;
    if h != 1 || w != 1 {
        return Err(Error::InvalidArgument(format!(
            "posteriors must be [n, classes, 1, 1], got {:?}",
            probs.shape().0
        )));
    }
    if splits == 0 || n < splits {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot form {} splits",
            n, splits
        )));
    }
    let rows: Vec<f64> = probs.data().iter().map(|&v| v.to_f64()).collect();
    for (i, row) in rows.chunks_exact(c).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "posterior row {} sums to {}, not 1",
                i, sum
            )));
        }
        if row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "posterior row {} has a negative entry",
                i
            )));
        }
    }
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * n / splits;
        let hi = (s + 1) * n / splits;
        let part = &rows[lo * c..hi * c];
        let count = hi - lo;
        let mut marginal = vec![0.0; c];
        for row in part.chunks_exact(c) {
            for (m, &p) in marginal.iter_mut().zip(row) {
                *m += p;
            }
        }
        for m in &mut marginal {
            *m /= count as f64;
        }
        let mut mean_kl = 0.0;
        for row in part.chunks_exact(c) {
            let mut kl = 0.0;
            for (&p, &m) in row.iter().zip(&marginal) {
                if p > 0.0 {
                    kl += p * (p.ln() - m.ln());
                }
            }
            mean_kl += kl;
        }
        mean_kl /= count as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// Epoch-to-epoch sample stability
// ---------------------------------------------------------------------------

/// One consecutive-epoch comparison at one scale. `epoch` is the later epoch
/// of the pair; `mse` is measured in [0, 1] pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub epoch: u64,
    pub scale: usize,
    pub mse: f64,
}

/// Per-scale MSE between fixed-latent samples at consecutive epochs.
#[derive(Clone, Debug, Default)]
pub struct StabilityCurve {
    pub rows: Vec<StabilityRow>,
}

impl StabilityCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,scale,mse\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.scale, r.mse));
        }
        out
    }

    pub fn scales(&self) -> BTreeSet<usize> {
        self.rows.iter().map(|r| r.scale).collect()
    }

    /// The (epoch, mse) series for one scale, in epoch order.
    pub fn series(&self, scale: usize) -> Vec<(u64, f64)> {
        self.rows.iter().filter(|r| r.scale == scale).map(|r| (r.epoch, r.mse)).collect()
    }
}

/// MSE between consecutive snapshots of the same fixed latents, per scale,
/// computed in [0, 1] pixel space (values clamped like rendered output).
pub fn stability_curve(snapshots: &[EpochSnapshot]) -> Result<StabilityCurve> {
    if snapshots.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need ≥ 2 epochs of fixed-latent snapshots, got {}",
            snapshots.len()
        )));
    }
    let fp = snapshots[0].latents_fingerprint;
    let scales: Vec<usize> = snapshots[0].images.keys().copied().collect();
    for s in snapshots {
        if s.latents_fingerprint != fp {
            return Err(Error::InvalidArgument(
                "snapshots were taken with different latent sets".into(),
            ));
        }
        let these: Vec<usize> = s.images.keys().copied().collect();
        if these != scales {
            return Err(Error::InvalidArgument(format!(
                "snapshot at epoch {} covers scales {:?}, expected {:?}",
                s.epoch, these, scales
            )));
        }
    }
    let mut ordered: Vec<&EpochSnapshot> = snapshots.iter().collect();
    ordered.sort_by_key(|s| s.epoch);
    for pair in ordered.windows(2) {
        if pair[0].epoch == pair[1].epoch {
            return Err(Error::InvalidArgument(format!(
                "duplicate snapshot for epoch {}",
                pair[0].epoch
            )));
        }
    }
    let to01 = |v: f32| ((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0);
    let mut rows = Vec::new();
    for pair in ordered.windows(2) {
        for &scale in &scales {
            let a = &pair[0].images[&scale];
            let b = &pair[1].images[&scale];
            if a.shape() != b.shape() {
                return Err(Error::InvalidArgument(format!(
                    "snapshot shapes differ at scale {}",
                    scale
                )));
            }
            let mse = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    let d = to01(x) - to01(y);
                    d * d
                })
                .sum::<f64>()
                / a.data().len() as f64;
            rows.push(StabilityRow { epoch: pair[1].epoch, scale, mse });
        }
    }
    Ok(StabilityCurve { rows })
}

// ---------------------------------------------------------------------------
// Sample grids
// ---------------------------------------------------------------------------

fn pixel_byte<T: Real>(v: T) -> u8 {
    (((v.to_f64() + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blit_nearest<T: Real>(
    img: &mut image::RgbImage,
    src: &Tensor<T>,
    item: usize,
    x0: usize,
    y0: usize,
    cell: usize,
) {
    let r = src.shape().h();
    let data = src.data();
    let plane = r * r;
    let base = item * 3 * plane;
    for dy in 0..cell {
        let sy = dy * r / cell;
        for dx in 0..cell {
            let sx = dx * r / cell;
            let p = [
                pixel_byte(data[base + sy * r + sx]),
                pixel_byte(data[base + plane + sy * r + sx]),
                pixel_byte(data[base + 2 * plane + sy * r + sx]),
            ];
            img.put_pixel((x0 + dx) as u32, (y0 + dy) as u32, image::Rgb(p));
        }
    }
}

/// One row per batch item, one column per scale (coarsest leftmost), every
/// cell nearest-upscaled to the finest resolution.
pub fn render_scale_grid<T: Real>(pyramid: &BTreeMap<usize, Tensor<T>>) -> Result<image::RgbImage> {
    if pyramid.is_empty() {
        return Err(Error::InvalidArgument("empty image pyramid".into()));
    }
    let final_res = *pyramid.keys().next_back().unwrap();
    let n = pyramid[&final_res].shape().n();
    for (&scale, t) in pyramid {
        let [tn, c, h, w] = t.shape().0;
        if tn != n || c != 3 || h != scale || w != scale {
            return Err(Error::InvalidArgument(format!(
                "pyramid level {} has shape {:?}, expected [{}, 3, {}, {}]",
                scale,
                t.shape().0,
                n,
                scale,
                scale
            )));
        }
    }
    let cols = pyramid.len();
    let mut img = image::RgbImage::new((cols * final_res) as u32, (n * final_res) as u32);
    for row in 0..n {
        for (col, (_, t)) in pyramid.iter().enumerate() {
            blit_nearest(&mut img, t, row, col * final_res, row * final_res, final_res);
        }
    }
    Ok(img)
}

/// A near-square grid of the finest-scale images only.
pub fn render_top_grid<T: Real>(top: &Tensor<T>) -> Result<image::RgbImage> {
    let [n, c, h, w] = top.shape().0;
    if c != 3 || h != w || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "top grid needs [n, 3, r, r] images, got {:?}",
            top.shape().0
        )));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut img = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..n {
        blit_nearest(&mut img, top, i, (i % cols) * w, (i / cols) * h, h);
    }
    Ok(img)
}

/// Writes a rendered grid as a PNG file.
pub fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", path.display(), e))))
}
