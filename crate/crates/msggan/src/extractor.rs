//! Feature extractors that map image batches to the embedding space in which
//! distribution metrics are computed. The default is a fixed random
//! projection of pooled pixels: cheap, deterministic, and sensitive enough to
//! separate early-training noise from data-like samples.

use std::sync::Arc;

use crate::error::Result;
use crate::registry::Registry;
use crate::rng;
use crate::tensor::{avg_pool2, upsample2_nearest, Real, Shape, Tensor};

/// Seed of the frozen projection weights; a constant so every process
/// computes identical embeddings.
const PROJECTION_SEED: u64 = 0xF1D0;
const POOL_RES: usize = 8;
const POOLED_DIM: usize = 3 * POOL_RES * POOL_RES;
const PROJECTED_DIM: usize = 64;
const CLASS_COUNT: usize = 10;

/// Maps `[n, 3, r, r]` image batches in `[-1, 1]` to embedding rows.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Width of each feature row.
    fn feature_dim(&self) -> usize;
    /// `[n, 3, r, r]` to `[n, feature_dim, 1, 1]`.
    fn features(&self, images: &Tensor<T>) -> Tensor<T>;
    /// Optional row-stochastic class posteriors `[n, classes, 1, 1]`.
    fn class_probs(&self, images: &Tensor<T>) -> Option<Tensor<T>>;
}

/// Box-average (or nearest-upsample) a square batch to exactly `POOL_RES`,
/// then flatten to `[n, POOLED_DIM]` rows in f64.
fn pooled_rows<T: Real>(images: &Tensor<T>) -> (usize, Vec<f64>) {
    let [n, c, h, w] = images.shape().0;
    assert_eq!(c, 3, "extractor expects RGB input, got {} channels", c);
    assert_eq!(h, w, "extractor expects square input, got {}x{}", h, w);
    let mut cur = images.clone();
    while cur.shape().h() > POOL_RES {
        cur = avg_pool2(&cur);
    }
    while cur.shape().h() < POOL_RES {
        cur = upsample2_nearest(&cur, 2.0);
    }
    (n, cur.data().iter().map(|&v| v.to_f64()).collect())
}

/// `rows` is `[n, in_dim]` row-major; `weights` is `[in_dim, out_dim]`
/// row-major. Returns `[n, out_dim]`.
fn project(rows: &[f64], n: usize, in_dim: usize, weights: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * out_dim];
    for i in 0..n {
        let row = &rows[i * in_dim..(i + 1) * in_dim];
        let dst = &mut out[i * out_dim..(i + 1) * out_dim];
        for (k, &x) in row.iter().enumerate() {
            let wrow = &weights[k * out_dim..(k + 1) * out_dim];
            for (d, &w) in wrow.iter().enumerate() {
                dst[d] += x * w;
            }
        }
    }
    out
}

fn frozen_weights(purpose: &str, in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut r = rng::stream(PROJECTION_SEED, purpose, 0);
    let scale = 1.0 / (in_dim as f64).sqrt();
    Tensor::<f64>::randn(Shape::nchw(1, 1, in_dim, out_dim), &mut r)
        .data()
        .iter()
        .map(|&v| v * scale)
        .collect()
}

/// Pools to 8x8, flattens, and applies a frozen Gaussian random projection;
/// class posteriors come from a second frozen projection through softmax.
pub struct RandomProjectionExtractor {
    proj: Vec<f64>,
    cls: Vec<f64>,
}

impl RandomProjectionExtractor {
    pub fn new() -> Self {
        RandomProjectionExtractor {
            proj: frozen_weights("extractor.proj", POOLED_DIM, PROJECTED_DIM),
            cls: frozen_weights("extractor.cls", POOLED_DIM, CLASS_COUNT),
        }
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> FeatureExtractor<T> for RandomProjectionExtractor {
    fn name(&self) -> &'static str {
        "fid_proxy"
    }

    fn feature_dim(&self) -> usize {
        PROJECTED_DIM
    }

    fn features(&self, images: &Tensor<T>) -> Tensor<T> {
        let (n, rows) = pooled_rows(images);
        let out = project(&rows, n, POOLED_DIM, &self.proj, PROJECTED_DIM);
        Tensor::from_vec(
            Shape::nchw(n, PROJECTED_DIM, 1, 1),
            out.into_iter().map(T::from_f64).collect(),
        )
    }

    fn class_probs(&self, images: &Tensor<T>) -> Option<Tensor<T>> {
        let (n, rows) = pooled_rows(images);
        let mut logits = project(&rows, n, POOLED_DIM, &self.cls, CLASS_COUNT);
        for row in logits.chunks_exact_mut(CLASS_COUNT) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Some(Tensor::from_vec(
            Shape::nchw(n, CLASS_COUNT, 1, 1),
            logits.into_iter().map(T::from_f64).collect(),
        ))
    }
}

/// The pooled pixels themselves, unprojected; no class posteriors.
pub struct PooledPixelExtractor;

impl<T: Real> FeatureExtractor<T> for PooledPixelExtractor {
    fn name(&self) -> &'static str {
        "pooled_pixels"
    }

    fn feature_dim(&self) -> usize {
        POOLED_DIM
    }

    fn features(&self, images: &Tensor<T>) -> Tensor<T> {
        let (n, rows) = pooled_rows(images);
        Tensor::from_vec(
            Shape::nchw(n, POOLED_DIM, 1, 1),
            rows.into_iter().map(T::from_f64).collect(),
        )
    }

    fn class_probs(&self, _images: &Tensor<T>) -> Option<Tensor<T>> {
        None
    }
}

type ExtractorFactory<T> = dyn Fn() -> Arc<dyn FeatureExtractor<T>> + Send + Sync;

/// All extractor kinds, keyed by their config names.
pub fn extractor_registry<T: Real>() -> Registry<ExtractorFactory<T>> {
    let mut r: Registry<ExtractorFactory<T>> = Registry::new("extractor");
    r.register(
        "fid_proxy",
        Arc::new(|| Arc::new(RandomProjectionExtractor::new()) as Arc<dyn FeatureExtractor<T>>),
    );
    r.register(
        "pooled_pixels",
        Arc::new(|| Arc::new(PooledPixelExtractor) as Arc<dyn FeatureExtractor<T>>),
    );
    r
}

/// Builds an extractor by kind name.
pub fn open_extractor<T: Real>(kind: &str) -> Result<Arc<dyn FeatureExtractor<T>>> {
    Ok(extractor_registry::<T>().get(kind)?())
}
