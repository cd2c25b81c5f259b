//! Dataset ingestion and the real-image multi-scale pyramid: a procedural
//! synthetic set, image folders, the standard CIFAR-10 binary archive, and a
//! deterministic single-worker batch iterator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng;
use crate::tensor::{avg_pool2, Real, Shape, Tensor};

/// `[-1, 1]` internal value to `[0, 1]` file space.
pub fn to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// `[0, 1]` file space to `[-1, 1]` internal value.
pub fn from_unit(v: f64) -> f64 {
    v * 2.0 - 1.0
}

/// 8-bit channel value to `[-1, 1]`.
pub fn from_byte(b: u8) -> f64 {
    from_unit(b as f64 / 255.0)
}

/// `[-1, 1]` back to the nearest 8-bit channel value.
pub fn to_byte(v: f64) -> u8 {
    (to_unit(v) * 255.0).round() as u8
}

/// Successive 2x2 box-average downsampling of a square batch to every
/// requested scale. The largest scale must equal the input resolution.
pub fn build_pyramid<T: Real>(
    top: &Tensor<T>,
    scales: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, Tensor<T>>> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("empty scale set".into()));
    }
    let [_, _, h, w] = top.shape().0;
    if h != w {
        return Err(Error::InvalidArgument(format!("non-square batch {}x{}", h, w)));
    }
    let top_scale = *scales.iter().next_back().unwrap();
    if h != top_scale {
        return Err(Error::InvalidArgument(format!(
            "batch resolution {} does not match the top scale {}",
            h, top_scale
        )));
    }
    let bottom = *scales.iter().next().unwrap();
    let mut out = BTreeMap::new();
    out.insert(top_scale, top.clone());
    let mut cur = top.clone();
    while cur.shape().h() > bottom {
        cur = avg_pool2(&cur);
        if scales.contains(&cur.shape().h()) {
            out.insert(cur.shape().h(), cur.clone());
        }
    }
    for &s in scales {
        if !out.contains_key(&s) {
            return Err(Error::InvalidArgument(format!(
                "scale {} is not reachable from {} by repeated halving",
                s, top_scale
            )));
        }
    }
    Ok(out)
}

/// A finite set of 3-channel square images in `[-1, 1]`.
pub trait DataSource<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn len(&self) -> usize;
    fn resolution(&self) -> usize;
    /// Image `index` as `[1, 3, r, r]`; pure in (self, index).
    fn image(&self, index: usize) -> Tensor<T>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Procedurally rendered colored primitives (one square, one disc) on a muted
/// background; every image is a pure function of (seed, index).
pub struct SyntheticSource {
    seed: u64,
    size: usize,
    resolution: usize,
}

impl SyntheticSource {
    pub fn new(seed: u64, size: usize, resolution: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidConfig("synthetic dataset size must be >= 1".into()));
        }
        if !resolution.is_power_of_two() || resolution < 4 || resolution > 128 {
            return Err(Error::InvalidConfig(format!(
                "synthetic resolution must be a power of two in [4, 128], got {}",
                resolution
            )));
        }
        Ok(SyntheticSource { seed, size, resolution })
    }
}

impl<T: Real> DataSource<T> for SyntheticSource {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn len(&self) -> usize {
        self.size
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn image(&self, index: usize) -> Tensor<T> {
        assert!(index < self.size, "index {} out of range {}", index, self.size);
        let mut r = rng::stream(self.seed, "data.synthetic", index as u64);
        let u = Uniform::new(0.0f64, 1.0);
        let bg = hsv_to_rgb(u.sample(&mut r), 0.25, 0.25 + 0.2 * u.sample(&mut r));
        let sq_color = hsv_to_rgb(u.sample(&mut r), 0.9, 0.9);
        let sq_cx = 0.2 + 0.6 * u.sample(&mut r);
        let sq_cy = 0.2 + 0.6 * u.sample(&mut r);
        let sq_half = 0.08 + 0.17 * u.sample(&mut r);
        let disc_color = hsv_to_rgb(u.sample(&mut r), 0.9, 0.9);
        let disc_cx = 0.2 + 0.6 * u.sample(&mut r);
        let disc_cy = 0.2 + 0.6 * u.sample(&mut r);
        let disc_rad = 0.08 + 0.17 * u.sample(&mut r);

        let res = self.resolution;
        let mut data = vec![T::zero(); 3 * res * res];
        for y in 0..res {
            for x in 0..res {
                let fx = (x as f64 + 0.5) / res as f64;
                let fy = (y as f64 + 0.5) / res as f64;
                let in_square =
                    (fx - sq_cx).abs() <= sq_half && (fy - sq_cy).abs() <= sq_half;
                let in_disc =
                    (fx - disc_cx).powi(2) + (fy - disc_cy).powi(2) <= disc_rad * disc_rad;
                let rgb = if in_disc {
                    disc_color
                } else if in_square {
                    sq_color
                } else {
                    bg
                };
                for (c, &v) in rgb.iter().enumerate() {
                    data[c * res * res + y * res + x] = T::from_f64(from_unit(v));
                }
            }
        }
        Tensor::from_vec(Shape::nchw(1, 3, res, res), data)
    }
}

/// A directory of PNG/JPEG files, center-cropped to square and resized.
/// Unreadable files are skipped with a warning at scan time.
pub struct ImageFolderSource<T> {
    images: Vec<Tensor<T>>,
    resolution: usize,
}

impl<T: Real> ImageFolderSource<T> {
    pub fn new(root: &Path, resolution: usize) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 4 {
            return Err(Error::InvalidConfig(format!(
                "image folder resolution must be a power of two >= 4, got {}",
                resolution
            )));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        let mut images = Vec::new();
        for p in &paths {
            match image::open(p) {
                Ok(img) => images.push(Self::prepare(img, resolution)),
                Err(e) => log::warn!("skipping unreadable image {}: {}", p.display(), e),
            }
        }
        if images.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "image folder {} contains no readable images",
                root.display()
            )));
        }
        Ok(ImageFolderSource { images, resolution })
    }

    fn prepare(img: image::DynamicImage, resolution: usize) -> Tensor<T> {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width(), rgb.height());
        let side = w.min(h);
        let x0 = (w - side) / 2;
        let y0 = (h - side) / 2;
        let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
        let resized = image::imageops::resize(
            &cropped,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        );
        let res = resolution;
        let mut data = vec![T::zero(); 3 * res * res];
        for (x, y, p) in resized.enumerate_pixels() {
            for c in 0..3 {
                data[c * res * res + y as usize * res + x as usize] =
                    T::from_f64(from_byte(p.0[c]));
            }
        }
        Tensor::from_vec(Shape::nchw(1, 3, res, res), data)
    }
}

impl<T: Real> DataSource<T> for ImageFolderSource<T> {
    fn name(&self) -> &'static str {
        "image_folder"
    }

    fn len(&self) -> usize {
        self.images.len()
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn image(&self, index: usize) -> Tensor<T> {
        self.images[index].clone()
    }
}

const CIFAR_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];
const CIFAR_RECORD: usize = 3073;
const CIFAR_RES: usize = 32;

/// The standard 6-file binary archive: records of 1 label byte plus three
/// 1024-byte planes at 32x32.
pub struct Cifar10Source {
    records: Vec<[u8; CIFAR_RECORD - 1]>,
}

impl Cifar10Source {
    pub fn new(root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for name in CIFAR_FILES {
            let path = root.join(name);
            let bytes = fs::read(&path).map_err(|e| {
                Error::InvalidConfig(format!("cannot read {}: {}", path.display(), e))
            })?;
            if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
                return Err(Error::InvalidConfig(format!(
                    "{} is {} bytes, not a multiple of the {}-byte record",
                    path.display(),
                    bytes.len(),
                    CIFAR_RECORD
                )));
            }
            for rec in bytes.chunks_exact(CIFAR_RECORD) {
                let mut planes = [0u8; CIFAR_RECORD - 1];
                planes.copy_from_slice(&rec[1..]);
                records.push(planes);
            }
        }
        Ok(Cifar10Source { records })
    }
}

impl<T: Real> DataSource<T> for Cifar10Source {
    fn name(&self) -> &'static str {
        "cifar10"
    }

    fn len(&self) -> usize {
        self.records.len()
    }

    fn resolution(&self) -> usize {
        CIFAR_RES
    }

    fn image(&self, index: usize) -> Tensor<T> {
        let planes = &self.records[index];
        let data = planes.iter().map(|&b| T::from_f64(from_byte(b))).collect();
        Tensor::from_vec(Shape::nchw(1, 3, CIFAR_RES, CIFAR_RES), data)
    }
}

/// Construction inputs shared by every source kind.
#[derive(Clone, Debug)]
pub struct SourceConfig {
    pub root: Option<PathBuf>,
    pub size: usize,
    pub resolution: usize,
    pub seed: u64,
}

type SourceFactory<T> = dyn Fn(&SourceConfig) -> Result<Arc<dyn DataSource<T>>> + Send + Sync;

fn require_root(cfg: &SourceConfig, kind: &str) -> Result<PathBuf> {
    cfg.root
        .clone()
        .ok_or_else(|| Error::InvalidConfig(format!("dataset '{}' needs dataset_root", kind)))
}

/// All dataset kinds, keyed by their config names.
pub fn source_registry<T: Real>() -> Registry<SourceFactory<T>> {
    let mut r: Registry<SourceFactory<T>> = Registry::new("dataset");
    r.register(
        "synthetic",
        Arc::new(|c: &SourceConfig| {
            Ok(Arc::new(SyntheticSource::new(c.seed, c.size, c.resolution)?)
                as Arc<dyn DataSource<T>>)
        }),
    );
    r.register(
        "image_folder",
        Arc::new(|c: &SourceConfig| {
            let root = require_root(c, "image_folder")?;
            Ok(Arc::new(ImageFolderSource::new(&root, c.resolution)?) as Arc<dyn DataSource<T>>)
        }),
    );
    r.register(
        "cifar10",
        Arc::new(|c: &SourceConfig| {
            if c.resolution != CIFAR_RES {
                return Err(Error::InvalidConfig(format!(
                    "cifar10 images are {0}x{0}; set final_resolution = {0}",
                    CIFAR_RES
                )));
            }
            let root = require_root(c, "cifar10")?;
            Ok(Arc::new(Cifar10Source::new(&root)?) as Arc<dyn DataSource<T>>)
        }),
    );
    r
}

/// Opens a dataset by kind name.
pub fn open_source<T: Real>(kind: &str, cfg: &SourceConfig) -> Result<Arc<dyn DataSource<T>>> {
    source_registry::<T>().get(kind)?(cfg)
}

/// One training batch: the full-resolution images and their pyramid, keyed by
/// the connected scales (top included).
pub struct RealBatch<T> {
    pub images: Tensor<T>,
    pub pyramid: BTreeMap<usize, Tensor<T>>,
}

/// Deterministic epoch-shuffled batches; the ragged remainder of each epoch
/// is dropped, so every batch is full-size.
pub struct BatchIterator<T: Real> {
    source: Arc<dyn DataSource<T>>,
    scales: BTreeSet<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    batch_in_epoch: u64,
    order: Vec<usize>,
}

impl<T: Real> BatchIterator<T> {
    pub fn new(
        source: Arc<dyn DataSource<T>>,
        batch_size: usize,
        seed: u64,
        scales: BTreeSet<usize>,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if source.len() < batch_size {
            return Err(Error::InvalidConfig(format!(
                "dataset holds {} images, smaller than one batch of {}",
                source.len(),
                batch_size
            )));
        }
        let top = *scales.iter().next_back().ok_or_else(|| {
            Error::InvalidConfig("batch iterator needs at least one scale".into())
        })?;
        if top != source.resolution() {
            return Err(Error::InvalidConfig(format!(
                "dataset resolution {} does not match the top scale {}",
                source.resolution(),
                top
            )));
        }
        let mut it = BatchIterator {
            source,
            scales,
            batch_size,
            seed,
            epoch: 0,
            batch_in_epoch: 0,
            order: Vec::new(),
        };
        it.reshuffle();
        Ok(it)
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.source.len() / self.batch_size) as u64
    }

    /// Zero-based index of the epoch the next batch belongs to.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Zero-based index of the next batch within its epoch.
    pub fn batch_in_epoch(&self) -> u64 {
        self.batch_in_epoch
    }

    fn reshuffle(&mut self) {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        let mut r = rng::stream(self.seed, "data.shuffle", self.epoch);
        for i in (1..order.len()).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }
        self.order = order;
    }

    /// Jumps to a checkpointed position (resume).
    pub fn set_position(&mut self, epoch: u64, batch_in_epoch: u64) {
        assert!(batch_in_epoch < self.batches_per_epoch(), "position beyond epoch");
        self.epoch = epoch;
        self.batch_in_epoch = batch_in_epoch;
        self.reshuffle();
    }

    pub fn next_batch(&mut self) -> Result<RealBatch<T>> {
        let bs = self.batch_size;
        let start = self.batch_in_epoch as usize * bs;
        let res = self.source.resolution();
        let mut data = Vec::with_capacity(bs * 3 * res * res);
        for &idx in &self.order[start..start + bs] {
            let img = self.source.image(idx);
            debug_assert_eq!(img.shape(), Shape::nchw(1, 3, res, res));
            data.extend_from_slice(img.data());
        }
        let images = Tensor::from_vec(Shape::nchw(bs, 3, res, res), data);
        let pyramid = build_pyramid(&images, &self.scales)?;
        self.batch_in_epoch += 1;
        if self.batch_in_epoch == self.batches_per_epoch() {
            self.epoch += 1;
            self.batch_in_epoch = 0;
            self.reshuffle();
        }
        Ok(RealBatch { images, pyramid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_roundtrip_is_identity() {
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }

    #[test]
    fn pyramid_of_constant_image_is_constant() {
        let top = Tensor::<f64>::filled(Shape::nchw(2, 3, 32, 32), 0.37);
        let scales: BTreeSet<usize> = [4, 8, 16, 32].into_iter().collect();
        let pyr = build_pyramid(&top, &scales).unwrap();
        assert_eq!(pyr.keys().copied().collect::<Vec<_>>(), vec![4, 8, 16, 32]);
        for (_, level) in pyr {
            assert!(level.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn checkerboard_averages_to_zero() {
        let mut data = vec![0.0f64; 3 * 8 * 8];
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    data[c * 64 + y * 8 + x] = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let top = Tensor::from_vec(Shape::nchw(1, 3, 8, 8), data);
        let scales: BTreeSet<usize> = [4, 8].into_iter().collect();
        let pyr = build_pyramid(&top, &scales).unwrap();
        assert!(pyr[&4].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_preserves_level_means() {
        let mut r = rng::stream(5, "pyr", 0);
        let top = Tensor::<f64>::randn(Shape::nchw(2, 3, 64, 64), &mut r);
        let scales: BTreeSet<usize> = [4, 8, 16, 32, 64].into_iter().collect();
        let pyr = build_pyramid(&top, &scales).unwrap();
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.data().len() as f64;
        let top_mean = mean(&pyr[&64]);
        for (_, level) in pyr {
            assert!((mean(&level) - top_mean).abs() < 1e-6);
        }
    }

    #[test]
    fn pyramid_rejects_wrong_resolution() {
        let top = Tensor::<f64>::zeros(Shape::nchw(1, 3, 16, 16));
        let scales: BTreeSet<usize> = [4, 8, 32].into_iter().collect();
        assert!(build_pyramid(&top, &scales).is_err());
    }

    #[test]
    fn synthetic_images_are_deterministic_and_in_range() {
        let a = SyntheticSource::new(9, 4, 32).unwrap();
        let b = SyntheticSource::new(9, 4, 32).unwrap();
        for i in 0..4 {
            let ia: Tensor<f64> = a.image(i);
            let ib: Tensor<f64> = b.image(i);
            assert_eq!(ia.data(), ib.data());
            assert_eq!(ia.shape(), Shape::nchw(1, 3, 32, 32));
            assert!(ia.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
        let i0: Tensor<f64> = a.image(0);
        let i1: Tensor<f64> = a.image(1);
        assert_ne!(i0.data(), i1.data(), "distinct indices must differ");
    }

    #[test]
    fn synthetic_seeds_differ_but_share_marginal_statistics() {
        let n = 1000;
        let mean_of = |seed: u64| -> f64 {
            let s = SyntheticSource::new(seed, n, 16).unwrap();
            let mut acc = 0.0;
            for i in 0..n {
                let img: Tensor<f64> = s.image(i);
                acc += img.data().iter().sum::<f64>() / img.data().len() as f64;
            }
            acc / n as f64
        };
        let m1 = mean_of(101);
        let m2 = mean_of(202);
        assert!((m1 - m2).abs() < 0.05, "means {m1} vs {m2}");
        let s1 = SyntheticSource::new(101, 1, 16).unwrap();
        let s2 = SyntheticSource::new(202, 1, 16).unwrap();
        let i1: Tensor<f64> = s1.image(0);
        let i2: Tensor<f64> = s2.image(0);
        assert_ne!(i1.data(), i2.data());
    }

    #[test]
    fn synthetic_rejects_invalid_parameters() {
        assert!(SyntheticSource::new(1, 0, 32).is_err());
        assert!(SyntheticSource::new(1, 8, 48).is_err());
        assert!(SyntheticSource::new(1, 8, 256).is_err());
    }

    #[test]
    fn iterator_yields_exact_batch_count_per_epoch() {
        let src: Arc<dyn DataSource<f32>> = Arc::new(SyntheticSource::new(3, 64, 8).unwrap());
        let scales: BTreeSet<usize> = [4, 8].into_iter().collect();
        let mut it = BatchIterator::new(src, 16, 7, scales).unwrap();
        assert_eq!(it.batches_per_epoch(), 4);
        for k in 0..4 {
            assert_eq!(it.epoch(), 0);
            assert_eq!(it.batch_in_epoch(), k);
            let b = it.next_batch().unwrap();
            assert_eq!(b.images.shape(), Shape::nchw(16, 3, 8, 8));
            assert_eq!(b.pyramid.keys().copied().collect::<Vec<_>>(), vec![4, 8]);
        }
        assert_eq!(it.epoch(), 1);
        assert_eq!(it.batch_in_epoch(), 0);
    }

    #[test]
    fn iterator_is_deterministic_and_reshuffles_across_epochs() {
        let make = || {
            let src: Arc<dyn DataSource<f32>> = Arc::new(SyntheticSource::new(3, 32, 8).unwrap());
            BatchIterator::new(src, 8, 7, [8usize].into_iter().collect()).unwrap()
        };
        let mut a = make();
        let mut b = make();
        let mut first_epoch = Vec::new();
        for _ in 0..4 {
            let ba = a.next_batch().unwrap();
            let bb = b.next_batch().unwrap();
            assert_eq!(ba.images.data(), bb.images.data());
            first_epoch.push(ba);
        }
        let second: Vec<_> = (0..4).map(|_| a.next_batch().unwrap()).collect();
        let same_order = first_epoch
            .iter()
            .zip(&second)
            .all(|(x, y)| x.images.data() == y.images.data());
        assert!(!same_order, "epoch order must be reshuffled");
    }

    #[test]
    fn iterator_resume_position_reproduces_batches() {
        let src: Arc<dyn DataSource<f32>> = Arc::new(SyntheticSource::new(3, 32, 8).unwrap());
        let scales: BTreeSet<usize> = [8usize].into_iter().collect();
        let mut a = BatchIterator::new(src.clone(), 8, 7, scales.clone()).unwrap();
        for _ in 0..6 {
            a.next_batch().unwrap();
        }
        let mut b = BatchIterator::new(src, 8, 7, scales).unwrap();
        b.set_position(1, 2);
        assert_eq!(a.next_batch().unwrap().images.data(), b.next_batch().unwrap().images.data());
    }

    #[test]
    fn image_folder_crops_skips_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        // 8x4: left 2 columns red, middle 4 green, right 2 blue; the center
        // crop keeps only the green band
        let mut img = image::RgbImage::new(8, 4);
        for (x, _, p) in img.enumerate_pixels_mut() {
            p.0 = if x < 2 {
                [255, 0, 0]
            } else if x < 6 {
                [0, 255, 0]
            } else {
                [0, 0, 255]
            };
        }
        img.save(dir.path().join("a.png")).unwrap();
        img.save(dir.path().join("b.jpg")).unwrap();
        fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();

        let src = ImageFolderSource::<f64>::new(dir.path(), 4).unwrap();
        assert_eq!(DataSource::<f64>::len(&src), 2, "the broken file is skipped");
        let t = src.image(0);
        let px = t.data();
        for i in 0..16 {
            assert!((px[i] - from_byte(0)).abs() < 1e-9, "red channel");
            assert!((px[16 + i] - from_byte(255)).abs() < 1e-9, "green channel");
            assert!((px[32 + i] - from_byte(0)).abs() < 1e-9, "blue channel");
        }

        let empty = tempfile::tempdir().unwrap();
        assert!(ImageFolderSource::<f64>::new(empty.path(), 4).is_err());
    }

    #[test]
    fn cifar_archive_parses_records_from_all_six_files() {
        let dir = tempfile::tempdir().unwrap();
        for (fi, name) in CIFAR_FILES.iter().enumerate() {
            let mut bytes = Vec::new();
            for rec in 0..3u8 {
                bytes.push(rec); // label
                let value = fi as u8 * 10 + rec;
                bytes.extend(std::iter::repeat(value).take(CIFAR_RECORD - 1));
            }
            fs::write(dir.path().join(name), &bytes).unwrap();
        }
        let src = Cifar10Source::new(dir.path()).unwrap();
        assert_eq!(DataSource::<f64>::len(&src), 18);
        assert_eq!(DataSource::<f64>::resolution(&src), 32);
        let img: Tensor<f64> = src.image(4); // file 1, record 1 => value 11
        assert!(img.data().iter().all(|&v| (v - from_byte(11)).abs() < 1e-9));

        fs::write(dir.path().join("data_batch_2.bin"), b"short").unwrap();
        assert!(Cifar10Source::new(dir.path()).is_err());
        fs::remove_file(dir.path().join("data_batch_2.bin")).unwrap();
        assert!(Cifar10Source::new(dir.path()).is_err(), "missing file is fatal");
    }

    #[test]
    fn registry_opens_by_kind_and_validates() {
        let cfg = SourceConfig { root: None, size: 16, resolution: 8, seed: 1 };
        let src = open_source::<f32>("synthetic", &cfg).unwrap();
        assert_eq!(src.len(), 16);
        assert!(open_source::<f32>("image_folder", &cfg).is_err(), "needs a root");
        assert!(open_source::<f32>("cifar10", &cfg).is_err(), "needs 32x32");
        assert!(open_source::<f32>("tfrecord", &cfg).is_err(), "unknown kind");
    }
}
