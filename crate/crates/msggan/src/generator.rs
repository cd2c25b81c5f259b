//! Multi-scale generator: a latent projection block at 4x4, then
//! upsample-and-convolve blocks, with a 1x1 to-RGB head at every block.
//! Channel RMS normalization follows every convolution; the heads stay
//! linear.

use std::collections::BTreeMap;

use rand::Rng;

use crate::arch_spec::{ArchitectureSpec, RGB_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamDef};
use crate::tensor::{Real, Shape, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-8;

/// Named activation volumes in forward order, recorded by the traced
/// forward passes so shape conformance can be checked stage by stage.
pub type ActivationTrace = Vec<(String, Shape)>;

pub(crate) fn record<T: Real>(
    trace: &mut Option<ActivationTrace>,
    g: &Graph<T>,
    name: String,
    v: Var,
) {
    if let Some(t) = trace.as_mut() {
        t.push((name, g.shape(v)));
    }
}

/// Standard-normal latents normalized to the hypersphere: each row is scaled
/// to unit channel RMS (L2 norm `sqrt(latent_dim)`).
pub fn sample_latent<T: Real, R: Rng>(batch: usize, latent_dim: usize, rng: &mut R) -> Result<Tensor<T>> {
    if batch < 1 {
        return Err(Error::InvalidArgument("latent batch size must be >= 1".into()));
    }
    let raw = Tensor::<T>::randn(Shape::nchw(batch, latent_dim, 1, 1), rng);
    Ok(normalize_latent(&raw))
}

/// `z / sqrt(mean(z^2) + eps)` per row.
pub fn normalize_latent<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let [n, d, _, _] = z.shape().0;
    let eps = T::from_f64(NORM_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut out = z.clone();
    for b in 0..n {
        let row = &mut out.data_mut()[b * d..(b + 1) * d];
        let ms = row.iter().map(|&x| x * x).sum::<T>() * inv_d;
        let r = (ms + eps).sqrt().recip();
        for v in row.iter_mut() {
            *v *= r;
        }
    }
    out
}

/// Canonical parameter definitions, in checkpoint order.
pub fn param_defs(spec: &ArchitectureSpec) -> Vec<ParamDef> {
    let mut defs = Vec::new();
    for (i, b) in spec.gen_blocks.iter().enumerate() {
        let r = b.resolution;
        if i == 0 {
            // transposed 4x4 projection from the latent; each output pixel
            // sees one kernel tap per latent channel
            defs.push(ParamDef::weight(
                format!("gen.b{r}.proj.weight"),
                Shape::nchw(b.in_channels, b.out_channels, 4, 4),
                b.in_channels,
            ));
            defs.push(ParamDef::bias(format!("gen.b{r}.proj.bias"), b.out_channels));
        } else {
            defs.push(ParamDef::weight(
                format!("gen.b{r}.conv1.weight"),
                Shape::nchw(b.out_channels, b.in_channels, 3, 3),
                b.in_channels * 9,
            ));
            defs.push(ParamDef::bias(format!("gen.b{r}.conv1.bias"), b.out_channels));
        }
        defs.push(ParamDef::weight(
            format!("gen.b{r}.conv2.weight"),
            Shape::nchw(b.out_channels, b.out_channels, 3, 3),
            b.out_channels * 9,
        ));
        defs.push(ParamDef::bias(format!("gen.b{r}.conv2.bias"), b.out_channels));
        defs.push(ParamDef::weight(
            format!("gen.rgb{r}.weight"),
            Shape::nchw(RGB_CHANNELS, b.out_channels, 1, 1),
            b.out_channels,
        ));
        defs.push(ParamDef::bias(format!("gen.rgb{r}.bias"), RGB_CHANNELS));
    }
    defs
}

/// Builds the forward graph; returns one image var per schedule resolution.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    params: &BoundParams,
    z: Var,
) -> Result<BTreeMap<usize, Var>> {
    forward_inner(g, spec, params, z, &mut None)
}

/// Like [`forward`], additionally recording every named activation volume.
pub fn forward_traced<T: Real>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    params: &BoundParams,
    z: Var,
) -> Result<(BTreeMap<usize, Var>, ActivationTrace)> {
    let mut trace = Some(ActivationTrace::new());
    let images = forward_inner(g, spec, params, z, &mut trace)?;
    Ok((images, trace.unwrap()))
}

fn forward_inner<T: Real>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    params: &BoundParams,
    z: Var,
    trace: &mut Option<ActivationTrace>,
) -> Result<BTreeMap<usize, Var>> {
    let zs = g.shape(z);
    if zs.c() != spec.latent_dim || zs.h() != 1 || zs.w() != 1 {
        return Err(Error::InvalidArgument(format!(
            "latent batch must be n x {} x 1 x 1, got {}",
            spec.latent_dim, zs
        )));
    }
    record(trace, g, "z".into(), z);

    let mut images = BTreeMap::new();
    let mut x = z;
    for (i, b) in spec.gen_blocks.iter().enumerate() {
        let r = b.resolution;
        if i == 0 {
            let w = params.get(&format!("gen.b{r}.proj.weight"));
            let bias = params.get(&format!("gen.b{r}.proj.bias"));
            x = g.conv2d_transpose(x, w, 0);
            let bb = g.broadcast_to(bias, g.shape(x));
            x = g.add(x, bb);
            x = g.lrelu(x, LRELU_SLOPE);
            x = g.pixel_norm(x, NORM_EPS);
            record(trace, g, format!("b{r}.proj"), x);
        } else {
            x = g.upsample2(x);
            record(trace, g, format!("b{r}.upsample"), x);
            let w = params.get(&format!("gen.b{r}.conv1.weight"));
            let bias = params.get(&format!("gen.b{r}.conv1.bias"));
            x = g.conv2d(x, w, Some(bias), 1, Some(LRELU_SLOPE));
            x = g.pixel_norm(x, NORM_EPS);
            record(trace, g, format!("b{r}.conv1"), x);
        }
        let w2 = params.get(&format!("gen.b{r}.conv2.weight"));
        let b2 = params.get(&format!("gen.b{r}.conv2.bias"));
        x = g.conv2d(x, w2, Some(b2), 1, Some(LRELU_SLOPE));
        x = g.pixel_norm(x, NORM_EPS);
        record(trace, g, format!("b{r}.conv2"), x);

        let wr = params.get(&format!("gen.rgb{r}.weight"));
        let br = params.get(&format!("gen.rgb{r}.bias"));
        let rgb = g.conv2d(x, wr, Some(br), 0, None);
        record(trace, g, format!("rgb{r}"), rgb);
        images.insert(r, rgb);
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_spec::{CombineKind, ConnectionMode, LossKind};
    use crate::params::ParamSet;
    use crate::rng;

    fn small_spec() -> ArchitectureSpec {
        ArchitectureSpec::resolve(32, 16, 32, CombineKind::Simple, ConnectionMode::All, LossKind::WganGp)
            .unwrap()
    }

    #[test]
    fn hypersphere_normalization_fixed_points() {
        let ones = Tensor::<f64>::filled(Shape::nchw(1, 512, 1, 1), 1.0);
        let n = normalize_latent(&ones);
        for &v in n.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let twos = Tensor::<f64>::filled(Shape::nchw(1, 512, 1, 1), 2.0);
        let n = normalize_latent(&twos);
        for &v in n.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sampled_latents_live_on_the_hypersphere() {
        let z = sample_latent::<f64, _>(8, 512, &mut rng::stream(1, "z", 0)).unwrap();
        for b in 0..8 {
            let row = &z.data()[b * 512..(b + 1) * 512];
            let l2 = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
            assert!((l2 - (512.0f64).sqrt()).abs() < 1e-3, "row {} norm {}", b, l2);
        }
        assert!(sample_latent::<f64, _>(0, 512, &mut rng::stream(1, "z", 0)).is_err());
    }

    #[test]
    fn forward_emits_every_scale_with_rgb_shapes() {
        let spec = small_spec();
        let set = ParamSet::<f32>::init(param_defs(&spec), true, &mut rng::stream(2, "init.gen", 0));
        let mut g = Graph::new();
        let bound = set.bind(&mut g);
        let z = sample_latent(2, spec.latent_dim, &mut rng::stream(2, "z", 0)).unwrap();
        let zv = g.leaf(z);
        let images = forward(&mut g, &spec, &bound, zv).unwrap();
        assert_eq!(images.keys().copied().collect::<Vec<_>>(), vec![4, 8, 16, 32]);
        for (&r, &v) in &images {
            assert_eq!(g.shape(v), Shape::nchw(2, 3, r, r));
        }
    }

    #[test]
    fn identical_latent_rows_give_identical_images() {
        let spec = small_spec();
        let set = ParamSet::<f32>::init(param_defs(&spec), true, &mut rng::stream(3, "init.gen", 0));
        let mut g = Graph::new();
        let bound = set.bind(&mut g);
        let one = sample_latent::<f32, _>(1, spec.latent_dim, &mut rng::stream(3, "z", 0)).unwrap();
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let zv = g.leaf(Tensor::from_vec(Shape::nchw(2, spec.latent_dim, 1, 1), data));
        let images = forward(&mut g, &spec, &bound, zv).unwrap();
        for (&r, &v) in &images {
            let img = g.value(v);
            let half = img.shape().numel() / 2;
            assert_eq!(&img.data()[..half], &img.data()[half..], "scale {}", r);
        }
    }

    #[test]
    fn wrong_latent_width_is_rejected() {
        let spec = small_spec();
        let set = ParamSet::<f32>::init(param_defs(&spec), true, &mut rng::stream(4, "init.gen", 0));
        let mut g = Graph::new();
        let bound = set.bind(&mut g);
        let zv = g.leaf(Tensor::zeros(Shape::nchw(2, 8, 1, 1)));
        assert!(matches!(forward(&mut g, &spec, &bound, zv), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn same_seed_reproduces_outputs_bitwise() {
        let spec = small_spec();
        let run = || -> Vec<f32> {
            let set = ParamSet::<f32>::init(param_defs(&spec), true, &mut rng::stream(9, "init.gen", 0));
            let mut g = Graph::new();
            let bound = set.bind(&mut g);
            let z = sample_latent(2, spec.latent_dim, &mut rng::stream(9, "z", 0)).unwrap();
            let zv = g.leaf(z);
            let images = forward(&mut g, &spec, &bound, zv).unwrap();
            g.value(images[&32]).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
