//! Single discriminator over the full multi-scale image set: from-RGB at the
//! top resolution, a combine merge plus batch-statistic channel at every
//! block, two convolutions, average-pool downsampling, and a linear critic
//! head at 4x4.

use std::collections::BTreeMap;

use crate::arch_spec::{ArchitectureSpec, RGB_CHANNELS};
use crate::combine::Combine;
use crate::error::{Error, Result};
use crate::generator::{record, ActivationTrace, LRELU_SLOPE, NORM_EPS};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamDef};
use crate::tensor::{Real, Shape};

/// Canonical parameter definitions, in checkpoint order.
pub fn param_defs<T: Real>(spec: &ArchitectureSpec, combine: &dyn Combine<T>) -> Vec<ParamDef> {
    let mut defs = Vec::new();
    let top = spec.from_rgb_channels();
    defs.push(ParamDef::weight(
        "disc.from_rgb.weight",
        Shape::nchw(top, RGB_CHANNELS, 1, 1),
        RGB_CHANNELS,
    ));
    defs.push(ParamDef::bias("disc.from_rgb.bias", top));

    let last = spec.disc_blocks.len() - 1;
    for (i, b) in spec.disc_blocks.iter().enumerate() {
        let r = b.resolution;
        if b.connected {
            defs.extend(combine.param_defs(&format!("disc.b{r}.combine"), b.straight_in));
        }
        defs.push(ParamDef::weight(
            format!("disc.b{r}.conv1.weight"),
            Shape::nchw(b.conv1_out, b.conv1_in, 3, 3),
            b.conv1_in * 9,
        ));
        defs.push(ParamDef::bias(format!("disc.b{r}.conv1.bias"), b.conv1_out));
        let k = if i == last { 4 } else { 3 };
        defs.push(ParamDef::weight(
            format!("disc.b{r}.conv2.weight"),
            Shape::nchw(b.conv2_out, b.conv1_out, k, k),
            b.conv1_out * k * k,
        ));
        defs.push(ParamDef::bias(format!("disc.b{r}.conv2.bias"), b.conv2_out));
    }

    let critic_in = spec.disc_blocks[last].conv2_out;
    defs.push(ParamDef::weight("disc.critic.weight", Shape::nchw(critic_in, 1, 1, 1), critic_in));
    defs.push(ParamDef::bias("disc.critic.bias", 1));
    defs
}

/// Builds the forward graph over one multi-scale image set and returns the
/// per-sample critic scores, shape `[batch, 1, 1, 1]`.
///
/// `images` must hold exactly the spec's connected resolutions (the top one
/// included).
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    combine: &dyn Combine<T>,
    params: &BoundParams,
    images: &BTreeMap<usize, Var>,
) -> Result<Var> {
    forward_inner(g, spec, combine, params, images, &mut None)
}

/// Like [`forward`], additionally recording every named activation volume.
pub fn forward_traced<T: Real>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    combine: &dyn Combine<T>,
    params: &BoundParams,
    images: &BTreeMap<usize, Var>,
) -> Result<(Var, ActivationTrace)> {
    let mut trace = Some(ActivationTrace::new());
    let score = forward_inner(g, spec, combine, params, images, &mut trace)?;
    Ok((score, trace.unwrap()))
}

fn forward_inner<T: Real>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    combine: &dyn Combine<T>,
    params: &BoundParams,
    images: &BTreeMap<usize, Var>,
    trace: &mut Option<ActivationTrace>,
) -> Result<Var> {
    let expected = &spec.connection_mask;
    let got: Vec<usize> = images.keys().copied().collect();
    if got != expected.iter().copied().collect::<Vec<_>>() {
        return Err(Error::InvalidArgument(format!(
            "image set resolutions {:?} do not match the connected set {:?}",
            got, expected
        )));
    }
    let top_var = images[&spec.final_resolution];
    let batch = g.shape(top_var).n();
    for (&r, &v) in images {
        let s = g.shape(v);
        if s != Shape::nchw(batch, RGB_CHANNELS, r, r) {
            return Err(Error::InvalidArgument(format!(
                "image at {} has shape {}, expected {}x3x{}x{}",
                r, s, batch, r, r
            )));
        }
    }

    let w = params.get("disc.from_rgb.weight");
    let b = params.get("disc.from_rgb.bias");
    let mut x = g.conv2d(top_var, w, Some(b), 0, None);
    record(trace, g, "from_rgb".into(), x);

    let last = spec.disc_blocks.len() - 1;
    for (i, block) in spec.disc_blocks.iter().enumerate() {
        let r = block.resolution;
        if block.connected {
            x = combine.apply(g, images[&r], x, params, &format!("disc.b{r}.combine"));
            record(trace, g, format!("b{r}.combine"), x);
        }
        x = g.batch_stddev(x, NORM_EPS);
        record(trace, g, format!("b{r}.stddev"), x);
        let w1 = params.get(&format!("disc.b{r}.conv1.weight"));
        let b1 = params.get(&format!("disc.b{r}.conv1.bias"));
        x = g.conv2d(x, w1, Some(b1), 1, Some(LRELU_SLOPE));
        record(trace, g, format!("b{r}.conv1"), x);
        let w2 = params.get(&format!("disc.b{r}.conv2.weight"));
        let b2 = params.get(&format!("disc.b{r}.conv2.bias"));
        if i == last {
            x = g.conv2d(x, w2, Some(b2), 0, Some(LRELU_SLOPE));
            record(trace, g, format!("b{r}.conv2"), x);
        } else {
            x = g.conv2d(x, w2, Some(b2), 1, Some(LRELU_SLOPE));
            record(trace, g, format!("b{r}.conv2"), x);
            x = g.avg_pool2(x);
            record(trace, g, format!("b{r}.pool"), x);
        }
    }

    // x is [batch, critic_in, 1, 1]; the critic head is linear
    let wc = params.get("disc.critic.weight");
    let bc = params.get("disc.critic.bias");
    let score = g.matmul(x, false, wc, false);
    let bb = g.broadcast_to(bc, g.shape(score));
    let out = g.add(score, bb);
    record(trace, g, "critic".into(), out);
    Ok(out)
}

/// Restricts a full image set to the spec's connected resolutions.
pub fn masked_subset(spec: &ArchitectureSpec, images: &BTreeMap<usize, Var>) -> BTreeMap<usize, Var> {
    images
        .iter()
        .filter(|(r, _)| spec.connection_mask.contains(r))
        .map(|(&r, &v)| (r, v))
        .collect()
}
