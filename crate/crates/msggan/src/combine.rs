//! Combine strategies merging a generator image into the discriminator's
//! straight path. Three variants behind one trait, selected by name.
//!
//! Channel arithmetic must agree with [`CombineKind::merged_channels`]; the
//! trait impls are the graph-level realization of that arithmetic.

use std::sync::Arc;

use crate::arch_spec::{CombineKind, RGB_CHANNELS};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamDef};
use crate::registry::Registry;
use crate::tensor::{Real, Shape};

pub trait Combine<T: Real>: Send + Sync {
    fn kind(&self) -> CombineKind;

    /// Parameter definitions for one connected block whose straight path is
    /// `straight` channels wide. Names are prefixed (e.g. "disc.b256.combine").
    fn param_defs(&self, prefix: &str, straight: usize) -> Vec<ParamDef>;

    /// Merges `rgb` into `straight_path`; output width must equal
    /// `self.kind().merged_channels(straight width)`.
    fn apply(
        &self,
        g: &mut Graph<T>,
        rgb: Var,
        straight_path: Var,
        params: &BoundParams,
        prefix: &str,
    ) -> Var;
}

/// Channelwise concatenation, image channels first.
struct SimpleCombine;

impl<T: Real> Combine<T> for SimpleCombine {
    fn kind(&self) -> CombineKind {
        CombineKind::Simple
    }

    fn param_defs(&self, _prefix: &str, _straight: usize) -> Vec<ParamDef> {
        vec![]
    }

    fn apply(&self, g: &mut Graph<T>, rgb: Var, straight_path: Var, _: &BoundParams, _: &str) -> Var {
        g.concat_channels(&[rgb, straight_path])
    }
}

/// 1x1-project the image to half the straight width, then concatenate.
struct LinCatCombine;

impl<T: Real> Combine<T> for LinCatCombine {
    fn kind(&self) -> CombineKind {
        CombineKind::LinCat
    }

    fn param_defs(&self, prefix: &str, straight: usize) -> Vec<ParamDef> {
        let half = straight / 2;
        vec![
            ParamDef::weight(
                format!("{prefix}.weight"),
                Shape::nchw(half, RGB_CHANNELS, 1, 1),
                RGB_CHANNELS,
            ),
            ParamDef::bias(format!("{prefix}.bias"), half),
        ]
    }

    fn apply(&self, g: &mut Graph<T>, rgb: Var, straight_path: Var, params: &BoundParams, prefix: &str) -> Var {
        let w = params.get(&format!("{prefix}.weight"));
        let b = params.get(&format!("{prefix}.bias"));
        let projected = g.conv2d(rgb, w, Some(b), 0, None);
        g.concat_channels(&[projected, straight_path])
    }
}

/// Concatenate, then 1x1-project back to the straight width.
struct CatLinCombine;

impl<T: Real> Combine<T> for CatLinCombine {
    fn kind(&self) -> CombineKind {
        CombineKind::CatLin
    }

    fn param_defs(&self, prefix: &str, straight: usize) -> Vec<ParamDef> {
        vec![
            ParamDef::weight(
                format!("{prefix}.weight"),
                Shape::nchw(straight, RGB_CHANNELS + straight, 1, 1),
                RGB_CHANNELS + straight,
            ),
            ParamDef::bias(format!("{prefix}.bias"), straight),
        ]
    }

    fn apply(&self, g: &mut Graph<T>, rgb: Var, straight_path: Var, params: &BoundParams, prefix: &str) -> Var {
        let cat = g.concat_channels(&[rgb, straight_path]);
        let w = params.get(&format!("{prefix}.weight"));
        let b = params.get(&format!("{prefix}.bias"));
        g.conv2d(cat, w, Some(b), 0, None)
    }
}

/// All combine variants, keyed by their config names.
pub fn combine_registry<T: Real>() -> Registry<dyn Combine<T>> {
    let mut r: Registry<dyn Combine<T>> = Registry::new("combine");
    r.register(CombineKind::Simple.as_str(), Arc::new(SimpleCombine));
    r.register(CombineKind::LinCat.as_str(), Arc::new(LinCatCombine));
    r.register(CombineKind::CatLin.as_str(), Arc::new(CatLinCombine));
    r
}

/// The strategy for a resolved kind.
pub fn for_kind<T: Real>(kind: CombineKind) -> Arc<dyn Combine<T>> {
    combine_registry::<T>()
        .get(kind.as_str())
        .expect("all combine kinds are registered")
}
