//! Adversarial objectives over multi-scale image sets: Wasserstein loss with
//! gradient penalty and drift, and the non-saturating loss with a zero-centered
//! penalty on real inputs. Penalties are emitted as graph nodes, so the
//! parameter update differentiates through the inner gradient.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::RngCore;

use crate::arch_spec::LossKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::registry::Registry;
use crate::tensor::{Real, Shape, Tensor};

/// Backward guard for gradient-norm square roots at exactly zero.
const NORM_GUARD_EPS: f64 = 1e-8;

/// Penalty and regularizer knobs shared by both objectives.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct PenaltyOptions {
    /// Gradient-penalty weight (Wasserstein objective).
    pub lambda: f64,
    /// Drift-term weight on real scores (Wasserstein objective).
    pub drift_eps: f64,
    /// Real-side penalty weight (non-saturating objective).
    pub gamma: f64,
    /// Draw an independent interpolation point per scale instead of one
    /// shared point per sample.
    pub per_scale_alpha: bool,
    /// Penalize only gradient norms above 1.
    pub one_sided: bool,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        PenaltyOptions { lambda: 10.0, drift_eps: 0.001, gamma: 10.0, per_scale_alpha: false, one_sided: false }
    }
}

/// Plain-number loss summary for one training step.
#[derive(Clone, PartialEq, Debug)]
pub struct LossReport {
    pub gen_loss: f64,
    pub disc_loss: f64,
    /// Arithmetic mean of `per_scale_penalties`, recomputed in f64 so the
    /// identity holds exactly regardless of the tensor element type.
    pub penalty: f64,
    pub per_scale_penalties: BTreeMap<usize, f64>,
}

/// Discriminator objective as graph nodes: the scalar to differentiate plus
/// the raw (unweighted) penalty breakdown.
pub struct DiscLossOut {
    pub total: Var,
    pub penalty: Var,
    pub per_scale_penalties: BTreeMap<usize, Var>,
}

impl DiscLossOut {
    /// Snapshot into plain numbers, pairing with an already-evaluated
    /// generator loss.
    pub fn report<T: Real>(&self, g: &Graph<T>, gen_loss: f64) -> LossReport {
        let per_scale_penalties: BTreeMap<usize, f64> =
            self.per_scale_penalties.iter().map(|(&r, &v)| (r, g.value(v).item().to_f64())).collect();
        let penalty =
            per_scale_penalties.values().sum::<f64>() / per_scale_penalties.len().max(1) as f64;
        LossReport {
            gen_loss,
            disc_loss: g.value(self.total).item().to_f64(),
            penalty,
            per_scale_penalties,
        }
    }
}

/// Maps an image set to per-sample critic scores, shape `[batch, 1, 1, 1]`.
pub type Critic<'a, T> = dyn FnMut(&mut Graph<T>, &BTreeMap<usize, Var>) -> Result<Var> + 'a;

pub trait AdversarialLoss<T: Real>: Send + Sync {
    fn kind(&self) -> LossKind;

    /// Builds the discriminator objective for one aligned real/fake pair of
    /// image sets. `critic` may be invoked several times on one graph.
    fn disc_loss(
        &self,
        g: &mut Graph<T>,
        real: &BTreeMap<usize, Var>,
        fake: &BTreeMap<usize, Var>,
        critic: &mut Critic<'_, T>,
        rng: &mut dyn RngCore,
    ) -> Result<DiscLossOut>;

    /// Generator objective over already-computed fake scores.
    fn gen_loss(&self, g: &mut Graph<T>, fake_scores: Var) -> Var;
}

/// Checks that both sets cover the same resolutions with equal shapes; returns
/// the batch size.
fn validate_aligned<T: Real>(
    g: &Graph<T>,
    real: &BTreeMap<usize, Var>,
    fake: &BTreeMap<usize, Var>,
) -> Result<usize> {
    if real.is_empty() {
        return Err(Error::InvalidArgument("empty image set".into()));
    }
    let rk: Vec<usize> = real.keys().copied().collect();
    let fk: Vec<usize> = fake.keys().copied().collect();
    if rk != fk {
        return Err(Error::InvalidArgument(format!(
            "real scales {:?} do not match fake scales {:?}",
            rk, fk
        )));
    }
    let batch = g.shape(*real.values().next().unwrap()).n();
    for (&r, &rv) in real {
        let rs = g.shape(rv);
        let fs = g.shape(fake[&r]);
        if rs != fs {
            return Err(Error::InvalidArgument(format!(
                "scale {}: real shape {} does not match fake shape {}",
                r, rs, fs
            )));
        }
        if rs.n() != batch {
            return Err(Error::InvalidArgument(format!(
                "scale {}: batch {} differs from {}",
                r,
                rs.n(),
                batch
            )));
        }
    }
    Ok(batch)
}

/// Mean of a non-empty collection of scalar nodes.
fn mean_of_scalars<T: Real>(g: &mut Graph<T>, vars: &BTreeMap<usize, Var>) -> Var {
    let mut it = vars.values();
    let mut acc = *it.next().expect("non-empty");
    for &v in it {
        acc = g.add(acc, v);
    }
    g.scale(acc, 1.0 / vars.len() as f64)
}

/// Per-sample gradient accumulated into per-scale scalar penalties.
/// `centered` subtracts 1 from the norm and squares (the Wasserstein form);
/// otherwise the squared norm itself is averaged (the real-side form).
fn grad_norm_penalties<T: Real>(
    g: &mut Graph<T>,
    scores: Var,
    inputs: &BTreeMap<usize, Var>,
    batch: usize,
    centered: bool,
    one_sided: bool,
) -> BTreeMap<usize, Var> {
    let scalar_sum = g.sum_to(scores, Shape::scalar());
    let wrt: Vec<Var> = inputs.values().copied().collect();
    let grads = g.grad(scalar_sum, &wrt);
    let mut out = BTreeMap::new();
    for ((&r, _), grad) in inputs.iter().zip(grads) {
        let p = match grad {
            Some(gv) => {
                let sq = g.square(gv);
                let ssum = g.sum_to(sq, Shape::nchw(batch, 1, 1, 1));
                if centered {
                    let norm = g.sqrt_guarded(ssum, NORM_GUARD_EPS);
                    let mut dev = g.add_scalar(norm, -1.0);
                    if one_sided {
                        dev = g.lrelu(dev, 0.0);
                    }
                    let d2 = g.square(dev);
                    g.mean_all(d2)
                } else {
                    g.mean_all(ssum)
                }
            }
            // a critic with no dependence on this scale has gradient norm 0
            None => {
                let v = if centered && !one_sided { 1.0 } else { 0.0 };
                g.scalar(v)
            }
        };
        out.insert(r, p);
    }
    out
}

/// Wasserstein objective with interpolated-point gradient penalty and a drift
/// term on real scores.
pub struct WganGpLoss {
    pub lambda: f64,
    pub drift_eps: f64,
    pub per_scale_alpha: bool,
    pub one_sided: bool,
}

impl WganGpLoss {
    pub fn new(opts: &PenaltyOptions) -> Self {
        WganGpLoss {
            lambda: opts.lambda,
            drift_eps: opts.drift_eps,
            per_scale_alpha: opts.per_scale_alpha,
            one_sided: opts.one_sided,
        }
    }
}

impl<T: Real> AdversarialLoss<T> for WganGpLoss {
    fn kind(&self) -> LossKind {
        LossKind::WganGp
    }

    fn disc_loss(
        &self,
        g: &mut Graph<T>,
        real: &BTreeMap<usize, Var>,
        fake: &BTreeMap<usize, Var>,
        critic: &mut Critic<'_, T>,
        rng: &mut dyn RngCore,
    ) -> Result<DiscLossOut> {
        let batch = validate_aligned(g, real, fake)?;
        let scores_r = critic(g, real)?;
        let scores_f = critic(g, fake)?;
        let mean_r = g.mean_all(scores_r);
        let mean_f = g.mean_all(scores_f);

        let u01 = Uniform::new(0.0f64, 1.0);
        let shared: Vec<f64> = (0..batch).map(|_| u01.sample(rng)).collect();
        let mut x_hat = BTreeMap::new();
        for (&r, &rv) in real {
            let alphas: Vec<f64> =
                if self.per_scale_alpha { (0..batch).map(|_| u01.sample(rng)).collect() } else { shared.clone() };
            let a = Tensor::from_vec(
                Shape::nchw(batch, 1, 1, 1),
                alphas.iter().map(|&x| T::from_f64(x)).collect(),
            );
            let b = a.map(|x| T::from_f64(1.0) - x);
            let shape = g.shape(rv);
            let av = g.leaf(a);
            let bv = g.leaf(b);
            let ab = g.broadcast_to(av, shape);
            let bb = g.broadcast_to(bv, shape);
            let tr = g.mul(ab, rv);
            let tf = g.mul(bb, fake[&r]);
            x_hat.insert(r, g.add(tr, tf));
        }
        let scores_h = critic(g, &x_hat)?;
        let per_scale_penalties =
            grad_norm_penalties(g, scores_h, &x_hat, batch, true, self.one_sided);
        let penalty = mean_of_scalars(g, &per_scale_penalties);

        let neg_r = g.neg(mean_r);
        let wasserstein = g.add(mean_f, neg_r);
        let gp_term = g.scale(penalty, self.lambda);
        let real_sq = g.square(scores_r);
        let drift = g.mean_all(real_sq);
        let drift_term = g.scale(drift, self.drift_eps);
        let partial = g.add(wasserstein, gp_term);
        let total = g.add(partial, drift_term);
        Ok(DiscLossOut { total, penalty, per_scale_penalties })
    }

    fn gen_loss(&self, g: &mut Graph<T>, fake_scores: Var) -> Var {
        let m = g.mean_all(fake_scores);
        g.neg(m)
    }
}

/// Non-saturating objective with a zero-centered squared-gradient penalty on
/// real inputs only.
pub struct NonsatGpLoss {
    pub gamma: f64,
}

impl NonsatGpLoss {
    pub fn new(opts: &PenaltyOptions) -> Self {
        NonsatGpLoss { gamma: opts.gamma }
    }
}

impl<T: Real> AdversarialLoss<T> for NonsatGpLoss {
    fn kind(&self) -> LossKind {
        LossKind::NonsatGp
    }

    fn disc_loss(
        &self,
        g: &mut Graph<T>,
        real: &BTreeMap<usize, Var>,
        fake: &BTreeMap<usize, Var>,
        critic: &mut Critic<'_, T>,
        _rng: &mut dyn RngCore,
    ) -> Result<DiscLossOut> {
        let batch = validate_aligned(g, real, fake)?;
        let scores_r = critic(g, real)?;
        let scores_f = critic(g, fake)?;
        let neg_r = g.neg(scores_r);
        let sp_real = g.softplus(neg_r);
        let m_real = g.mean_all(sp_real);
        let sp_fake = g.softplus(scores_f);
        let m_fake = g.mean_all(sp_fake);
        let main = g.add(m_real, m_fake);

        let per_scale_penalties = grad_norm_penalties(g, scores_r, real, batch, false, false);
        let penalty = mean_of_scalars(g, &per_scale_penalties);
        let reg = g.scale(penalty, self.gamma / 2.0);
        let total = g.add(main, reg);
        Ok(DiscLossOut { total, penalty, per_scale_penalties })
    }

    fn gen_loss(&self, g: &mut Graph<T>, fake_scores: Var) -> Var {
        let n = g.neg(fake_scores);
        let sp = g.softplus(n);
        g.mean_all(sp)
    }
}

type LossFactory<T> = dyn Fn(&PenaltyOptions) -> Arc<dyn AdversarialLoss<T>> + Send + Sync;

/// Both objectives, keyed by their config names.
pub fn loss_registry<T: Real>() -> Registry<LossFactory<T>> {
    let mut r: Registry<LossFactory<T>> = Registry::new("loss");
    r.register(
        LossKind::WganGp.as_str(),
        Arc::new(|o: &PenaltyOptions| Arc::new(WganGpLoss::new(o)) as Arc<dyn AdversarialLoss<T>>),
    );
    r.register(
        LossKind::NonsatGp.as_str(),
        Arc::new(|o: &PenaltyOptions| Arc::new(NonsatGpLoss::new(o)) as Arc<dyn AdversarialLoss<T>>),
    );
    r
}

/// The strategy for a resolved kind with the given knobs.
pub fn for_kind<T: Real>(kind: LossKind, opts: &PenaltyOptions) -> Arc<dyn AdversarialLoss<T>> {
    loss_registry::<T>().get(kind.as_str()).expect("all loss kinds are registered")(opts)
}
