//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! The graph is define-by-run and eager: creating a node evaluates it
//! immediately. Backward passes emit ordinary graph nodes instead of raw
//! tensors, so a gradient is itself differentiable; the gradient penalty
//! differentiates through one of these emitted subgraphs and is then
//! differentiated again for the optimizer step.
//!
//! The convolution ops close under differentiation: the derivative of
//! `Conv2d` is expressed with `ConvGradInput` and `ConvGradWeight`, and the
//! derivatives of those two land back on the same three ops.

use crate::tensor::{self, Real, Shape, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Input, parameter, or constant; its value is supplied at creation.
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Square,
    /// Exact square root forward; backward guards the pole with
    /// `0.5 / sqrt(x + bwd_eps)`.
    Sqrt { bwd_eps: f64 },
    /// `(x + eps)^{-1/2}`.
    Rsqrt { eps: f64 },
    Softplus,
    Sigmoid,
    /// `(reference, x) -> x * m` where `m = 1` where `reference > 0`, else
    /// `slope`. The mask is treated as locally constant: no gradient flows to
    /// `reference`. With both inputs the same var this is plain LeakyReLU.
    LreluMaskMul { slope: f64 },
    BroadcastTo(Shape),
    SumTo(Shape),
    Reshape(Shape),
    ConcatChannels,
    SliceChannels { start: usize, len: usize },
    AvgPool2,
    Upsample2 { scale: f64 },
    /// `(x, weight[, bias])`, stride 1, optionally fused LeakyReLU. The fused
    /// activation's backward mask comes from the output sign, which equals
    /// the pre-activation sign because the slope is positive.
    Conv2d { pad: usize, lrelu: Option<f64> },
    /// `(g, weight)`: adjoint of `Conv2d` w.r.t. its input.
    ConvGradInput { pad: usize },
    /// `(x, g)`: adjoint of `Conv2d` w.r.t. its weight.
    ConvGradWeight { pad: usize, kh: usize, kw: usize },
    /// `[m,k,1,1] x [k,n,1,1]`, with optional transposes.
    Matmul { ta: bool, tb: bool },
    /// `x * rsqrt(mean_over_channels(x^2) + eps)`, fused forward.
    PixNorm { eps: f64 },
    /// Appends one constant channel holding the batch-wide mean of the
    /// per-position population standard deviation across the batch. Exact
    /// sqrt forward (an identical batch appends exactly zero); the backward
    /// guards with `rsqrt(var + eps)`.
    BatchStddev { eps: f64 },
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
}

/// Eager autodiff arena. Dropping the graph frees every intermediate.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>) -> Var {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = eval(&op, &vals);
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    // -- constructors -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(T::from_f64(v)))
    }

    /// Copies the value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        self.push(Op::Mul, vec![a, b])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.push(Op::Neg, vec![x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::AddScalar(c), vec![x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.push(Op::Square, vec![x])
    }

    pub fn sqrt_guarded(&mut self, x: Var, bwd_eps: f64) -> Var {
        self.push(Op::Sqrt { bwd_eps }, vec![x])
    }

    pub fn rsqrt(&mut self, x: Var, eps: f64) -> Var {
        self.push(Op::Rsqrt { eps }, vec![x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.push(Op::Softplus, vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn lrelu(&mut self, x: Var, slope: f64) -> Var {
        self.push(Op::LreluMaskMul { slope }, vec![x, x])
    }

    pub fn broadcast_to(&mut self, x: Var, target: Shape) -> Var {
        assert!(
            self.shape(x).broadcasts_to(target),
            "{} does not broadcast to {}",
            self.shape(x),
            target
        );
        self.push(Op::BroadcastTo(target), vec![x])
    }

    pub fn sum_to(&mut self, x: Var, target: Shape) -> Var {
        assert!(
            target.broadcasts_to(self.shape(x)),
            "{} is not a reduction of {}",
            target,
            self.shape(x)
        );
        self.push(Op::SumTo(target), vec![x])
    }

    /// Mean-reduce to `target` (sum divided by the fold factor).
    pub fn mean_to(&mut self, x: Var, target: Shape) -> Var {
        let factor = self.shape(x).numel() / target.numel();
        let s = self.sum_to(x, target);
        self.scale(s, 1.0 / factor as f64)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.mean_to(x, Shape::scalar())
    }

    pub fn reshape(&mut self, x: Var, target: Shape) -> Var {
        assert_eq!(self.shape(x).numel(), target.numel(), "reshape element count");
        self.push(Op::Reshape(target), vec![x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        self.push(Op::ConcatChannels, parts.to_vec())
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        self.push(Op::SliceChannels { start, len }, vec![x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        self.push(Op::AvgPool2, vec![x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        self.push(Op::Upsample2 { scale: 1.0 }, vec![x])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        lrelu: Option<f64>,
    ) -> Var {
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push(Op::Conv2d { pad, lrelu }, inputs)
    }

    /// Transposed convolution (the adjoint map of `conv2d` with the same
    /// weight). Weight layout is the forward one: `[g_channels, out_c, kh, kw]`.
    pub fn conv2d_transpose(&mut self, x: Var, weight: Var, pad: usize) -> Var {
        self.push(Op::ConvGradInput { pad }, vec![x, weight])
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        self.push(Op::Matmul { ta, tb }, vec![a, b])
    }

    pub fn pixel_norm(&mut self, x: Var, eps: f64) -> Var {
        self.push(Op::PixNorm { eps }, vec![x])
    }

    pub fn batch_stddev(&mut self, x: Var, eps: f64) -> Var {
        self.push(Op::BatchStddev { eps }, vec![x])
    }

    // -- differentiation ----------------------------------------------------

    /// Gradient of scalar `y` w.r.t. each var in `wrt`, as new graph nodes.
    /// `None` marks a var with no path to `y` (a structural zero). Calling
    /// this on a previously returned gradient yields second derivatives.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(self.shape(y), Shape::scalar(), "grad target must be scalar, got {}", self.shape(y));

        // Restrict work to nodes on a path from some wrt var up to y.
        let n = y.0 + 1;
        let mut descends = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                descends[w.0] = true;
            }
        }
        for i in 0..n {
            if !descends[i] {
                descends[i] = self.nodes[i].inputs.iter().any(|v| descends[v.0]);
            }
        }
        if !descends[y.0] {
            return vec![None; wrt.len()];
        }
        let mut reaches = vec![false; n];
        reaches[y.0] = true;
        let mut stack = vec![y.0];
        while let Some(i) = stack.pop() {
            for v in &self.nodes[i].inputs {
                if !reaches[v.0] {
                    reaches[v.0] = true;
                    stack.push(v.0);
                }
            }
        }
        let needed: Vec<bool> = (0..n).map(|i| descends[i] && reaches[i]).collect();

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        adjoint[y.0] = Some(self.leaf(Tensor::scalar(T::one())));

        // Node ids are already topologically ordered; walk them backwards.
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(cot) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            if inputs.is_empty() {
                continue;
            }
            let want: Vec<bool> = inputs.iter().map(|v| needed[v.0]).collect();
            let contribs = self.vjp(&op, &inputs, Var(i), cot, &want);
            debug_assert_eq!(contribs.len(), inputs.len());
            for (inp, contrib) in inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                adjoint[inp.0] = Some(match adjoint[inp.0] {
                    Some(prev) => self.add(prev, c),
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|w| if w.0 < n { adjoint[w.0] } else { None })
            .collect()
    }

    /// Cotangent contributions of one node to its inputs, emitted as nodes.
    /// Entries where `want` is false are skipped (never evaluated).
    fn vjp(&mut self, op: &Op, inputs: &[Var], out: Var, cot: Var, want: &[bool]) -> Vec<Option<Var>> {
        match *op {
            Op::Leaf => vec![],
            Op::Add => vec![
                want[0].then_some(cot),
                want[1].then_some(cot),
            ],
            Op::Sub => vec![
                want[0].then_some(cot),
                if want[1] { Some(self.neg(cot)) } else { None },
            ],
            Op::Mul => {
                let da = want[0].then(|| self.mul(cot, inputs[1]));
                let db = want[1].then(|| self.mul(cot, inputs[0]));
                vec![da, db]
            }
            Op::Neg => vec![want[0].then(|| self.neg(cot))],
            Op::Scale(c) => vec![want[0].then(|| self.scale(cot, c))],
            Op::AddScalar(_) => vec![want[0].then_some(cot)],
            Op::Square => vec![want[0].then(|| {
                let xg = self.mul(cot, inputs[0]);
                self.scale(xg, 2.0)
            })],
            Op::Sqrt { bwd_eps } => vec![want[0].then(|| {
                let r = self.rsqrt(inputs[0], bwd_eps);
                let rg = self.mul(cot, r);
                self.scale(rg, 0.5)
            })],
            Op::Rsqrt { .. } => vec![want[0].then(|| {
                let y2 = self.mul(out, out);
                let y3 = self.mul(y2, out);
                let t = self.mul(cot, y3);
                self.scale(t, -0.5)
            })],
            Op::Softplus => vec![want[0].then(|| {
                let s = self.sigmoid(inputs[0]);
                self.mul(cot, s)
            })],
            Op::Sigmoid => vec![want[0].then(|| {
                let ny = self.neg(out);
                let om = self.add_scalar(ny, 1.0);
                let yy = self.mul(out, om);
                self.mul(cot, yy)
            })],
            Op::LreluMaskMul { slope } => vec![
                None,
                want[1].then(|| self.push(Op::LreluMaskMul { slope }, vec![inputs[0], cot])),
            ],
            Op::BroadcastTo(_) => vec![want[0].then(|| {
                let src = self.shape(inputs[0]);
                self.sum_to(cot, src)
            })],
            Op::SumTo(_) => vec![want[0].then(|| {
                let src = self.shape(inputs[0]);
                self.broadcast_to(cot, src)
            })],
            Op::Reshape(_) => vec![want[0].then(|| {
                let src = self.shape(inputs[0]);
                self.reshape(cot, src)
            })],
            Op::ConcatChannels => {
                let mut start = 0;
                inputs
                    .iter()
                    .zip(want)
                    .map(|(inp, &w)| {
                        let len = self.shape(*inp).c();
                        let r = w.then(|| self.slice_channels(cot, start, len));
                        start += len;
                        r
                    })
                    .collect()
            }
            Op::SliceChannels { start, len } => vec![want[0].then(|| {
                let [n, c, h, w] = self.shape(inputs[0]).0;
                let mut parts = Vec::new();
                if start > 0 {
                    parts.push(self.leaf(Tensor::zeros(Shape::nchw(n, start, h, w))));
                }
                parts.push(cot);
                if start + len < c {
                    parts.push(self.leaf(Tensor::zeros(Shape::nchw(n, c - start - len, h, w))));
                }
                self.concat_channels(&parts)
            })],
            Op::AvgPool2 => vec![want[0].then(|| self.push(Op::Upsample2 { scale: 0.25 }, vec![cot]))],
            Op::Upsample2 { scale } => vec![want[0].then(|| {
                let p = self.avg_pool2(cot);
                self.scale(p, 4.0 * scale)
            })],
            Op::Conv2d { pad, lrelu } => {
                let any = want.iter().any(|&w| w);
                if !any {
                    return vec![None; inputs.len()];
                }
                let g_pre = match lrelu {
                    Some(slope) => self.push(Op::LreluMaskMul { slope }, vec![out, cot]),
                    None => cot,
                };
                let dx = want[0].then(|| self.push(Op::ConvGradInput { pad }, vec![g_pre, inputs[1]]));
                let dw = want[1].then(|| {
                    let [_, _, kh, kw] = self.shape(inputs[1]).0;
                    self.push(Op::ConvGradWeight { pad, kh, kw }, vec![inputs[0], g_pre])
                });
                let mut grads = vec![dx, dw];
                if inputs.len() == 3 {
                    grads.push(want[2].then(|| {
                        let c_out = self.shape(out).c();
                        self.sum_to(g_pre, Shape::nchw(1, c_out, 1, 1))
                    }));
                }
                grads
            }
            Op::ConvGradInput { pad } => {
                let dg = want[0].then(|| self.push(Op::Conv2d { pad, lrelu: None }, vec![cot, inputs[1]]));
                let dw = want[1].then(|| {
                    let [_, _, kh, kw] = self.shape(inputs[1]).0;
                    self.push(Op::ConvGradWeight { pad, kh, kw }, vec![cot, inputs[0]])
                });
                vec![dg, dw]
            }
            Op::ConvGradWeight { pad, .. } => {
                let dx = want[0].then(|| self.push(Op::ConvGradInput { pad }, vec![inputs[1], cot]));
                let dg = want[1].then(|| self.push(Op::Conv2d { pad, lrelu: None }, vec![inputs[0], cot]));
                vec![dx, dg]
            }
            Op::Matmul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = want[0].then(|| match (ta, tb) {
                    (false, false) => self.matmul(cot, false, b, true),
                    (true, false) => self.matmul(b, false, cot, true),
                    (false, true) => self.matmul(cot, false, b, false),
                    (true, true) => self.matmul(b, true, cot, true),
                });
                let db = want[1].then(|| match (ta, tb) {
                    (false, false) => self.matmul(a, true, cot, false),
                    (true, false) => self.matmul(a, false, cot, false),
                    (false, true) => self.matmul(cot, true, a, false),
                    (true, true) => self.matmul(cot, true, a, true),
                });
                vec![da, db]
            }
            Op::PixNorm { eps } => vec![want[0].then(|| {
                // y = x * r with r = (mean_c x^2 + eps)^{-1/2}
                // dx = r*g - x * r^3/C * sum_c(x*g)
                let x = inputs[0];
                let shape = self.shape(x);
                let c = shape.c() as f64;
                let red = Shape::nchw(shape.n(), 1, shape.h(), shape.w());
                let sq = self.square(x);
                let ssq = self.sum_to(sq, red);
                let m = self.scale(ssq, 1.0 / c);
                let r = self.rsqrt(m, eps);
                let rb = self.broadcast_to(r, shape);
                let term1 = self.mul(cot, rb);
                let xg = self.mul(x, cot);
                let sxg = self.sum_to(xg, red);
                let r2 = self.mul(r, r);
                let r3 = self.mul(r2, r);
                let coef = self.mul(r3, sxg);
                let coef = self.scale(coef, 1.0 / c);
                let coef_b = self.broadcast_to(coef, shape);
                let term2 = self.mul(x, coef_b);
                self.sub(term1, term2)
            })],
            Op::BatchStddev { eps } => vec![want[0].then(|| {
                // out = concat(x, s) with s = mean_chw sqrt(var_b(x)); the
                // appended channel's cotangent folds back through the mean of
                // guarded standard deviations.
                let x = inputs[0];
                let [n, c, h, w] = self.shape(x).0;
                let red = Shape::nchw(1, c, h, w);
                let gx = self.slice_channels(cot, 0, c);
                let gs_chan = self.slice_channels(cot, c, 1);
                let gs = self.sum_to(gs_chan, Shape::scalar());
                let mean = self.mean_to(x, red);
                let mean_b = self.broadcast_to(mean, self.shape(x));
                let dev = self.sub(x, mean_b);
                let sqdev = self.square(dev);
                let var = self.mean_to(sqdev, red);
                let inv_std = self.rsqrt(var, eps);
                let inv_std_b = self.broadcast_to(inv_std, self.shape(x));
                let coef = self.scale(gs, 1.0 / (n * c * h * w) as f64);
                let coef_b = self.broadcast_to(coef, self.shape(x));
                let t = self.mul(dev, inv_std_b);
                let t = self.mul(t, coef_b);
                self.add(gx, t)
            })],
        }
    }
}

/// Evaluates one op against its input values.
fn eval<T: Real>(op: &Op, vals: &[&Tensor<T>]) -> Tensor<T> {
    match *op {
        Op::Leaf => unreachable!("leaves carry their value"),
        Op::Add => vals[0].zip_map(vals[1], |a, b| a + b),
        Op::Sub => vals[0].zip_map(vals[1], |a, b| a - b),
        Op::Mul => vals[0].zip_map(vals[1], |a, b| a * b),
        Op::Neg => vals[0].map(|x| -x),
        Op::Scale(c) => {
            let c = T::from_f64(c);
            vals[0].map(|x| x * c)
        }
        Op::AddScalar(c) => {
            let c = T::from_f64(c);
            vals[0].map(|x| x + c)
        }
        Op::Square => vals[0].map(|x| x * x),
        Op::Sqrt { .. } => vals[0].map(|x| x.sqrt()),
        Op::Rsqrt { eps } => {
            let eps = T::from_f64(eps);
            vals[0].map(|x| (x + eps).sqrt().recip())
        }
        Op::Softplus => vals[0].map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p()),
        Op::Sigmoid => vals[0].map(|x| {
            if x >= T::zero() {
                (T::one() + (-x).exp()).recip()
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }),
        Op::LreluMaskMul { slope } => {
            let slope = T::from_f64(slope);
            vals[0].zip_map(vals[1], |r, x| if r > T::zero() { x } else { x * slope })
        }
        Op::BroadcastTo(target) => tensor::broadcast_to(vals[0], target),
        Op::SumTo(target) => tensor::sum_to(vals[0], target),
        Op::Reshape(target) => vals[0].reshaped(target),
        Op::ConcatChannels => tensor::concat_channels(vals),
        Op::SliceChannels { start, len } => tensor::slice_channels(vals[0], start, len),
        Op::AvgPool2 => tensor::avg_pool2(vals[0]),
        Op::Upsample2 { scale } => tensor::upsample2_nearest(vals[0], scale),
        Op::Conv2d { pad, lrelu } => {
            tensor::conv2d(vals[0], vals[1], vals.get(2).copied(), pad, lrelu)
        }
        Op::ConvGradInput { pad } => tensor::conv2d_grad_input(vals[0], vals[1], pad),
        Op::ConvGradWeight { pad, kh, kw } => {
            tensor::conv2d_grad_weight(vals[0], vals[1], pad, kh, kw)
        }
        Op::Matmul { ta, tb } => tensor::matmul(vals[0], ta, vals[1], tb),
        Op::PixNorm { eps } => tensor::pixel_norm(vals[0], eps),
        Op::BatchStddev { eps: _ } => tensor::batch_stddev_append(vals[0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

    fn eval_scalar(inputs: &[Tensor<f64>], build: &Builder) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vars);
        g.value(y).item()
    }

    /// Central finite differences on every element of every input.
    fn check_grads(inputs: &[Tensor<f64>], tol: f64, build: &Builder) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vars);
        assert_eq!(g.shape(y), Shape::scalar(), "test loss must be scalar");
        let grads = g.grad(y, &vars);

        let h = 1e-5;
        for (i, gv) in grads.iter().enumerate() {
            for j in 0..inputs[i].shape().numel() {
                let analytic = match gv {
                    Some(v) => g.value(*v).data()[j],
                    None => 0.0,
                };
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval_scalar(&plus, build) - eval_scalar(&minus, build)) / (2.0 * h);
                assert!(
                    (analytic - numeric).abs() <= tol * (1.0 + numeric.abs()),
                    "input {} elem {}: analytic {} vs numeric {}",
                    i,
                    j,
                    analytic,
                    numeric
                );
            }
        }
    }

    fn randn(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, rng)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = randn(Shape::nchw(2, 3, 2, 2), &mut rng);
        let b = randn(Shape::nchw(2, 3, 2, 2), &mut rng);
        check_grads(&[a, b], 1e-6, &|g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let n = g.neg(m);
            let sc = g.scale(n, 0.7);
            let sq = g.square(sc);
            let sh = g.add_scalar(sq, 0.3);
            g.mean_all(sh)
        });
    }

    #[test]
    fn nonlinearities_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // keep values away from the LeakyReLU kink so the FD probe stays on
        // one side of it
        let x = randn(Shape::nchw(2, 4, 1, 1), &mut rng)
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_grads(&[x.clone()], 1e-6, &|g, v| {
            let l = g.lrelu(v[0], 0.2);
            let s = g.softplus(l);
            let t = g.sigmoid(s);
            g.mean_all(t)
        });
        // exact sqrt / guarded rsqrt on strictly positive input
        let p = x.map(|v| v * v + 0.5);
        check_grads(&[p], 1e-6, &|g, v| {
            let r = g.sqrt_guarded(v[0], 1e-12);
            let q = g.rsqrt(r, 1e-12);
            g.mean_all(q)
        });
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = randn(Shape::nchw(2, 3, 2, 2), &mut rng);
        let b = randn(Shape::nchw(2, 2, 2, 2), &mut rng);
        let c = randn(Shape::nchw(1, 3, 1, 1), &mut rng);
        check_grads(&[a, b, c], 1e-6, &|g, v| {
            let cat = g.concat_channels(&[v[0], v[1]]);
            let sl = g.slice_channels(cat, 1, 3);
            let cb = g.broadcast_to(v[2], g.shape(sl));
            let m = g.mul(sl, cb);
            let r = g.reshape(m, Shape::nchw(4, 3, 2, 1));
            g.mean_all(r)
        });
    }

    #[test]
    fn resampling_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = randn(Shape::nchw(2, 2, 4, 4), &mut rng);
        check_grads(&[x], 1e-6, &|g, v| {
            let u = g.upsample2(v[0]);
            let p = g.avg_pool2(u);
            let p = g.avg_pool2(p);
            let s = g.square(p);
            g.mean_all(s)
        });
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = randn(Shape::nchw(2, 3, 4, 4), &mut rng);
        let w = randn(Shape::nchw(4, 3, 3, 3), &mut rng).map(|v| v * 0.4);
        let b = randn(Shape::nchw(1, 4, 1, 1), &mut rng);
        check_grads(&[x, w, b], 1e-5, &|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Some(0.2));
            g.mean_all(y)
        });

        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let z = randn(Shape::nchw(2, 5, 1, 1), &mut rng);
        let wt = randn(Shape::nchw(5, 3, 4, 4), &mut rng).map(|v| v * 0.4);
        check_grads(&[z, wt], 1e-5, &|g, v| {
            let y = g.conv2d_transpose(v[0], v[1], 0);
            let s = g.square(y);
            g.mean_all(s)
        });
    }

    #[test]
    fn matmul_transposes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { Shape::nchw(4, 2, 1, 1) } else { Shape::nchw(2, 4, 1, 1) };
            let b_shape = if tb { Shape::nchw(3, 4, 1, 1) } else { Shape::nchw(4, 3, 1, 1) };
            let a = randn(a_shape, &mut rng);
            let b = randn(b_shape, &mut rng);
            check_grads(&[a, b], 1e-6, &move |g, v| {
                let y = g.matmul(v[0], ta, v[1], tb);
                let s = g.square(y);
                g.mean_all(s)
            });
        }
    }

    #[test]
    fn fused_normalizers_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let x = randn(Shape::nchw(3, 4, 2, 2), &mut rng);
        check_grads(&[x.clone()], 1e-5, &|g, v| {
            let p = g.pixel_norm(v[0], 1e-8);
            let s = g.square(p);
            g.mean_all(s)
        });
        check_grads(&[x], 1e-5, &|g, v| {
            let s = g.batch_stddev(v[0], 1e-8);
            let q = g.square(s);
            g.mean_all(q)
        });
    }

    #[test]
    fn grad_skips_unconnected_and_unwanted_paths() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let unused = g.leaf(Tensor::scalar(5.0));
        let y = g.mul(a, b);

        let before = g.len();
        let grads = g.grad(y, &[a, unused]);
        // seed + one mul: the b-branch must not be materialized
        assert_eq!(g.len(), before + 2);
        assert_eq!(g.value(grads[0].unwrap()).item(), 3.0);
        assert!(grads[1].is_none());

        let len_before = g.len();
        let none = g.grad(y, &[unused]);
        assert!(none[0].is_none());
        assert_eq!(g.len(), len_before, "disconnected grad must not emit nodes");
    }

    #[test]
    fn second_derivative_of_cubic_is_linear() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.7));
        let x2 = g.square(x);
        let y = g.mul(x2, x);
        let dy = g.grad(y, &[x])[0].unwrap();
        assert!((g.value(dy).item() - 3.0 * 1.7 * 1.7).abs() < 1e-12);
        let d2y = g.grad(dy, &[x])[0].unwrap();
        assert!((g.value(d2y).item() - 6.0 * 1.7).abs() < 1e-12);
        let d3y = g.grad(d2y, &[x])[0].unwrap();
        assert!((g.value(d3y).item() - 6.0).abs() < 1e-12);
    }

    /// Gradient-penalty shape: differentiate a norm of an emitted gradient
    /// w.r.t. the weights, and compare against finite differences of the
    /// penalty value. Exercises the conv closure plus the fused normalizer
    /// backwards under a second differentiation.
    #[test]
    fn penalty_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = Tensor::randn(Shape::nchw(2, 2, 4, 4), &mut rng);
        let w1 = Tensor::<f64>::randn(Shape::nchw(3, 3, 3, 3), &mut rng).map(|v| v * 0.5);
        let b1 = Tensor::randn(Shape::nchw(1, 3, 1, 1), &mut rng);
        let w2 = Tensor::<f64>::randn(Shape::nchw(1, 3, 1, 1), &mut rng);

        let penalty = |g: &mut Graph<f64>, x: Var, p: &[Var]| -> Var {
            let mb = g.batch_stddev(x, 1e-8);
            let h1 = g.conv2d(mb, p[0], Some(p[1]), 1, Some(0.2));
            let h1 = g.pixel_norm(h1, 1e-8);
            let score = g.conv2d(h1, p[2], None, 0, None);
            let total = g.sum_to(score, Shape::scalar());
            let gx = g.grad(total, &[x])[0].expect("score depends on x");
            let sq = g.square(gx);
            let n = g.shape(gx).n();
            let per = g.sum_to(sq, Shape::nchw(n, 1, 1, 1));
            let norm = g.sqrt_guarded(per, 1e-8);
            let dev = g.add_scalar(norm, -1.0);
            let dev2 = g.square(dev);
            g.mean_all(dev2)
        };

        let params = [w1, b1, w2];
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let pv: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = penalty(&mut g, xv, &pv);
        let grads = g.grad(loss, &pv);

        let h = 1e-5;
        for (i, gv) in grads.iter().enumerate() {
            let gv = gv.expect("penalty depends on every parameter");
            for j in 0..params[i].shape().numel() {
                let run = |delta: f64| -> f64 {
                    let mut p = params.clone();
                    p[i].data_mut()[j] += delta;
                    let mut g = Graph::new();
                    let xv = g.leaf(x.clone());
                    let pv: Vec<Var> = p.iter().map(|t| g.leaf(t.clone())).collect();
                    let l = penalty(&mut g, xv, &pv);
                    g.value(l).item()
                };
                let numeric = (run(h) - run(-h)) / (2.0 * h);
                let analytic = g.value(gv).data()[j];
                assert!(
                    (analytic - numeric).abs() <= 1e-4 * (1.0 + numeric.abs()),
                    "param {} elem {}: analytic {} vs numeric {}",
                    i,
                    j,
                    analytic,
                    numeric
                );
            }
        }
    }

    #[test]
    fn identical_batch_appends_exact_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(Shape::nchw(2, 2, 2, 2), vec![0.3; 16]));
        let out = g.batch_stddev(x, 1e-8);
        assert_eq!(g.shape(out), Shape::nchw(2, 3, 2, 2));
        for b in 0..2 {
            for p in 0..4 {
                assert_eq!(g.value(out).data()[(b * 3 + 2) * 4 + p], 0.0);
            }
        }
    }
}
