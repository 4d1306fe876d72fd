//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends one node holding its output value and the ids of
//! its inputs; recording order is therefore a topological order of the
//! graph. `backward` walks the nodes once in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers in a fixed order,
//! so two backward passes over the same tape produce bit-identical
//! gradients.
//!
//! Values are f32. Scalar reductions (`mse`) accumulate in f64 and keep the
//! f64 result cached on the node; `add`/`sub`/`scale` propagate that cache
//! between scalars so loss values can be read at full precision
//! (`Tape::scalar`), which is what makes tight finite-difference checks
//! possible on an f32 engine.

mod conv;
#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::ConvDims;

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: TensorId,
    },
    Upsample2x {
        input: TensorId,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    Mse {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f32,
    },
    BiasAdd {
        input: TensorId,
        bias: TensorId,
    },
    Clamp01 {
        input: TensorId,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    /// Full-precision value for scalar nodes produced by reductions.
    scalar_f64: Option<f64>,
    /// True when a grad-enabled leaf is reachable from this node.
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. `grad_enabled` marks it as a differentiation
    /// target; gradients are only guaranteed for enabled leaves.
    pub fn leaf(&mut self, value: Tensor, grad_enabled: bool) -> TensorId {
        self.push(value, grad_enabled, Op::Leaf)
    }

    /// Leaf that never receives gradients (inputs, labels).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer accumulated by the last `backward`, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar node value at f64 precision (the cached reduction result when
    /// available, otherwise the stored f32 widened).
    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let node = &self.nodes[id.0];
        if !node.value.is_scalar() {
            return Err(Error::invalid(
                "Tape::scalar",
                format!("expected scalar, got shape {:?}", node.value.shape()),
            ));
        }
        Ok(node
            .scalar_f64
            .unwrap_or_else(|| node.value.data()[0] as f64))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Every value and every accumulated gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.value.all_finite() && n.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
        })
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            scalar_f64: None,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_err(&self, op: &'static str, a: TensorId, b: TensorId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // ---- operations -----------------------------------------------------

    /// 2-D convolution (cross-correlation, the deep-learning convention),
    /// NCHW input against an OIKK kernel, zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let (co, ki, kh, kw) = self.value(kernel).dims4()?;
        if kh != kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square, got {}x{}", kh, kw),
            ));
        }
        if ci != ki {
            return Err(self.shape_err("conv2d", input, kernel));
        }
        if stride < 1 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let oh = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
        let ow = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!(
                        "kernel {}x{} larger than padded input {}x{}",
                        kh,
                        kw,
                        h + 2 * padding,
                        w + 2 * padding
                    ),
                ))
            }
        };
        let dims = ConvDims {
            batch: n,
            c_in: ci,
            h,
            w,
            c_out: co,
            k: kh,
            stride,
            padding,
            oh,
            ow,
        };
        let out = conv::forward(self.value(input).data(), self.value(kernel).data(), &dims);
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            needs,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Elementwise max(0, x); backward passes gradient only where x > 0.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(input).shape().to_vec(),
            self.value(input).data().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let needs = self.needs(input);
        self.push(value, needs, Op::Relu { input })
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, input: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let src = self.value(input).data();
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for p in 0..n * c {
            let sp = &src[p * h * w..][..h * w];
            let dp = &mut out[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dp[y * ow + x] = sp[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::Upsample2x { input }))
    }

    /// Concatenate along the channel axis; batch and spatial dims must agree.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(self.shape_err("concat_channels", a, b));
        }
        let (sa, sb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa.len() + sb.len());
        let plane = ha * wa;
        for n in 0..na {
            out.extend_from_slice(&sa[n * ca * plane..][..ca * plane]);
            out.extend_from_slice(&sb[n * cb * plane..][..cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::ConcatChannels { a, b }))
    }

    /// Mean squared error over all elements; f64 accumulation.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mse", a, b));
        }
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mse", "empty tensors have no mean"));
        }
        let mut acc = 0.0f64;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = (*x - *y) as f64;
            acc += d * d;
        }
        let mean = acc / n as f64;
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(Tensor::scalar(mean as f32), needs, Op::Mse { a, b });
        self.nodes[id.0].scalar_f64 = Some(mean);
        Ok(id)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let cache = if value.is_scalar() {
            Some(self.scalar(a)? + self.scalar(b)?)
        } else {
            None
        };
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(value, needs, Op::Add { a, b });
        self.nodes[id.0].scalar_f64 = cache;
        Ok(id)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let cache = if value.is_scalar() {
            Some(self.scalar(a)? - self.scalar(b)?)
        } else {
            None
        };
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(value, needs, Op::Sub { a, b });
        self.nodes[id.0].scalar_f64 = cache;
        Ok(id)
    }

    pub fn scale(&mut self, input: TensorId, factor: f32) -> TensorId {
        let value = Tensor::new(
            self.value(input).shape().to_vec(),
            self.value(input).data().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        let cache = if value.is_scalar() {
            Some(self.scalar(input).expect("scalar input") * factor as f64)
        } else {
            None
        };
        let needs = self.needs(input);
        let id = self.push(value, needs, Op::Scale { input, factor });
        self.nodes[id.0].scalar_f64 = cache;
        id
    }

    /// Per-channel bias over an NCHW tensor; bias has shape [C].
    pub fn bias_add(&mut self, input: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).shape() != [c] {
            return Err(self.shape_err("bias_add", input, bias));
        }
        let src = self.value(input).data();
        let bv = self.value(bias).data();
        let plane = h * w;
        let mut out = Vec::with_capacity(src.len());
        for nn in 0..n {
            for cc in 0..c {
                let b = bv[cc];
                out.extend(src[(nn * c + cc) * plane..][..plane].iter().map(|v| v + b));
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(value, needs, Op::BiasAdd { input, bias }))
    }

    /// Clamp to [0, 1]; backward passes gradient where 0 <= x <= 1.
    pub fn clamp01(&mut self, input: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(input).shape().to_vec(),
            self.value(input)
                .data()
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect(),
        )
        .expect("same shape");
        let needs = self.needs(input);
        self.push(value, needs, Op::Clamp01 { input })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// reachable node whose subgraph contains a grad-enabled leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        if !self.needs(loss) {
            return Err(Error::invalid(
                "backward",
                "loss does not depend on any grad-enabled leaf",
            ));
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contribs = self.vjp(&op, i)?;
            for (id, delta) in contribs {
                self.accumulate(id, delta);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: Vec<f32>) {
        debug_assert_eq!(delta.len(), self.nodes[id.0].value.numel());
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(&delta) {
                    *gv += dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Vector-Jacobian products of one op w.r.t. the inputs that need them.
    fn vjp(&self, op: &Op, out_idx: usize) -> Result<Vec<(TensorId, Vec<f32>)>> {
        let g = self.nodes[out_idx].grad.as_ref().expect("output grad set");
        let mut out = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (n, ci, h, w) = self.value(input).dims4()?;
                let (co, _, k, _) = self.value(kernel).dims4()?;
                let (_, _, oh, ow) = self.nodes[out_idx].value.dims4()?;
                let dims = ConvDims {
                    batch: n,
                    c_in: ci,
                    h,
                    w,
                    c_out: co,
                    k,
                    stride,
                    padding,
                    oh,
                    ow,
                };
                if self.needs(input) {
                    out.push((input, conv::backward_input(g, self.value(kernel).data(), &dims)));
                }
                if self.needs(kernel) {
                    out.push((kernel, conv::backward_kernel(self.value(input).data(), g, &dims)));
                }
            }
            Op::Relu { input } => {
                if self.needs(input) {
                    let delta = self
                        .value(input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    out.push((input, delta));
                }
            }
            Op::Upsample2x { input } => {
                if self.needs(input) {
                    let (n, c, h, w) = self.value(input).dims4()?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut delta = vec![0.0f32; n * c * h * w];
                    for p in 0..n * c {
                        let dp = &mut delta[p * h * w..][..h * w];
                        let gp = &g[p * oh * ow..][..oh * ow];
                        for y in 0..oh {
                            for x in 0..ow {
                                dp[(y / 2) * w + x / 2] += gp[y * ow + x];
                            }
                        }
                    }
                    out.push((input, delta));
                }
            }
            Op::ConcatChannels { a, b } => {
                let (na, ca, ha, wa) = self.value(a).dims4()?;
                let (_, cb, _, _) = self.value(b).dims4()?;
                let plane = ha * wa;
                if self.needs(a) {
                    let mut delta = Vec::with_capacity(na * ca * plane);
                    for n in 0..na {
                        let base = n * (ca + cb) * plane;
                        delta.extend_from_slice(&g[base..base + ca * plane]);
                    }
                    out.push((a, delta));
                }
                if self.needs(b) {
                    let mut delta = Vec::with_capacity(na * cb * plane);
                    for n in 0..na {
                        let base = n * (ca + cb) * plane + ca * plane;
                        delta.extend_from_slice(&g[base..base + cb * plane]);
                    }
                    out.push((b, delta));
                }
            }
            Op::Mse { a, b } => {
                let n = self.value(a).numel() as f64;
                let factor = (g[0] as f64 * 2.0 / n) as f32;
                if self.needs(a) {
                    let delta = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(x, y)| factor * (x - y))
                        .collect();
                    out.push((a, delta));
                }
                if self.needs(b) {
                    let delta = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(x, y)| -factor * (x - y))
                        .collect();
                    out.push((b, delta));
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(b) {
                    out.push((b, g.clone()));
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(b) {
                    out.push((b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(input) {
                    out.push((input, g.iter().map(|v| v * factor).collect()));
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.needs(input) {
                    out.push((input, g.clone()));
                }
                if self.needs(bias) {
                    let (n, c, h, w) = self.value(input).dims4()?;
                    let plane = h * w;
                    let mut delta = vec![0.0f32; c];
                    for cc in 0..c {
                        let mut acc = 0.0f64;
                        for nn in 0..n {
                            for v in &g[(nn * c + cc) * plane..][..plane] {
                                acc += *v as f64;
                            }
                        }
                        delta[cc] = acc as f32;
                    }
                    out.push((bias, delta));
                }
            }
            Op::Clamp01 { input } => {
                if self.needs(input) {
                    let delta = self
                        .value(input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(x, gv)| if (0.0..=1.0).contains(x) { *gv } else { 0.0 })
                        .collect();
                    out.push((input, delta));
                }
            }
        }
        Ok(out)
    }
}

/// Default central-difference step for `grad_check`.
pub const GRAD_CHECK_EPSILON: f32 = 1e-3;

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` must build the same graph for equal inputs. Coordinates are sampled
/// with a fixed stride so at most `max_coords_per_input` are probed per
/// input. Returns the max over probed coordinates of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    epsilon: f32,
    max_coords_per_input: usize,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if epsilon <= 0.0 {
        return Err(Error::invalid("grad_check", "epsilon must be > 0"));
    }
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &ids)?;
        tape.scalar(loss)
    };

    let mut max_rel = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        if n == 0 {
            continue;
        }
        let step = n.div_ceil(max_coords_per_input.max(1));
        for idx in (0..n).step_by(step) {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] += epsilon;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] -= epsilon;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon as f64);
            let a = analytic[which][idx] as f64;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
