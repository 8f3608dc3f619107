use crate::autodiff::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomBackward {
    /// Returns one gradient buffer per input. Entries for inputs whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, Float),
    Relu(Var),
    LeakyRelu(Var, Float),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: NormGroups,
        fixed: bool,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
        /// Per-position 0/1 weights `[N·H·W]` and per-group weight totals
        /// when statistics cover only part of each plane.
        weight: Option<(Vec<Float>, Vec<Float>)>,
    },
    AvgPool2(Var),
    Gram(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

/// How normalisation statistics are grouped: per channel over the whole
/// batch, or per (sample, channel).
#[derive(Clone, Copy, Debug)]
struct NormGroups {
    n: usize,
    c: usize,
    plane: usize,
    per_instance: bool,
}

impl NormGroups {
    fn count(&self) -> usize {
        if self.per_instance {
            self.n * self.c
        } else {
            self.c
        }
    }

    fn group_of(&self, n: usize, c: usize) -> usize {
        if self.per_instance {
            n * self.c + c
        } else {
            c
        }
    }

    fn group_size(&self) -> usize {
        if self.per_instance {
            self.plane
        } else {
            self.n * self.plane
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<Float>>,
}

/// Recording of a forward computation.
///
/// A tape is single-threaded; build one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Statistics of a batch-normalisation forward pass, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<Float>,
    /// Biased (population) variance.
    pub var: Vec<Float>,
    /// Number of elements contributing to each channel.
    pub count: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Resets accumulated gradients to zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zero-filled if nothing reached the leaf.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Records a copy of `v`'s value as a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------
    // Elementwise

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(Float, Float) -> Float) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        if tb.is_scalar() {
            let s = tb.item();
            return Ok(ta.map(|x| f(x, s)));
        }
        if ta.is_scalar() {
            let s = ta.item();
            return Ok(tb.map(|y| f(s, y)));
        }
        Err(Error::shape(format!(
            "elementwise operands {:?} and {:?} differ and neither is a scalar",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&d| d == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let v = self.binary(a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: Float) -> Var {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(&[x]);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: Float) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: Float) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        let rg = self.rg(&[x]);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.value(x).map(|a| a.ln());
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Log(x), rg))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(v, Op::Softplus(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    // ---------------------------------------------------------------
    // Shape

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    // ---------------------------------------------------------------
    // Convolution

    fn check_bias(&self, b: Option<Var>, f: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::shape(format!(
                    "bias shape {:?} does not match {f} output channels",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    /// Geometry for `conv2d(x, w)` with `w` laid out `[F, C, kH, kW]`.
    pub fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize, dil: usize) -> Result<ConvGeom> {
        let (_, c, h, wd) = self.value(x).dims4()?;
        let (f, wc, kh, kw) = self.value(w).dims4()?;
        if c != wc {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels but kernel {:?} expects {wc}",
                self.shape(w)
            )));
        }
        ConvGeom::new(c, h, wd, f, kh, kw, stride, pad, dil)
    }

    /// Geometry for `conv_transpose2d(x, w)` with `w` laid out
    /// `[C_in, C_out, kH, kW]`.
    pub fn conv_transpose_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (_, c, h, wd) = self.value(x).dims4()?;
        let (wc, cout, kh, kw) = self.value(w).dims4()?;
        if c != wc {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {c} channels but kernel {:?} expects {wc}",
                self.shape(w)
            )));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be >= 1"));
        }
        ConvGeom::for_transpose(c, h, wd, cout, kh, kw, stride, pad)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad, dil)?;
        self.check_bias(b, geom.f)?;
        let n = self.shape(x)[0];
        let mut out = conv::conv_forward(self.value(x).data(), n, &geom, self.value(w).data());
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.out_plane());
        }
        let v = Tensor::new(&[n, geom.f, geom.ho, geom.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(v, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = self.conv_transpose_geom(x, w, stride, pad)?;
        self.check_bias(b, geom.c)?;
        let n = self.shape(x)[0];
        let mut out = conv::conv_backward_input(self.value(x).data(), n, &geom, self.value(w).data());
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.in_plane());
        }
        let v = Tensor::new(&[n, geom.c, geom.h, geom.w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(v, Op::ConvT { x, w, b, geom }, rg))
    }

    // ---------------------------------------------------------------
    // Normalisation

    fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Float,
        per_instance: bool,
        fixed: Option<(&[Float], &[Float])>,
        weight: Option<&Tensor>,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if let Some(m) = weight {
            if m.shape() != [n, 1, h, w] {
                return Err(Error::shape(format!(
                    "normalisation weight {:?} does not match {:?}",
                    m.shape(),
                    self.shape(x)
                )));
            }
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "normalisation over {c} channels got gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let groups = NormGroups {
            n,
            c,
            plane: h * w,
            per_instance,
        };
        let xs = self.value(x).data();
        let ng = groups.count();
        let plane = groups.plane;
        let wt = weight.map(|m| m.data()).filter(|m| m.contains(&0.0));
        let mut counts = vec![0.0; ng];
        for i in 0..n {
            let k = match wt {
                Some(m) => m[i * plane..(i + 1) * plane].iter().filter(|&&v| v != 0.0).count() as Float,
                None => plane as Float,
            };
            if per_instance {
                counts[i * c..(i + 1) * c].fill(k);
            } else {
                counts.iter_mut().for_each(|t| *t += k);
            }
        }
        // a group with nothing to weigh falls back to the whole plane
        let wt = wt.filter(|_| counts.iter().all(|&k| k > 0.0));
        if wt.is_none() {
            counts.fill(groups.group_size() as Float);
        }
        let on = |i: usize, p: usize| wt.is_none_or(|m| m[i * plane + p] != 0.0);
        let (mean, var) = match fixed {
            Some((m, v)) if m.len() == c && v.len() == c => (m.to_vec(), v.to_vec()),
            Some((m, v)) => {
                return Err(Error::shape(format!(
                    "running statistics of length {}/{} for {c} channels",
                    m.len(),
                    v.len()
                )))
            }
            None => {
                let mut mean = vec![0.0; ng];
                let mut sq = vec![0.0; ng];
                for i in 0..n {
                    for ch in 0..c {
                        let g = groups.group_of(i, ch);
                        let row = &xs[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        mean[g] += row.iter().enumerate().filter(|&(p, _)| on(i, p)).map(|(_, v)| v).sum::<Float>();
                    }
                }
                mean.iter_mut().zip(&counts).for_each(|(m, k)| *m /= k);
                for i in 0..n {
                    for ch in 0..c {
                        let g = groups.group_of(i, ch);
                        let row = &xs[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        sq[g] += row
                            .iter()
                            .enumerate()
                            .filter(|&(p, _)| on(i, p))
                            .map(|(_, v)| (v - mean[g]).powi(2))
                            .sum::<Float>();
                    }
                }
                sq.iter_mut().zip(&counts).for_each(|(s, k)| *s /= k);
                (mean, sq)
            }
        };
        let inv_std: Vec<Float> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let g = groups.group_of(i, ch);
                let base = (i * c + ch) * groups.plane;
                for p in base..base + groups.plane {
                    let z = (xs[p] - mean[g]) * inv_std[g];
                    xhat[p] = z;
                    out[p] = gm[ch] * z + bt[ch];
                }
            }
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        let stats = BatchStats {
            mean,
            var,
            count: counts[0] as usize,
        };
        let weight = wt.map(|m| (m.to_vec(), counts));
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::Norm {
            x,
            gamma,
            beta,
            groups,
            fixed: fixed.is_some(),
            xhat,
            inv_std,
            weight,
        };
        let var_out = self.push(v, op, rg);
        Ok((var_out, stats))
    }

    /// Batch normalisation using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: Float) -> Result<(Var, BatchStats)> {
        self.norm(x, gamma, beta, eps, false, None, None)
    }

    /// Batch normalisation whose statistics cover only positions where
    /// `mask` (`[N, 1, H, W]`) is nonzero. Every position is normalised.
    pub fn batch_norm_train_masked(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Float,
        mask: &Tensor,
    ) -> Result<(Var, BatchStats)> {
        self.norm(x, gamma, beta, eps, false, None, Some(mask))
    }

    /// Batch normalisation with externally supplied (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[Float],
        var: &[Float],
        eps: Float,
    ) -> Result<Var> {
        Ok(self.norm(x, gamma, beta, eps, false, Some((mean, var)), None)?.0)
    }

    /// Instance normalisation: statistics per sample and channel.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Float) -> Result<Var> {
        Ok(self.norm(x, gamma, beta, eps, true, None, None)?.0)
    }

    // ---------------------------------------------------------------
    // Misc

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!("avg_pool2 of {h}x{w} is empty")));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xs[nc * h * w..(nc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, x0) = (2 * oy, 2 * ox);
                    out[nc * ho * wo + oy * wo + ox] = 0.25
                        * (src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0] + src[(y + 1) * w + x0 + 1]);
                }
            }
        }
        let v = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::AvgPool2(x), rg))
    }

    /// Per-sample Gram matrix `[N, C, C]` of a `[N, C, H, W]` activation,
    /// normalised by `C·H·W`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let norm = (c * plane) as Float;
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * c];
        for i in 0..n {
            let phi = &xs[i * c * plane..(i + 1) * c * plane];
            let g = &mut out[i * c * c..(i + 1) * c * c];
            conv::gemm(c, plane, c, phi, false, phi, true, 0.0, g);
            g.iter_mut().for_each(|v| *v /= norm);
        }
        let v = Tensor::new(&[n, c, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Gram(x), rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------
    // Backward

    /// Accumulates `∂loss/∂leaf` into every reachable leaf that requires a
    /// gradient. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Float>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<Float>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    acc(*a, reduce_to(g, val(*a).len(), |_, gi| gi));
                }
                if self.needs(*b) {
                    acc(*b, reduce_to(g, val(*b).len(), |_, gi| sign * gi));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    acc(*a, reduce_to(g, va.len(), |k, gi| gi * bcast(vb, k)));
                }
                if self.needs(*b) {
                    acc(*b, reduce_to(g, vb.len(), |k, gi| gi * bcast(va, k)));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    acc(*a, reduce_to(g, va.len(), |k, gi| gi / bcast(vb, k)));
                }
                if self.needs(*b) {
                    acc(
                        *b,
                        reduce_to(g, vb.len(), |k, gi| {
                            let d = bcast(vb, k);
                            -gi * bcast(va, k) / (d * d)
                        }),
                    );
                }
            }
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::LeakyRelu(x, s) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { s * gi })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(out.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
            ),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(gi, xi)| gi / xi).collect()),
            Op::Softplus(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(gi, &xi)| gi * sigmoid(xi)).collect(),
            ),
            Op::Abs(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gi, &xi)| {
                        if xi > 0.0 {
                            *gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as Float; n])
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis] * inner;
                    if self.needs(p) {
                        let mut buf = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            buf.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        acc(p, buf);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.nodes[x.0].value.shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let block = src_shape[*axis] * inner;
                let len = out.shape()[*axis] * inner;
                let mut buf = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = o * block + start * inner;
                    buf[dst..dst + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                acc(*x, buf);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Conv { x, w, b, geom } => {
                let n = out.shape()[0];
                if self.needs(*x) {
                    acc(*x, conv::conv_backward_input(g, n, geom, val(*w)));
                }
                if self.needs(*w) {
                    acc(*w, conv::conv_backward_kernel(val(*x), g, n, geom));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, channel_sums(g, n, geom.f, geom.out_plane()));
                    }
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let n = out.shape()[0];
                if self.needs(*x) {
                    acc(*x, conv::conv_forward(g, n, geom, val(*w)));
                }
                if self.needs(*w) {
                    acc(*w, conv::conv_backward_kernel(g, val(*x), n, geom));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, channel_sums(g, n, geom.c, geom.in_plane()));
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                fixed,
                xhat,
                inv_std,
                weight,
            } => {
                let (n, c, plane) = (groups.n, groups.c, groups.plane);
                let gm = val(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for p in base..base + plane {
                                dg[ch] += g[p] * xhat[p];
                                db[ch] += g[p];
                            }
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    if *fixed {
                        // y = gamma * (x - mean) * inv_std + beta with constant statistics
                        for s in 0..n {
                            for ch in 0..c {
                                let k = groups.group_of(s, ch);
                                let base = (s * c + ch) * plane;
                                for p in base..base + plane {
                                    dx[p] = g[p] * gm[ch] * inv_std[k];
                                }
                            }
                        }
                    } else {
                        let ng = groups.count();
                        let full = vec![groups.group_size() as Float; ng];
                        let counts = weight.as_ref().map_or(&full, |(_, k)| k);
                        let w_at = |s: usize, p: usize| weight.as_ref().map_or(1.0, |(w, _)| w[s * plane + p]);
                        let mut sum_d = vec![0.0; ng];
                        let mut sum_dx = vec![0.0; ng];
                        for s in 0..n {
                            for ch in 0..c {
                                let k = groups.group_of(s, ch);
                                let base = (s * c + ch) * plane;
                                for p in base..base + plane {
                                    let d = g[p] * gm[ch];
                                    sum_d[k] += d;
                                    sum_dx[k] += d * xhat[p];
                                }
                            }
                        }
                        for s in 0..n {
                            for ch in 0..c {
                                let k = groups.group_of(s, ch);
                                let base = (s * c + ch) * plane;
                                let m = counts[k];
                                for p in base..base + plane {
                                    let d = g[p] * gm[ch];
                                    dx[p] = match weight {
                                        None => inv_std[k] / m * (m * d - sum_d[k] - xhat[p] * sum_dx[k]),
                                        Some(_) => {
                                            let wq = w_at(s, p - base);
                                            inv_std[k] * (d - wq / m * (sum_d[k] + xhat[p] * sum_dx[k]))
                                        }
                                    };
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("4-d");
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gi = 0.25 * g[nc * ho * wo + oy * wo + ox];
                            let base = nc * h * w;
                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dx[base + (2 * oy + dy) * w + 2 * ox + dxo] += gi;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Gram(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("4-d");
                let plane = h * w;
                let norm = (c * plane) as Float;
                let xs = val(*x);
                let mut dx = vec![0.0; xs.len()];
                let mut sym = vec![0.0; c * c];
                for s in 0..n {
                    let gs = &g[s * c * c..(s + 1) * c * c];
                    for r in 0..c {
                        for q in 0..c {
                            sym[r * c + q] = (gs[r * c + q] + gs[q * c + r]) / norm;
                        }
                    }
                    conv::gemm(
                        c,
                        c,
                        plane,
                        &sym,
                        false,
                        &xs[s * c * plane..(s + 1) * c * plane],
                        false,
                        0.0,
                        &mut dx[s * c * plane..(s + 1) * c * plane],
                    );
                }
                acc(*x, dx);
            }
            Op::Custom { inputs, rule } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let res = rule.backward(&tensors, out, g, &needs);
                for (v, gv) in inputs.iter().zip(res) {
                    if let Some(gv) = gv {
                        acc(*v, gv);
                    }
                }
            }
        }
    }
}

#[inline]
fn bcast(v: &[Float], k: usize) -> Float {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

/// Maps the output gradient onto an operand of length `len`, summing when
/// the operand was a broadcast scalar.
fn reduce_to(g: &[Float], len: usize, f: impl Fn(usize, Float) -> Float) -> Vec<Float> {
    if len == g.len() {
        g.iter().enumerate().map(|(k, &gi)| f(k, gi)).collect()
    } else {
        vec![g.iter().enumerate().map(|(k, &gi)| f(k, gi)).sum()]
    }
}

fn add_channel_bias(out: &mut [Float], bias: &[Float], plane: usize) {
    let f = bias.len();
    for (k, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[k % f];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[Float], n: usize, f: usize, plane: usize) -> Vec<Float> {
    let mut db = vec![0.0; f];
    for s in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let base = (s * f + ch) * plane;
            *d += g[base..base + plane].iter().sum::<Float>();
        }
    }
    db
}

pub(crate) fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: Float) -> Float {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
