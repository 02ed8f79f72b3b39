//! Operation recording and reverse traversal.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::conv::{self, ConvDims, ConvGeometry};
use super::norm::{self, BatchNormConfig, BatchNormState, NormMode, NormSaved};
use super::{Scalar, Shape, Tensor, TensorError, IGNORE_LABEL};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        dims: ConvDims,
    },
    Deconv {
        y: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        saved: NormSaved<T>,
    },
    Relu {
        x: Var,
    },
    Add {
        inputs: Vec<Var>,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        inputs: Vec<Var>,
    },
    ShortcutDown {
        x: Var,
    },
    ShortcutUp {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        grad: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Linear record of forward operations. Single-threaded by construction:
/// every op borrows the tape mutably.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: Shape, right: Shape) -> TensorError {
    TensorError::ShapeMismatch { op, left, right }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Sum of element counts over every non-leaf node.
    pub fn activation_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::CrossEntropy { .. } | Op::WeightedSum { .. }))
            .map(|n| n.tensor.shape.numel())
            .sum()
    }

    /// Hash of the sign pattern of every ReLU input. Two evaluations with the
    /// same pattern lie on the same linear piece of every ReLU.
    pub fn relu_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for v in self.nodes[x.0].tensor.data() {
                    h.write_u8((*v > T::zero()) as u8);
                }
            }
        }
        h.finish()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tensor.requires_grad)
    }

    fn record(&mut self, shape: Shape, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = self.any_requires(inputs);
        let tensor = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        self.push(tensor, op)
    }

    fn conv_dims(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeometry,
    ) -> Result<ConvDims, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != geom.kernel_h || ws.w != geom.kernel_w {
            return Err(mismatch(op, xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b).numel() != ws.n {
                return Err(mismatch(op, ws, self.shape(b)));
            }
        }
        let (oh, ow) = geom
            .output_hw(xs.h, xs.w)
            .ok_or_else(|| invalid(op, format!("input {xs} is too small for the kernel")))?;
        Ok(ConvDims {
            n: xs.n,
            ci: xs.c,
            h: xs.h,
            w: xs.w,
            co: ws.n,
            oh,
            ow,
        })
    }

    /// Cross-correlation with weight `(out_c, in_c, k_h, k_w)` and optional
    /// bias of length `out_c`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var, TensorError> {
        let dims = self.conv_dims("conv2d", x, w, b, &geom)?;
        let out = conv::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
            &geom,
        );
        let shape = Shape::new(dims.n, dims.co, dims.oh, dims.ow);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(shape, out, &inputs, Op::Conv { x, w, b, geom, dims }))
    }

    /// Stride-2 convolution (`k = 3`, pad 1 gives `ceil(in / 2)`).
    pub fn conv2d_down(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if xs.h == 0 || xs.w == 0 {
            return Err(invalid("conv2d_down", format!("empty spatial input {xs}")));
        }
        if geom.stride != 2 {
            return Err(invalid("conv2d_down", format!("stride must be 2, got {}", geom.stride)));
        }
        self.conv2d(x, w, b, geom)
    }

    /// Transposed convolution with weight `(in_c, out_c, k_h, k_w)` and
    /// optional bias of length `out_c`: the adjoint of `conv2d` with the same
    /// weight and geometry, landing exactly on `target_hw` (the output padding
    /// is searched internally).
    pub fn deconv2d(
        &mut self,
        y: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        target_hw: (usize, usize),
    ) -> Result<Var, TensorError> {
        let ys = self.shape(y);
        let ws = self.shape(w);
        if ws.n != ys.c || ws.h != geom.kernel_h || ws.w != geom.kernel_w {
            return Err(mismatch("deconv2d", ys, ws));
        }
        if let Some(b) = b {
            if self.shape(b).numel() != ws.c {
                return Err(mismatch("deconv2d", ws, self.shape(b)));
            }
        }
        conv::transposed_output_padding(&geom, (ys.h, ys.w), target_hw)?;
        let dims = ConvDims {
            n: ys.n,
            ci: ws.c,
            h: target_hw.0,
            w: target_hw.1,
            co: ys.c,
            oh: ys.h,
            ow: ys.w,
        };
        let out = conv::deconv_forward(
            self.value(y).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
            &geom,
        );
        let shape = Shape::new(ys.n, ws.c, target_hw.0, target_hw.1);
        let mut inputs = vec![y, w];
        inputs.extend(b);
        Ok(self.record(shape, out, &inputs, Op::Deconv { y, w, b, geom, dims }))
    }

    /// Stride-2 transposed convolution onto `target_hw`.
    pub fn deconv2d_up(
        &mut self,
        y: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        target_hw: (usize, usize),
    ) -> Result<Var, TensorError> {
        if geom.stride != 2 {
            return Err(invalid("deconv2d_up", format!("stride must be 2, got {}", geom.stride)));
        }
        self.deconv2d(y, w, b, geom, target_hw)
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
        cfg: &BatchNormConfig,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p).numel() != xs.c {
                return Err(mismatch("batch_norm", xs, self.shape(p)));
            }
        }
        if state.running_mean.len() != xs.c || state.running_var.len() != xs.c {
            return Err(invalid(
                "batch_norm",
                format!("running statistics sized {} for {} channels", state.running_mean.len(), xs.c),
            ));
        }
        if mode == NormMode::Train && xs.n * xs.plane() <= 1 {
            return Err(invalid(
                "batch_norm",
                format!("batch statistics undefined for a single value per channel ({xs})"),
            ));
        }
        let (out, saved) = norm::forward(
            self.value(x).data(),
            (xs.n, xs.c, xs.plane()),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
            cfg,
        );
        Ok(self.record(
            xs,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                saved,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let shape = t.shape;
        let out = t.data().iter().map(|v| v.max(T::zero())).collect();
        self.record(shape, out, &[x], Op::Relu { x })
    }

    /// Pointwise sum of one or more equally shaped tensors, accumulated left
    /// to right.
    pub fn add(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or_else(|| invalid("add", "no inputs"))?;
        let shape = self.shape(first);
        for v in &inputs[1..] {
            if self.shape(*v) != shape {
                return Err(mismatch("add", shape, self.shape(*v)));
            }
        }
        let mut out = self.value(first).data().to_vec();
        for v in &inputs[1..] {
            for (o, x) in out.iter_mut().zip(self.value(*v).data()) {
                *o += *x;
            }
        }
        Ok(self.record(
            shape,
            out,
            inputs,
            Op::Add {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x);
        let shape = t.shape;
        let out = t.data().iter().map(|v| *v * factor).collect();
        self.record(shape, out, &[x], Op::Scale { x, factor })
    }

    /// Concatenation along channels.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for v in inputs {
            let s = self.shape(*v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(mismatch("concat_channels", s0, s));
            }
            c += s.c;
        }
        let shape = Shape::new(s0.n, c, s0.h, s0.w);
        let mut out = Vec::with_capacity(shape.numel());
        for b in 0..s0.n {
            for v in inputs {
                let t = self.value(*v);
                let per = t.shape.c * t.shape.plane();
                out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        Ok(self.record(
            shape,
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Parameter-free downsampling shortcut: keeps every second pixel
    /// (`ceil(in / 2)` per axis) and zero-pads to twice the channels.
    pub fn shortcut_down(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
        let shape = Shape::new(s.n, 2 * s.c, oh, ow);
        let mut out = vec![T::zero(); shape.numel()];
        let t = self.value(x);
        for b in 0..s.n {
            for c in 0..s.c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[((b * 2 * s.c + c) * oh + y) * ow + xx] = t.at(b, c, 2 * y, 2 * xx);
                    }
                }
            }
        }
        self.record(shape, out, &[x], Op::ShortcutDown { x })
    }

    /// Parameter-free upsampling shortcut: nearest-neighbour upsampling onto
    /// `target_hw`, keeping the first half of the channels.
    pub fn shortcut_up(&mut self, x: Var, target_hw: (usize, usize)) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let (th, tw) = target_hw;
        if !s.c.is_multiple_of(2) || th.div_ceil(2) != s.h || tw.div_ceil(2) != s.w {
            return Err(invalid(
                "shortcut_up",
                format!("cannot map {s} onto {th}x{tw} with half the channels"),
            ));
        }
        let c = s.c / 2;
        let shape = Shape::new(s.n, c, th, tw);
        let mut out = vec![T::zero(); shape.numel()];
        let t = self.value(x);
        for b in 0..s.n {
            for ch in 0..c {
                for y in 0..th {
                    for xx in 0..tw {
                        out[((b * c + ch) * th + y) * tw + xx] = t.at(b, ch, y / 2, xx / 2);
                    }
                }
            }
        }
        Ok(self.record(shape, out, &[x], Op::ShortcutUp { x }))
    }

    /// Mean pixel-wise `-log softmax(logits)[label]` over non-ignored pixels.
    /// `labels` is `[n, h, w]` row-major; [`IGNORE_LABEL`] pixels are skipped.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        let plane = s.plane();
        if labels.len() != s.n * plane {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("{} labels for logits {s}", labels.len()),
            ));
        }
        let x = self.value(logits).data();
        let mut grad = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        let mut probs = vec![T::zero(); s.c];
        for b in 0..s.n {
            for p in 0..plane {
                let label = labels[b * plane + p];
                if label == IGNORE_LABEL {
                    continue;
                }
                let label = label as usize;
                if label >= s.c {
                    return Err(invalid(
                        "softmax_cross_entropy",
                        format!("label {label} outside {} classes", s.c),
                    ));
                }
                let at = |c: usize| (b * s.c + c) * plane + p;
                let mut m = x[at(0)];
                for c in 1..s.c {
                    m = m.max(x[at(c)]);
                }
                let mut z = T::zero();
                for (c, pr) in probs.iter_mut().enumerate() {
                    *pr = (x[at(c)] - m).exp();
                    z += *pr;
                }
                total += m + z.ln() - x[at(label)];
                for (c, pr) in probs.iter().enumerate() {
                    grad[at(c)] = *pr / z;
                }
                grad[at(label)] -= T::one();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::AllIgnored);
        }
        let inv = T::one() / T::from_usize(count).unwrap();
        for g in &mut grad {
            *g *= inv;
        }
        Ok(self.record(
            Shape::scalar(),
            vec![total * inv],
            &[logits],
            Op::CrossEntropy { logits, grad },
        ))
    }

    /// `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if weights.len() != t.shape.numel() {
            return Err(invalid(
                "weighted_sum",
                format!("{} weights for {}", weights.len(), t.shape),
            ));
        }
        let mut s = T::zero();
        for (v, w) in t.data().iter().zip(weights) {
            s += *v * *w;
        }
        Ok(self.record(
            Shape::scalar(),
            vec![s],
            &[x],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.shape(x).numel();
        self.weighted_sum(x, &vec![T::one(); n])
            .expect("weights sized from input")
    }

    /// Reverse pass from a scalar `loss`. Gradients add up across fan-out.
    /// Afterwards every tensor that requires a gradient carries one, zero
    /// when it is not connected to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            for (input, contribution) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].tensor.requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            self.nodes[idx].tensor.set_grad(g);
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                let n = node.tensor.data.len();
                node.tensor.set_grad(vec![T::zero(); n]);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn input_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, geom, dims } => {
                let (dx, dw, db) = conv::conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    *dims,
                    geom,
                    self.wants(*x),
                    self.wants(*w) || b.is_some_and(|b| self.wants(b)),
                );
                let mut out = collect_grads([(*x, dx), (*w, dw)]);
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Deconv { y, w, b, geom, dims } => {
                let (dy, dw, db) = conv::deconv_backward(
                    self.value(*y).data(),
                    self.value(*w).data(),
                    g,
                    *dims,
                    geom,
                    self.wants(*y),
                    self.wants(*w) || b.is_some_and(|b| self.wants(b)),
                );
                let mut out = collect_grads([(*y, dy), (*w, dw)]);
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                saved,
            } => {
                let s = self.shape(*x);
                let (dx, dg, db) = norm::backward(
                    g,
                    (s.n, s.c, s.plane()),
                    self.value(*gamma).data(),
                    saved,
                    *mode,
                );
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                vec![(*x, d)]
            }
            Op::Add { inputs } => inputs.iter().map(|v| (*v, g.to_vec())).collect(),
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| *v * *factor).collect())],
            Op::Concat { inputs } => {
                let s = node.tensor.shape;
                let mut out: Vec<(Var, Vec<T>)> = inputs
                    .iter()
                    .map(|v| (*v, Vec::with_capacity(self.shape(*v).numel())))
                    .collect();
                let mut offset = 0;
                for _ in 0..s.n {
                    for (v, buf) in out.iter_mut() {
                        let per = self.shape(*v).c * s.plane();
                        buf.extend_from_slice(&g[offset..offset + per]);
                        offset += per;
                    }
                }
                out
            }
            Op::ShortcutDown { x } => {
                let s = self.shape(*x);
                let os = node.tensor.shape;
                let mut d = vec![T::zero(); s.numel()];
                for b in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..os.h {
                            for xx in 0..os.w {
                                d[((b * s.c + c) * s.h + 2 * y) * s.w + 2 * xx] =
                                    g[((b * os.c + c) * os.h + y) * os.w + xx];
                            }
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::ShortcutUp { x } => {
                let s = self.shape(*x);
                let os = node.tensor.shape;
                let mut d = vec![T::zero(); s.numel()];
                for b in 0..s.n {
                    for c in 0..os.c {
                        for y in 0..os.h {
                            for xx in 0..os.w {
                                d[((b * s.c + c) * s.h + y / 2) * s.w + xx / 2] +=
                                    g[((b * os.c + c) * os.h + y) * os.w + xx];
                            }
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::CrossEntropy { logits, grad } => {
                vec![(*logits, grad.iter().map(|v| *v * g[0]).collect())]
            }
            Op::WeightedSum { x, weights } => {
                vec![(*x, weights.iter().map(|w| *w * g[0]).collect())]
            }
        }
    }
}

fn collect_grads<T>(parts: [(Var, Option<Vec<T>>); 2]) -> Vec<(Var, Vec<T>)> {
    parts
        .into_iter()
        .filter_map(|(v, g)| g.map(|g| (v, g)))
        .collect()
}
