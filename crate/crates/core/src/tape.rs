//! Reverse-mode gradient tape over tensor primitives.
//!
//! Every forward primitive records an op; `backward` replays the record
//! in exact reverse execution order and accumulates gradients into every
//! value it touched. The op set is deliberately small: convolution,
//! affine maps, activations, pooling, elementwise arithmetic, shape
//! moves, and the clamped cross-entropy loss — enough to express the
//! whole recognizer while staying checkable coordinate-by-coordinate
//! against central differences.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;

/// Handle to a value stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<T: Element>(self, v: T) -> T {
        match self {
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Activation::Tanh => v.tanh(),
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Derivative expressed in terms of the op's own output.
    fn derivative_from_output<T: Element>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Probabilities are clamped to [EPS, 1-EPS] before the logs in the
/// cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;

enum OpKind<T: Element> {
    Conv2d {
        input: ValueId,
        kernels: ValueId,
        bias: Option<ValueId>,
    },
    Affine {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
    },
    Activation {
        input: ValueId,
        kind: Activation,
    },
    GlobalAvgPool {
        input: ValueId,
    },
    MaxPool2 {
        input: ValueId,
        argmax: Vec<usize>,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        input: ValueId,
        factor: T,
    },
    Concat {
        inputs: Vec<ValueId>,
    },
    ChannelSlice {
        input: ValueId,
        c0: usize,
        c1: usize,
    },
    ChannelScale {
        image: ValueId,
        gains: ValueId,
    },
    Reshape {
        input: ValueId,
    },
    SumAll {
        input: ValueId,
    },
    Bce {
        pred: ValueId,
        target: Tensor<T>,
    },
}

struct OpRecord<T: Element> {
    kind: OpKind<T>,
    out: ValueId,
}

/// Ordered record of executed primitives plus their values and, after
/// `backward`, their gradients.
pub struct Tape<T: Element> {
    values: Vec<Tensor<T>>,
    ops: Vec<OpRecord<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register an input or parameter value. Leaves record no op.
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(value);
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    fn push(&mut self, kind: OpKind<T>, value: Tensor<T>) -> ValueId {
        let out = ValueId(self.values.len());
        self.values.push(value);
        self.ops.push(OpRecord { kind, out });
        out
    }

    /// Zero-padded "same" convolution, stride 1.
    ///
    /// input H×W×Cin, kernels Cout×Cin×kh×kw (kh, kw odd), bias Cout.
    pub fn conv2d(&mut self, input: ValueId, kernels: ValueId, bias: ValueId) -> Result<ValueId> {
        self.conv2d_opt(input, kernels, Some(bias))
    }

    pub fn conv2d_opt(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: Option<ValueId>,
    ) -> Result<ValueId> {
        let out = conv2d_forward(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.push(
            OpKind::Conv2d {
                input,
                kernels,
                bias,
            },
            out,
        ))
    }

    /// out = inputᵀ·weight + bias with input length M, weight M×P, bias P.
    pub fn affine(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        self.affine_opt(input, weight, Some(bias))
    }

    pub fn affine_opt(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
    ) -> Result<ValueId> {
        let out = affine_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.push(
            OpKind::Affine {
                input,
                weight,
                bias,
            },
            out,
        ))
    }

    pub fn activation(&mut self, input: ValueId, kind: Activation) -> ValueId {
        let out = self.value(input).map(|v| kind.apply(v));
        self.push(OpKind::Activation { input, kind }, out)
    }

    /// Mean over spatial positions of a rank-3 H×W×C map; returns length C.
    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let out = global_avg_pool_forward(self.value(input))?;
        Ok(self.push(OpKind::GlobalAvgPool { input }, out))
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, input: ValueId) -> Result<ValueId> {
        let (out, argmax) = max_pool2_forward(self.value(input))?;
        Ok(self.push(OpKind::MaxPool2 { input, argmax }, out))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(OpKind::Add { a, b }, out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(OpKind::Mul { a, b }, out))
    }

    pub fn scale(&mut self, input: ValueId, factor: T) -> ValueId {
        let out = self.value(input).map(|v| v * factor);
        self.push(OpKind::Scale { input, factor }, out)
    }

    /// Concatenate along the first axis; trailing dims must agree.
    pub fn concat(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let mut dim0 = 0usize;
        let mut data = Vec::new();
        for &id in inputs {
            let t = self.value(id);
            if t.rank() != first.len() || t.shape()[1..] != first[1..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", t.shape(), first),
                ));
            }
            dim0 += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = dim0;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            OpKind::Concat {
                inputs: inputs.to_vec(),
            },
            out,
        ))
    }

    /// Channels c0..c1 of a rank-3 H×W×C map.
    pub fn channel_slice(&mut self, input: ValueId, c0: usize, c1: usize) -> Result<ValueId> {
        let t = self.value(input);
        if t.rank() != 3 {
            return Err(Error::shape(
                "channel_slice",
                format!("rank-3 required, got {:?}", t.shape()),
            ));
        }
        let (h, w, c) = t.dims3();
        if c0 >= c1 || c1 > c {
            return Err(Error::invalid(
                "channel_slice",
                format!("range {c0}..{c1} of {c} channels"),
            ));
        }
        let cs = c1 - c0;
        let mut data = Vec::with_capacity(h * w * cs);
        for p in 0..h * w {
            data.extend_from_slice(&t.data()[p * c + c0..p * c + c1]);
        }
        let out = Tensor::new(vec![h, w, cs], data)?;
        Ok(self.push(OpKind::ChannelSlice { input, c0, c1 }, out))
    }

    /// Per-channel rescaling: out[y,x,k] = gains[k] * image[y,x,k].
    pub fn channel_scale(&mut self, image: ValueId, gains: ValueId) -> Result<ValueId> {
        let (img, g) = (self.value(image), self.value(gains));
        if img.rank() != 3 {
            return Err(Error::shape(
                "channel_scale",
                format!("rank-3 image required, got {:?}", img.shape()),
            ));
        }
        let (h, w, c) = img.dims3();
        if g.shape() != [c] {
            return Err(Error::shape(
                "channel_scale",
                format!("gains {:?} for {c} channels", g.shape()),
            ));
        }
        let gd = g.data();
        let mut data = Vec::with_capacity(h * w * c);
        for p in 0..h * w {
            let px = &img.data()[p * c..(p + 1) * c];
            data.extend(px.iter().zip(gd).map(|(&v, &z)| v * z));
        }
        let out = Tensor::new(vec![h, w, c], data)?;
        Ok(self.push(OpKind::ChannelScale { image, gains }, out))
    }

    pub fn reshape(&mut self, input: ValueId, shape: impl Into<Vec<usize>>) -> Result<ValueId> {
        let out = self.value(input).reshaped(shape)?;
        Ok(self.push(OpKind::Reshape { input }, out))
    }

    pub fn flatten(&mut self, input: ValueId) -> Result<ValueId> {
        let len = self.value(input).len();
        self.reshape(input, vec![len])
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(OpKind::SumAll { input }, out)
    }

    /// Mean binary cross-entropy of predicted probabilities against a
    /// constant 0/1 target of the same shape. Probabilities are clamped
    /// to [1e-7, 1-1e-7] before the logs.
    pub fn bce(&mut self, pred: ValueId, target: Tensor<T>) -> Result<ValueId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "bce",
                format!("pred {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let n = T::from_f64_lossy(p.len() as f64);
        let mut acc = T::zero();
        for (&pv, &tv) in p.data().iter().zip(target.data()) {
            acc = acc + bce_term(pv, tv);
        }
        let out = Tensor::scalar(acc / n);
        Ok(self.push(OpKind::Bce { pred, target }, out))
    }

    /// Reverse accumulation from a scalar root. After this call every
    /// value that influenced the root has a gradient; leaves that did
    /// not participate read back as zeros.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got {:?}", self.values[root.0].shape()),
            ));
        }
        self.grads = vec![None; self.values.len()];
        self.grads[root.0] = Some(Tensor::scalar(T::one()));
        let Tape {
            values, ops, grads, ..
        } = self;
        for op in ops.iter().rev() {
            let Some(dout) = grads[op.out.0].clone() else {
                continue; // not on the path to the root
            };
            backward_op(values, grads, op, &dout);
        }
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `id`, or
    /// None if backward has not run / the value was off-path.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like `grad` but off-path values yield explicit zeros.
    pub fn grad_or_zeros(&self, id: ValueId) -> Tensor<T> {
        match self.grad(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.values[id.0].shape().to_vec()),
        }
    }
}

fn bce_term<T: Element>(pred: T, target: T) -> T {
    let eps = T::from_f64_lossy(BCE_EPS);
    let p = pred.max(eps).min(T::one() - eps);
    -(target * p.ln() + (T::one() - target) * (T::one() - p).ln())
}

// ---------------------------------------------------------------------------
// forward kernels

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s0 = T::zero();
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    let mut s3 = T::zero();
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        s0 = s0 + ca[0] * cb[0];
        s1 = s1 + ca[1] * cb[1];
        s2 = s2 + ca[2] * cb[2];
        s3 = s3 + ca[3] * cb[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (&x, &y) in ia.remainder().iter().zip(ib.remainder()) {
        s = s + x * y;
    }
    s
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
}

fn conv_dims<T: Element>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<ConvDims> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("rank-3 input required, got {:?}", input.shape()),
        ));
    }
    if kernels.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("rank-4 kernels required, got {:?}", kernels.shape()),
        ));
    }
    let (h, w, cin) = input.dims3();
    let ks = kernels.shape();
    let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernels expect {kcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel dims must be odd, got {kh}x{kw}"),
        ));
    }
    Ok(ConvDims {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
        ph: (kh - 1) / 2,
        pw: (kw - 1) / 2,
    })
}

/// Kernel repacked as [co][dy][dx][ci] so the innermost products run over
/// contiguous slices of both operands.
fn pack_kernels<T: Element>(kernels: &Tensor<T>, d: &ConvDims) -> Vec<T> {
    let kd = kernels.data();
    let mut packed = vec![T::zero(); kd.len()];
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let src = ((co * d.cin + ci) * d.kh + dy) * d.kw + dx;
                    let dst = ((co * d.kh + dy) * d.kw + dx) * d.cin + ci;
                    packed[dst] = kd[src];
                }
            }
        }
    }
    packed
}

fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), d.cout),
            ));
        }
    }
    let packed = pack_kernels(kernels, &d);
    let ind = input.data();
    let mut out = vec![T::zero(); d.h * d.w * d.cout];
    for co in 0..d.cout {
        let b = bias.map_or(T::zero(), |b| b.data()[co]);
        let kbase = co * d.kh * d.kw * d.cin;
        for y in 0..d.h {
            let dy_lo = d.ph.saturating_sub(y);
            let dy_hi = d.kh.min(d.h + d.ph - y);
            for x in 0..d.w {
                let dx_lo = d.pw.saturating_sub(x);
                let dx_hi = d.kw.min(d.w + d.pw - x);
                let mut acc = b;
                for dy in dy_lo..dy_hi {
                    let iny = y + dy - d.ph;
                    for dx in dx_lo..dx_hi {
                        let inx = x + dx - d.pw;
                        let ib = (iny * d.w + inx) * d.cin;
                        let kb = kbase + (dy * d.kw + dx) * d.cin;
                        acc = acc + dot(&ind[ib..ib + d.cin], &packed[kb..kb + d.cin]);
                    }
                }
                out[(y * d.w + x) * d.cout + co] = acc;
            }
        }
    }
    Tensor::new(vec![d.h, d.w, d.cout], out)
}

fn affine_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if input.rank() != 1 {
        return Err(Error::shape(
            "affine",
            format!("rank-1 input required, got {:?}", input.shape()),
        ));
    }
    if weight.rank() != 2 {
        return Err(Error::shape(
            "affine",
            format!("rank-2 weight required, got {:?}", weight.shape()),
        ));
    }
    let m = input.len();
    let (wm, p) = (weight.shape()[0], weight.shape()[1]);
    if wm != m {
        return Err(Error::shape(
            "affine",
            format!("input length {m}, weight rows {wm}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [p] {
            return Err(Error::shape(
                "affine",
                format!("bias {:?} for {p} outputs", b.shape()),
            ));
        }
    }
    let mut out = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![T::zero(); p],
    };
    let wd = weight.data();
    for (i, &v) in input.data().iter().enumerate() {
        if v != T::zero() {
            axpy(v, &wd[i * p..(i + 1) * p], &mut out);
        }
    }
    Tensor::new(vec![p], out)
}

fn global_avg_pool_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("rank-3 input required, got {:?}", input.shape()),
        ));
    }
    let (h, w, c) = input.dims3();
    let mut acc = vec![T::zero(); c];
    for p in 0..h * w {
        axpy(T::one(), &input.data()[p * c..(p + 1) * c], &mut acc);
    }
    let inv = T::one() / T::from_f64_lossy((h * w) as f64);
    for v in &mut acc {
        *v = *v * inv;
    }
    Tensor::new(vec![c], acc)
}

fn max_pool2_forward<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "max_pool2",
            format!("rank-3 input required, got {:?}", input.shape()),
        ));
    }
    let (h, w, c) = input.dims3();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "max_pool2",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let ind = input.data();
    let mut out = vec![T::zero(); oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = ind[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if ind[idx] > best {
                        best = ind[idx];
                        best_idx = idx;
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, argmax))
}

// ---------------------------------------------------------------------------
// backward

fn ensure_grad<'a, T: Element>(
    values: &[Tensor<T>],
    grads: &'a mut [Option<Tensor<T>>],
    id: ValueId,
) -> &'a mut Tensor<T> {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(values[id.0].shape().to_vec()));
    }
    slot.as_mut().unwrap()
}

fn backward_op<T: Element>(
    values: &[Tensor<T>],
    grads: &mut [Option<Tensor<T>>],
    op: &OpRecord<T>,
    dout: &Tensor<T>,
) {
    match &op.kind {
        OpKind::Conv2d {
            input,
            kernels,
            bias,
        } => {
            let d = conv_dims(&values[input.0], &values[kernels.0]).expect("validated at forward");
            let ind = values[input.0].data().to_vec();
            let packed = pack_kernels(&values[kernels.0], &d);
            let dd = dout.data();

            if let Some(b) = bias {
                let db = ensure_grad(values, grads, *b).data_mut();
                for p in 0..d.h * d.w {
                    axpy(T::one(), &dd[p * d.cout..(p + 1) * d.cout], db);
                }
            }

            // dL/dkernels, accumulated in packed layout then scattered back
            let mut dk_packed = vec![T::zero(); packed.len()];
            {
                for co in 0..d.cout {
                    let kbase = co * d.kh * d.kw * d.cin;
                    for y in 0..d.h {
                        let dy_lo = d.ph.saturating_sub(y);
                        let dy_hi = d.kh.min(d.h + d.ph - y);
                        for x in 0..d.w {
                            let g = dd[(y * d.w + x) * d.cout + co];
                            if g == T::zero() {
                                continue;
                            }
                            let dx_lo = d.pw.saturating_sub(x);
                            let dx_hi = d.kw.min(d.w + d.pw - x);
                            for dy in dy_lo..dy_hi {
                                let iny = y + dy - d.ph;
                                for dx in dx_lo..dx_hi {
                                    let inx = x + dx - d.pw;
                                    let ib = (iny * d.w + inx) * d.cin;
                                    let kb = kbase + (dy * d.kw + dx) * d.cin;
                                    axpy(g, &ind[ib..ib + d.cin], &mut dk_packed[kb..kb + d.cin]);
                                }
                            }
                        }
                    }
                }
                let dk = ensure_grad(values, grads, *kernels).data_mut();
                for co in 0..d.cout {
                    for ci in 0..d.cin {
                        for dy in 0..d.kh {
                            for dx in 0..d.kw {
                                let dst = ((co * d.cin + ci) * d.kh + dy) * d.kw + dx;
                                let src = ((co * d.kh + dy) * d.kw + dx) * d.cin + ci;
                                dk[dst] = dk[dst] + dk_packed[src];
                            }
                        }
                    }
                }
            }

            let din = ensure_grad(values, grads, *input).data_mut();
            for co in 0..d.cout {
                let kbase = co * d.kh * d.kw * d.cin;
                for y in 0..d.h {
                    let dy_lo = d.ph.saturating_sub(y);
                    let dy_hi = d.kh.min(d.h + d.ph - y);
                    for x in 0..d.w {
                        let g = dd[(y * d.w + x) * d.cout + co];
                        if g == T::zero() {
                            continue;
                        }
                        let dx_lo = d.pw.saturating_sub(x);
                        let dx_hi = d.kw.min(d.w + d.pw - x);
                        for dy in dy_lo..dy_hi {
                            let iny = y + dy - d.ph;
                            for dx in dx_lo..dx_hi {
                                let inx = x + dx - d.pw;
                                let ib = (iny * d.w + inx) * d.cin;
                                let kb = kbase + (dy * d.kw + dx) * d.cin;
                                axpy(g, &packed[kb..kb + d.cin], &mut din[ib..ib + d.cin]);
                            }
                        }
                    }
                }
            }
        }
        OpKind::Affine {
            input,
            weight,
            bias,
        } => {
            let inv = values[input.0].data().to_vec();
            let wd = values[weight.0].data().to_vec();
            let p = values[weight.0].shape()[1];
            let dd = dout.data();

            if let Some(b) = bias {
                axpy(
                    T::one(),
                    dd,
                    ensure_grad(values, grads, *b).data_mut(),
                );
            }
            {
                let dw = ensure_grad(values, grads, *weight).data_mut();
                for (i, &v) in inv.iter().enumerate() {
                    if v != T::zero() {
                        axpy(v, dd, &mut dw[i * p..(i + 1) * p]);
                    }
                }
            }
            let din = ensure_grad(values, grads, *input).data_mut();
            for (i, di) in din.iter_mut().enumerate() {
                *di = *di + dot(&wd[i * p..(i + 1) * p], dd);
            }
        }
        OpKind::Activation { input, kind } => {
            let outv = values[op.out.0].data().to_vec();
            let din = ensure_grad(values, grads, *input).data_mut();
            for ((di, &y), &g) in din.iter_mut().zip(&outv).zip(dout.data()) {
                *di = *di + g * kind.derivative_from_output(y);
            }
        }
        OpKind::GlobalAvgPool { input } => {
            let (h, w, c) = values[input.0].dims3();
            let inv = T::one() / T::from_f64_lossy((h * w) as f64);
            let din = ensure_grad(values, grads, *input).data_mut();
            for p in 0..h * w {
                axpy(inv, dout.data(), &mut din[p * c..(p + 1) * c]);
            }
        }
        OpKind::MaxPool2 { input, argmax } => {
            let din = ensure_grad(values, grads, *input).data_mut();
            for (o, &src) in argmax.iter().enumerate() {
                din[src] = din[src] + dout.data()[o];
            }
        }
        OpKind::Add { a, b } => {
            axpy(T::one(), dout.data(), ensure_grad(values, grads, *a).data_mut());
            axpy(T::one(), dout.data(), ensure_grad(values, grads, *b).data_mut());
        }
        OpKind::Mul { a, b } => {
            let av = values[a.0].data().to_vec();
            let bv = values[b.0].data().to_vec();
            {
                let da = ensure_grad(values, grads, *a).data_mut();
                for ((d, &bb), &g) in da.iter_mut().zip(&bv).zip(dout.data()) {
                    *d = *d + g * bb;
                }
            }
            let db = ensure_grad(values, grads, *b).data_mut();
            for ((d, &aa), &g) in db.iter_mut().zip(&av).zip(dout.data()) {
                *d = *d + g * aa;
            }
        }
        OpKind::Scale { input, factor } => {
            axpy(
                *factor,
                dout.data(),
                ensure_grad(values, grads, *input).data_mut(),
            );
        }
        OpKind::Concat { inputs } => {
            let mut offset = 0usize;
            for &id in inputs {
                let len = values[id.0].len();
                axpy(
                    T::one(),
                    &dout.data()[offset..offset + len],
                    ensure_grad(values, grads, id).data_mut(),
                );
                offset += len;
            }
        }
        OpKind::ChannelSlice { input, c0, c1 } => {
            let (h, w, c) = values[input.0].dims3();
            let cs = c1 - c0;
            let din = ensure_grad(values, grads, *input).data_mut();
            for p in 0..h * w {
                axpy(
                    T::one(),
                    &dout.data()[p * cs..(p + 1) * cs],
                    &mut din[p * c + c0..p * c + c1],
                );
            }
        }
        OpKind::ChannelScale { image, gains } => {
            let (h, w, c) = values[image.0].dims3();
            let imgv = values[image.0].data().to_vec();
            let gv = values[gains.0].data().to_vec();
            {
                let dimg = ensure_grad(values, grads, *image).data_mut();
                for p in 0..h * w {
                    let g = &dout.data()[p * c..(p + 1) * c];
                    let di = &mut dimg[p * c..(p + 1) * c];
                    for ((d, &z), &go) in di.iter_mut().zip(&gv).zip(g) {
                        *d = *d + go * z;
                    }
                }
            }
            let dg = ensure_grad(values, grads, *gains).data_mut();
            for p in 0..h * w {
                let g = &dout.data()[p * c..(p + 1) * c];
                let iv = &imgv[p * c..(p + 1) * c];
                for ((d, &v), &go) in dg.iter_mut().zip(iv).zip(g) {
                    *d = *d + go * v;
                }
            }
        }
        OpKind::Reshape { input } => {
            axpy(
                T::one(),
                dout.data(),
                ensure_grad(values, grads, *input).data_mut(),
            );
        }
        OpKind::SumAll { input } => {
            let g = dout.item();
            let din = ensure_grad(values, grads, *input).data_mut();
            for d in din.iter_mut() {
                *d = *d + g;
            }
        }
        OpKind::Bce { pred, target } => {
            let g = dout.item();
            let pv = values[pred.0].data().to_vec();
            let n = T::from_f64_lossy(pv.len() as f64);
            let eps = T::from_f64_lossy(BCE_EPS);
            let dp = ensure_grad(values, grads, *pred).data_mut();
            for ((d, &p), &t) in dp.iter_mut().zip(&pv).zip(target.data()) {
                let pc = p.max(eps).min(T::one() - eps);
                *d = *d + g * (pc - t) / (pc * (T::one() - pc)) / n;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

/// Per-coordinate relative errors from one finite-difference pass.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rel_errors: Vec<f64>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.rel_errors.is_empty() {
            return 1.0;
        }
        let ok = self.rel_errors.iter().filter(|&&e| e < tol).count();
        ok as f64 / self.rel_errors.len() as f64
    }
}

/// Check the tape gradient of a scalar-valued graph against central
/// differences at one point. Returns the max relative error
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(mut build: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    let report = grad_check_multi(
        |tape, ids| build(tape, ids[0]),
        std::slice::from_ref(point),
        epsilon,
        None,
    )?;
    Ok(report.max_rel_err)
}

/// Multi-input variant of `grad_check`. When `sample` is given as
/// (max_coords, seed), at most that many coordinates are checked,
/// chosen uniformly without replacement.
pub fn grad_check_multi<F>(
    mut build: F,
    points: &[Tensor<f64>],
    epsilon: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let eval = |pts: &[Tensor<f64>], build: &mut F| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = build(&mut tape, &ids)?;
        let y = tape.value(root).item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad check forward value".into()));
        }
        tape.backward(root)?;
        let grads = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
        Ok((y, grads))
    };

    let (_, analytic) = eval(points, &mut build)?;
    for g in &analytic {
        if !g.all_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
    }

    // flat coordinate space over all inputs
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        for j in 0..p.len() {
            coords.push((i, j));
        }
    }
    let selected: Vec<(usize, usize)> = match sample {
        Some((max, seed)) if coords.len() > max => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, coords.len(), max)
                .iter()
                .map(|k| coords[k])
                .collect()
        }
        _ => coords,
    };

    let mut rel_errors = Vec::with_capacity(selected.len());
    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (i, j) in selected {
        let orig = work[i].data()[j];

        work[i].data_mut()[j] = orig + epsilon;
        let plus = forward_only(&work, &mut build)?;
        work[i].data_mut()[j] = orig - epsilon;
        let minus = forward_only(&work, &mut build)?;
        work[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite-difference quotient".into()));
        }
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
        rel_errors.push(rel);
    }
    Ok(GradCheckReport {
        rel_errors,
        max_rel_err: max_rel,
    })
}

fn forward_only<F>(points: &[Tensor<f64>], build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let y = tape.value(root).item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad check forward value".into()));
    }
    Ok(y)
}
