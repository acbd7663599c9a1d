//! Recurrent cells: the fully connected LSTM baseline and the ConvLSTM
//! whose input-to-state and state-to-state transforms are convolutions.
//!
//! Gate order everywhere is (input, forget, output, candidate). The four
//! gates of the ConvLSTM are evaluated as one fused convolution with
//! 4*C_h output channels and then split per gate; the fusion happens on
//! the tape (kernel concat), so gradients land back on the per-gate
//! parameters.

use crate::error::{Error, Result};
use crate::tape::{Activation, Tape, ValueId};
use crate::tensor::{xavier_uniform, Element, Tensor};
use rand::Rng;

pub const GATES: usize = 4;
pub const GATE_NAMES: [&str; GATES] = ["i", "f", "o", "g"];

/// Whether a parameter participates in L2 regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Fully connected LSTM parameters; per gate: input map W (D_in×D_h),
/// recurrent map U (D_h×D_h), bias (D_h).
#[derive(Clone, Debug)]
pub struct FcLstmParams<T> {
    pub w: [Tensor<T>; GATES],
    pub u: [Tensor<T>; GATES],
    pub b: [Tensor<T>; GATES],
}

impl<T: Element> FcLstmParams<T> {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        FcLstmParams {
            w: std::array::from_fn(|_| Tensor::zeros(vec![d_in, d_h])),
            u: std::array::from_fn(|_| Tensor::zeros(vec![d_h, d_h])),
            b: std::array::from_fn(|_| Tensor::zeros(vec![d_h])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w[0].shape()[1]
    }
}

/// ConvLSTM parameters; per gate: input kernel W (C_h×C_in×k×k),
/// recurrent kernel U (C_h×C_h×k×k), bias (C_h).
#[derive(Clone, Debug)]
pub struct ConvLstmParams<T> {
    pub w: [Tensor<T>; GATES],
    pub u: [Tensor<T>; GATES],
    pub b: [Tensor<T>; GATES],
}

impl<T: Element> ConvLstmParams<T> {
    pub fn zeros(c_in: usize, c_h: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        ConvLstmParams {
            w: std::array::from_fn(|_| Tensor::zeros(vec![c_h, c_in, k, k])),
            u: std::array::from_fn(|_| Tensor::zeros(vec![c_h, c_h, k, k])),
            b: std::array::from_fn(|_| Tensor::zeros(vec![c_h])),
        }
    }

    /// Xavier-initialized kernels, zero biases; the forget-gate bias is
    /// set to one by default to ease gradient flow early in training.
    pub fn init(
        c_in: usize,
        c_h: usize,
        k: usize,
        forget_bias_one: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let mut p = Self::zeros(c_in, c_h, k);
        for g in 0..GATES {
            p.w[g] = xavier_uniform(vec![c_h, c_in, k, k], c_in * k * k, c_h * k * k, rng);
            p.u[g] = xavier_uniform(vec![c_h, c_h, k, k], c_h * k * k, c_h * k * k, rng);
        }
        if forget_bias_one {
            p.b[1] = Tensor::filled(vec![c_h], T::one());
        }
        p
    }

    pub fn in_channels(&self) -> usize {
        self.w[0].shape()[1]
    }

    pub fn hidden_channels(&self) -> usize {
        self.w[0].shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w[0].shape()[2]
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>, ParamKind)>) {
        for g in 0..GATES {
            out.push((
                format!("{prefix}.w_{}", GATE_NAMES[g]),
                &self.w[g],
                ParamKind::Weight,
            ));
            out.push((
                format!("{prefix}.u_{}", GATE_NAMES[g]),
                &self.u[g],
                ParamKind::Weight,
            ));
            out.push((
                format!("{prefix}.b_{}", GATE_NAMES[g]),
                &self.b[g],
                ParamKind::Bias,
            ));
        }
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>, ParamKind)>,
    ) {
        for (g, (w, (u, b))) in self
            .w
            .iter_mut()
            .zip(self.u.iter_mut().zip(self.b.iter_mut()))
            .enumerate()
        {
            out.push((format!("{prefix}.w_{}", GATE_NAMES[g]), w, ParamKind::Weight));
            out.push((format!("{prefix}.u_{}", GATE_NAMES[g]), u, ParamKind::Weight));
            out.push((format!("{prefix}.b_{}", GATE_NAMES[g]), b, ParamKind::Bias));
        }
    }
}

/// Carried ConvLSTM state: hidden and cell maps of identical H×W×C_h shape.
#[derive(Clone, Debug)]
pub struct ConvLstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

/// All-zeros initial state for the first prediction step.
pub fn zero_state<T: Element>(h: usize, w: usize, c_h: usize) -> ConvLstmState<T> {
    ConvLstmState {
        h: Tensor::zeros(vec![h, w, c_h]),
        c: Tensor::zeros(vec![h, w, c_h]),
    }
}

/// Tape-registered ConvLSTM parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmIds {
    pub w: [ValueId; GATES],
    pub u: [ValueId; GATES],
    pub b: [ValueId; GATES],
}

impl ConvLstmIds {
    pub fn register<T: Element>(tape: &mut Tape<T>, params: &ConvLstmParams<T>) -> Self {
        ConvLstmIds {
            w: std::array::from_fn(|g| tape.leaf(params.w[g].clone())),
            u: std::array::from_fn(|g| tape.leaf(params.u[g].clone())),
            b: std::array::from_fn(|g| tape.leaf(params.b[g].clone())),
        }
    }

    /// Ids in the same order `ConvLstmParams::visit` walks the tensors.
    pub fn flat(&self) -> Vec<ValueId> {
        let mut v = Vec::with_capacity(3 * GATES);
        for g in 0..GATES {
            v.push(self.w[g]);
            v.push(self.u[g]);
            v.push(self.b[g]);
        }
        v
    }
}

/// Tape-registered FC-LSTM parameters.
#[derive(Clone, Copy, Debug)]
pub struct FcLstmIds {
    pub w: [ValueId; GATES],
    pub u: [ValueId; GATES],
    pub b: [ValueId; GATES],
}

impl FcLstmIds {
    pub fn register<T: Element>(tape: &mut Tape<T>, params: &FcLstmParams<T>) -> Self {
        FcLstmIds {
            w: std::array::from_fn(|g| tape.leaf(params.w[g].clone())),
            u: std::array::from_fn(|g| tape.leaf(params.u[g].clone())),
            b: std::array::from_fn(|g| tape.leaf(params.b[g].clone())),
        }
    }
}

struct Gates {
    i: ValueId,
    f: ValueId,
    o: ValueId,
    g: ValueId,
}

fn combine<T: Element>(
    tape: &mut Tape<T>,
    gates: Gates,
    c_prev: ValueId,
) -> Result<(ValueId, ValueId)> {
    let fc = tape.mul(gates.f, c_prev)?;
    let ig = tape.mul(gates.i, gates.g)?;
    let c_new = tape.add(fc, ig)?;
    let c_tanh = tape.activation(c_new, Activation::Tanh);
    let h_new = tape.mul(gates.o, c_tanh)?;
    Ok((h_new, c_new))
}

fn fc_gates<T: Element>(
    tape: &mut Tape<T>,
    x: ValueId,
    h_prev: ValueId,
    ids: &FcLstmIds,
) -> Result<Gates> {
    let mut pre = [None; GATES];
    for g in 0..GATES {
        let xin = tape.affine(x, ids.w[g], ids.b[g])?;
        let hin = tape.affine_opt(h_prev, ids.u[g], None)?;
        pre[g] = Some(tape.add(xin, hin)?);
    }
    let pre = pre.map(Option::unwrap);
    Ok(Gates {
        i: tape.activation(pre[0], Activation::Sigmoid),
        f: tape.activation(pre[1], Activation::Sigmoid),
        o: tape.activation(pre[2], Activation::Sigmoid),
        g: tape.activation(pre[3], Activation::Tanh),
    })
}

/// One FC-LSTM step: gate activations from affine maps, then
/// c' = f∘c + i∘g and h' = o∘tanh(c').
pub fn fc_lstm_step<T: Element>(
    tape: &mut Tape<T>,
    x: ValueId,
    state: (ValueId, ValueId),
    ids: &FcLstmIds,
) -> Result<(ValueId, ValueId)> {
    let (h_prev, c_prev) = state;
    if tape.value(h_prev).shape() != tape.value(c_prev).shape() {
        return Err(Error::shape(
            "fc_lstm_step",
            format!(
                "h {:?} vs c {:?}",
                tape.value(h_prev).shape(),
                tape.value(c_prev).shape()
            ),
        ));
    }
    let gates = fc_gates(tape, x, h_prev, ids)?;
    combine(tape, gates, c_prev)
}

fn conv_gates<T: Element>(
    tape: &mut Tape<T>,
    x: ValueId,
    h_prev: ValueId,
    ids: &ConvLstmIds,
) -> Result<Gates> {
    let c_h = tape.value(ids.w[0]).shape()[0];
    // fused 4*C_h-channel convolution, split per gate below
    let wcat = tape.concat(&ids.w)?;
    let ucat = tape.concat(&ids.u)?;
    let bcat = tape.concat(&ids.b)?;
    let from_x = tape.conv2d(x, wcat, bcat)?;
    let from_h = tape.conv2d_opt(h_prev, ucat, None)?;
    let pre = tape.add(from_x, from_h)?;
    let mut slices = [None; GATES];
    for g in 0..GATES {
        slices[g] = Some(tape.channel_slice(pre, g * c_h, (g + 1) * c_h)?);
    }
    let s = slices.map(Option::unwrap);
    Ok(Gates {
        i: tape.activation(s[0], Activation::Sigmoid),
        f: tape.activation(s[1], Activation::Sigmoid),
        o: tape.activation(s[2], Activation::Sigmoid),
        g: tape.activation(s[3], Activation::Tanh),
    })
}

/// One ConvLSTM step. Input and state must share spatial dims; the
/// output state has exactly the input state's shape.
pub fn conv_lstm_step<T: Element>(
    tape: &mut Tape<T>,
    x: ValueId,
    state: (ValueId, ValueId),
    ids: &ConvLstmIds,
) -> Result<(ValueId, ValueId)> {
    let (h_prev, c_prev) = state;
    let xs = tape.value(x).shape().to_vec();
    let hs = tape.value(h_prev).shape().to_vec();
    if tape.value(c_prev).shape() != hs.as_slice() {
        return Err(Error::shape(
            "conv_lstm_step",
            format!("h {:?} vs c {:?}", hs, tape.value(c_prev).shape()),
        ));
    }
    if xs.len() != 3 || hs.len() != 3 || xs[..2] != hs[..2] {
        return Err(Error::shape(
            "conv_lstm_step",
            format!("input {xs:?} vs state {hs:?} spatial dims"),
        ));
    }
    let gates = conv_gates(tape, x, h_prev, ids)?;
    combine(tape, gates, c_prev)
}
