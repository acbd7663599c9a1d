//! Channel-wise attention: pooled statistics of the visual feature and
//! the previous hidden state gate a two-layer network whose sigmoid
//! output rescales each feature channel.

use crate::cells::ParamKind;
use crate::error::{Error, Result};
use crate::tape::{Activation, Tape, ValueId};
use crate::tensor::{xavier_uniform, Element, Tensor};
use rand::Rng;

/// Gating network parameters: w1 (2C×C_mid), b1 (C_mid), w2 (C_mid×C),
/// b2 (C).
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Element> AttentionParams<T> {
    pub fn zeros(channels: usize, mid: usize) -> Self {
        AttentionParams {
            w1: Tensor::zeros(vec![2 * channels, mid]),
            b1: Tensor::zeros(vec![mid]),
            w2: Tensor::zeros(vec![mid, channels]),
            b2: Tensor::zeros(vec![channels]),
        }
    }

    pub fn init(channels: usize, mid: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            w1: xavier_uniform(vec![2 * channels, mid], 2 * channels, mid, rng),
            b1: Tensor::zeros(vec![mid]),
            w2: xavier_uniform(vec![mid, channels], mid, channels, rng),
            b2: Tensor::zeros(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>, ParamKind)>) {
        out.push((format!("{prefix}.w1"), &self.w1, ParamKind::Weight));
        out.push((format!("{prefix}.b1"), &self.b1, ParamKind::Bias));
        out.push((format!("{prefix}.w2"), &self.w2, ParamKind::Weight));
        out.push((format!("{prefix}.b2"), &self.b2, ParamKind::Bias));
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>, ParamKind)>,
    ) {
        out.push((format!("{prefix}.w1"), &mut self.w1, ParamKind::Weight));
        out.push((format!("{prefix}.b1"), &mut self.b1, ParamKind::Bias));
        out.push((format!("{prefix}.w2"), &mut self.w2, ParamKind::Weight));
        out.push((format!("{prefix}.b2"), &mut self.b2, ParamKind::Bias));
    }
}

/// Tape-registered attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

impl AttentionIds {
    pub fn register<T: Element>(tape: &mut Tape<T>, params: &AttentionParams<T>) -> Self {
        AttentionIds {
            w1: tape.leaf(params.w1.clone()),
            b1: tape.leaf(params.b1.clone()),
            w2: tape.leaf(params.w2.clone()),
            b2: tape.leaf(params.b2.clone()),
        }
    }

    pub fn flat(&self) -> Vec<ValueId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Per-channel spatial means of the feature map and the previous hidden
/// state; both inputs must share their H×W×C shape.
pub fn channel_stats<T: Element>(
    tape: &mut Tape<T>,
    x: ValueId,
    h_prev: ValueId,
) -> Result<(ValueId, ValueId)> {
    if tape.value(x).shape() != tape.value(h_prev).shape() {
        return Err(Error::shape(
            "channel_stats",
            format!(
                "feature {:?} vs hidden {:?}",
                tape.value(x).shape(),
                tape.value(h_prev).shape()
            ),
        ));
    }
    let a = tape.global_avg_pool(x)?;
    let d = tape.global_avg_pool(h_prev)?;
    Ok((a, d))
}

/// z = sigmoid(w2·relu(w1·[a;d] + b1) + b2); every entry lies in (0, 1).
pub fn attention_weights<T: Element>(
    tape: &mut Tape<T>,
    a: ValueId,
    d: ValueId,
    ids: &AttentionIds,
) -> Result<ValueId> {
    let stats = tape.concat(&[a, d])?;
    let hidden = tape.affine(stats, ids.w1, ids.b1)?;
    let hidden = tape.activation(hidden, Activation::Relu);
    let pre = tape.affine(hidden, ids.w2, ids.b2)?;
    Ok(tape.activation(pre, Activation::Sigmoid))
}

/// Rescale each channel of x by its attention weight.
pub fn recalibrate<T: Element>(tape: &mut Tape<T>, x: ValueId, z: ValueId) -> Result<ValueId> {
    tape.channel_scale(x, z)
}

/// Full chain: stats from (x, h_prev), gating network, per-channel
/// rescale. Returns (x̃, z).
pub fn apply<T: Element>(
    tape: &mut Tape<T>,
    x: ValueId,
    h_prev: ValueId,
    ids: &AttentionIds,
) -> Result<(ValueId, ValueId)> {
    let (a, d) = channel_stats(tape, x, h_prev)?;
    let z = attention_weights(tape, a, d, ids)?;
    let xt = recalibrate(tape, x, z)?;
    Ok((xt, z))
}

/// The channel-collapsing variant x̃ = Σ_k z_k·x_k, kept for study only:
/// it reduces the map to a single channel and is not part of the model
/// path, which rescales channels without summing them.
pub fn recalibrate_collapsed<T: Element>(x: &Tensor<T>, z: &[T]) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "recalibrate_collapsed",
            format!("rank-3 input required, got {:?}", x.shape()),
        ));
    }
    let (h, w, c) = x.dims3();
    if z.len() != c {
        return Err(Error::shape(
            "recalibrate_collapsed",
            format!("{} gains for {c} channels", z.len()),
        ));
    }
    let mut out = Tensor::zeros(vec![h, w, 1]);
    for p in 0..h * w {
        let px = &x.data()[p * c..(p + 1) * c];
        out.data_mut()[p] = px
            .iter()
            .zip(z)
            .map(|(&v, &g)| v * g)
            .fold(T::zero(), |s, v| s + v);
    }
    Ok(out)
}
