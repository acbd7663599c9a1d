//! Two-stage training. Stage 1 fits the backbone and its flat
//! multi-label head; stage 2 freezes the backbone and fits attention,
//! ConvLSTM, and prediction heads on the extracted features. Both
//! stages use Adam with bias correction, inverted dropout before the
//! heads, L2 on weight (not bias) tensors, flip/crop/noise
//! augmentation, and a drop-on-plateau learning-rate schedule.
//!
//! Batches are processed sample-parallel; gradients reduce in sample
//! order, so a fixed seed reproduces parameter trajectories bitwise
//! regardless of thread count.

use crate::backbone::{
    extract_features, extract_features_tensor, stage1_logits, BackboneConfig, BackboneIds,
    BackboneParams,
};
use crate::cells::ParamKind;
use crate::dataio::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{rollout, HeadInit, HeadMode, LabelOrder, Stage2Ids, WeatherModel};
use crate::tape::{Activation, Tape, ValueId};
use crate::tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::time::Instant;

/// Optimization and augmentation settings shared by both stages.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub lr_drop_factor: f64,
    /// Epochs of non-improving validation loss before an LR drop.
    pub lr_patience: usize,
    /// Validation loss must improve by at least this much to reset the
    /// patience counter.
    pub min_improvement: f64,
    pub max_lr_drops: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.5,
            l2: 5e-4,
            batch_size: 50,
            lr_drop_factor: 10.0,
            lr_patience: 5,
            min_improvement: 1e-4,
            max_lr_drops: 2,
            max_epochs: 30,
            seed: 0,
            noise_sigma: 0.01,
            flip_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One CSV row of the training log.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_ms
        ));
    }
    out
}

/// Splitmix64-style seed derivation so every (epoch, sample, purpose)
/// tuple gets an independent deterministic stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut state = splitmix(base);
    for &t in tags {
        state = splitmix(state ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    state
}

// ---------------------------------------------------------------------------
// Adam

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Element> AdamState<T> {
    pub fn zeros_like(param: &Tensor<T>) -> Self {
        AdamState {
            m: Tensor::zeros(param.shape().to_vec()),
            v: Tensor::zeros(param.shape().to_vec()),
        }
    }
}

/// One Adam update with bias correction. `step` is the 1-based step
/// counter after incrementing.
pub fn adam_update<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            "adam_update",
            format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient in adam_update".into()));
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let eps = T::from_f64_lossy(cfg.adam_eps);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let lr_t = T::from_f64_lossy(lr);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over an ordered parameter list.
pub struct Adam<T> {
    states: Vec<AdamState<T>>,
    pub step: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &[(String, &mut Tensor<T>, ParamKind)]) -> Self {
        Adam {
            states: params.iter().map(|(_, p, _)| AdamState::zeros_like(p)).collect(),
            step: 0,
        }
    }

    pub fn apply(
        &mut self,
        params: &mut [(String, &mut Tensor<T>, ParamKind)],
        grads: &[Tensor<T>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        for (i, (name, param, _)) in params.iter_mut().enumerate() {
            adam_update(param, &grads[i], &mut self.states[i], self.step, lr, cfg)
                .map_err(|e| Error::NonFinite(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// augmentation

/// Random horizontal flip, random crop to `crop`×`crop`, and additive
/// Gaussian noise clamped back to [0, 1].
pub fn augment<T: Element>(
    image: &Tensor<T>,
    crop: usize,
    flip_prob: f64,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3();
    if crop > h || crop > w {
        return Err(Error::invalid(
            "augment",
            format!("crop {crop} exceeds image {h}x{w}"),
        ));
    }
    let flip = flip_prob > 0.0 && rng.random_bool(flip_prob);
    let oy = if h > crop { rng.random_range(0..=h - crop) } else { 0 };
    let ox = if w > crop { rng.random_range(0..=w - crop) } else { 0 };
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|_| Error::invalid("augment", "bad sigma"))?)
    } else {
        None
    };

    let mut out = Tensor::zeros(vec![crop, crop, c]);
    for y in 0..crop {
        for x in 0..crop {
            let sx = if flip { w - 1 - (ox + x) } else { ox + x };
            for ch in 0..c {
                let mut v = image.at3(oy + y, sx, ch).to_f64_lossy();
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                out.data_mut()[(y * crop + x) * c + ch] =
                    T::from_f64_lossy(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// The contract-default augmentation: 256×256 in, 224×224 out, flip
/// probability 0.5, noise sigma 0.01.
pub fn augment_default<T: Element>(image: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    augment(image, 224, 0.5, 0.01, rng)
}

/// Deterministic central crop used at evaluation time.
pub fn center_crop<T: Element>(image: &Tensor<T>, crop: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3();
    if crop > h || crop > w {
        return Err(Error::invalid(
            "center_crop",
            format!("crop {crop} exceeds image {h}x{w}"),
        ));
    }
    let (oy, ox) = ((h - crop) / 2, (w - crop) / 2);
    let mut out = Tensor::zeros(vec![crop, crop, c]);
    for y in 0..crop {
        for x in 0..crop {
            for ch in 0..c {
                out.data_mut()[(y * crop + x) * c + ch] = image.at3(oy + y, ox + x, ch);
            }
        }
    }
    Ok(out)
}

/// Inverted-dropout mask: kept units scale by 1/(1-rate) so inference
/// needs no correction.
pub fn dropout_mask<T: Element>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let keep = 1.0 - rate;
    let scale = T::from_f64_lossy(1.0 / keep);
    Tensor::from_fn(vec![len], |_| {
        if rng.random_bool(keep) {
            scale
        } else {
            T::zero()
        }
    })
}

// ---------------------------------------------------------------------------
// shared loop machinery

struct LrSchedule {
    lr: f64,
    best: f64,
    stale: usize,
    drops: usize,
}

impl LrSchedule {
    fn new(lr: f64) -> Self {
        LrSchedule {
            lr,
            best: f64::INFINITY,
            stale: 0,
            drops: 0,
        }
    }

    fn observe(&mut self, val_loss: f64, cfg: &TrainConfig) {
        if val_loss < self.best - cfg.min_improvement {
            self.best = val_loss;
            self.stale = 0;
            return;
        }
        self.stale += 1;
        if self.stale >= cfg.lr_patience && self.drops < cfg.max_lr_drops {
            self.lr /= cfg.lr_drop_factor;
            self.drops += 1;
            self.stale = 0;
        }
    }
}

/// Average per-sample gradients (already summed in order) and add the
/// L2 term 2*lambda*w on weight tensors.
fn finalize_grads<T: Element>(
    grad_sum: &mut [Tensor<T>],
    batch_len: usize,
    params: &[(String, &mut Tensor<T>, ParamKind)],
    l2: f64,
) {
    let inv = T::from_f64_lossy(1.0 / batch_len as f64);
    let lam2 = T::from_f64_lossy(2.0 * l2);
    for (g, (_, p, kind)) in grad_sum.iter_mut().zip(params) {
        for gv in g.data_mut() {
            *gv = *gv * inv;
        }
        if l2 > 0.0 && *kind == ParamKind::Weight {
            for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                *gv = *gv + lam2 * pv;
            }
        }
    }
}

fn accumulate<T: Element>(grad_sum: &mut Vec<Tensor<T>>, grads: Vec<Tensor<T>>) {
    if grad_sum.is_empty() {
        *grad_sum = grads;
        return;
    }
    for (acc, g) in grad_sum.iter_mut().zip(grads) {
        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
            *a = *a + b;
        }
    }
}

// ---------------------------------------------------------------------------
// stage 1

const STREAM_STAGE1: u64 = 1;
const STREAM_STAGE2: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_INIT: u64 = 4;

fn stage1_pass<T: Element>(
    params: &BackboneParams<T>,
    bc: &BackboneConfig,
    tc: &TrainConfig,
    sample: &Sample<T>,
    epoch: usize,
    sample_idx: usize,
    train_mode: bool,
) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        tc.seed,
        &[STREAM_STAGE1, epoch as u64, sample_idx as u64],
    ));
    let image = if train_mode {
        augment(&sample.image, bc.input_size, tc.flip_prob, tc.noise_sigma, &mut rng)?
    } else {
        center_crop(&sample.image, bc.input_size)?
    };

    let mut tape = Tape::new();
    let ids = BackboneIds::register(&mut tape, params);
    let img = tape.leaf(image);
    let feats = extract_features(&mut tape, img, &ids, bc)?;
    let mask = if train_mode && tc.dropout > 0.0 {
        Some(tape.leaf(dropout_mask(bc.feature_len(), tc.dropout, &mut rng)))
    } else {
        None
    };
    let logits = stage1_logits(&mut tape, feats, &ids, mask)?;
    let probs = tape.activation(logits, Activation::Sigmoid);
    let target = Tensor::new(
        vec![sample.labels.len()],
        sample
            .labels
            .iter()
            .map(|&l| T::from_f64_lossy(l as f64))
            .collect(),
    )?;
    let loss = tape.bce(probs, target)?;
    let loss_value = tape.value(loss).item().to_f64_lossy();

    if !train_mode {
        return Ok((loss_value, None));
    }
    tape.backward(loss)?;
    let grads = ids.flat().iter().map(|&id| tape.grad_or_zeros(id)).collect();
    Ok((loss_value, Some(grads)))
}

/// Train the backbone plus its T-neuron head with the multi-label
/// sigmoid cross-entropy loss. Returns the best-validation parameters
/// and the per-epoch log.
pub fn train_stage1<T: Element>(
    train: &Dataset<T>,
    val: &Dataset<T>,
    bc: &BackboneConfig,
    tc: &TrainConfig,
) -> Result<(BackboneParams<T>, Vec<EpochLog>)> {
    tc.validate()?;
    bc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[STREAM_INIT, 1]));
    let mut params = BackboneParams::<T>::init(bc, train.classes.len(), &mut rng);
    if tc.max_epochs == 0 {
        return Ok((params, Vec::new()));
    }

    let mut optimizer = {
        let mut named = Vec::new();
        params.visit_mut("backbone", &mut named);
        Adam::new(&named)
    };
    let mut schedule = LrSchedule::new(tc.lr);
    let mut best: Option<(f64, BackboneParams<T>)> = None;
    let mut logs = Vec::new();

    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            tc.seed,
            &[STREAM_SHUFFLE, STREAM_STAGE1, epoch as u64],
        )));

        let mut epoch_loss = 0.0;
        for batch in indices.chunks(tc.batch_size) {
            let results: Vec<(f64, Option<Vec<Tensor<T>>>)> = batch
                .par_iter()
                .map(|&i| stage1_pass(&params, bc, tc, &train.samples[i], epoch, i, true))
                .collect::<Result<_>>()?;

            let mut grad_sum: Vec<Tensor<T>> = Vec::new();
            for (loss, grads) in results {
                epoch_loss += loss;
                accumulate(&mut grad_sum, grads.expect("train pass returns grads"));
            }
            let mut named = Vec::new();
            params.visit_mut("backbone", &mut named);
            finalize_grads(&mut grad_sum, batch.len(), &named, tc.l2);
            optimizer.apply(&mut named, &grad_sum, schedule.lr, tc)?;
        }
        let train_loss = epoch_loss / train.len() as f64;

        let val_loss = dataset_loss_stage1(&params, bc, tc, val, epoch)?;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
        }
        let lr_used = schedule.lr;
        schedule.observe(val_loss, tc);
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok((best.expect("at least one epoch ran").1, logs))
}

/// Mean stage-1 loss over a dataset in eval mode (center crop, no
/// dropout).
pub fn dataset_loss_stage1<T: Element>(
    params: &BackboneParams<T>,
    bc: &BackboneConfig,
    tc: &TrainConfig,
    data: &Dataset<T>,
    epoch: usize,
) -> Result<f64> {
    let losses: Vec<f64> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| stage1_pass(params, bc, tc, s, epoch, i, false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// ---------------------------------------------------------------------------
// stage 2

/// Stage-2 knobs beyond the shared `TrainConfig`.
#[derive(Clone, Debug)]
pub struct Stage2Options {
    pub kernel: usize,
    /// Hidden width of the attention gate; defaults to the feature
    /// channel count.
    pub attention_mid: Option<usize>,
    pub head_mode: HeadMode,
    pub head_init: HeadInit,
    /// Also update backbone parameters (off by default; kept for
    /// completeness, it has not shown gains).
    pub finetune_all: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            kernel: 3,
            attention_mid: None,
            head_mode: HeadMode::PerStep,
            head_init: HeadInit::Xavier,
            finetune_all: false,
        }
    }
}

fn stage2_pass<T: Element>(
    model: &WeatherModel<T>,
    tc: &TrainConfig,
    sample: &Sample<T>,
    epoch: usize,
    sample_idx: usize,
    train_mode: bool,
    finetune_all: bool,
) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
    let bc = &model.backbone_cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        tc.seed,
        &[STREAM_STAGE2, epoch as u64, sample_idx as u64],
    ));
    let image = if train_mode {
        augment(&sample.image, bc.input_size, tc.flip_prob, tc.noise_sigma, &mut rng)?
    } else {
        center_crop(&sample.image, bc.input_size)?
    };

    let mut tape = Tape::new();
    let backbone_ids = if finetune_all {
        Some(BackboneIds::register(&mut tape, &model.backbone))
    } else {
        None
    };
    let feats = match &backbone_ids {
        Some(ids) => {
            let img = tape.leaf(image);
            extract_features(&mut tape, img, ids, bc)?
        }
        None => {
            // frozen backbone: run it off-tape so no gradient flows back
            let f = extract_features_tensor(&model.backbone, bc, &image)?;
            tape.leaf(f)
        }
    };
    let stage2_ids = Stage2Ids::register(&mut tape, model);

    let t_steps = model.order.len();
    let masks: Option<Vec<ValueId>> = if train_mode && tc.dropout > 0.0 {
        Some(
            (0..t_steps)
                .map(|_| tape.leaf(dropout_mask(bc.feature_len(), tc.dropout, &mut rng)))
                .collect(),
        )
    } else {
        None
    };
    let roll = rollout(&mut tape, feats, model, &stage2_ids, masks.as_deref())?;

    let mut total: Option<ValueId> = None;
    for (t, &p) in roll.step_probs.iter().enumerate() {
        let label = sample.labels[model.order.at(t)];
        let l = tape.bce(p, Tensor::scalar(T::from_f64_lossy(label as f64)))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one step");
    let loss_value = tape.value(total).item().to_f64_lossy();

    if !train_mode {
        return Ok((loss_value, None));
    }
    tape.backward(total)?;
    let mut ids = stage2_ids.flat();
    if let Some(b) = &backbone_ids {
        ids.extend(b.flat());
    }
    let grads = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
    Ok((loss_value, Some(grads)))
}

fn stage2_named_params<T: Element>(
    model: &mut WeatherModel<T>,
    finetune_all: bool,
) -> Vec<(String, &mut Tensor<T>, ParamKind)> {
    let mut named = Vec::new();
    let WeatherModel {
        attention,
        cell,
        heads,
        backbone,
        ..
    } = model;
    attention.visit_mut("attention", &mut named);
    cell.visit_mut("cell", &mut named);
    for (i, h) in heads.iter_mut().enumerate() {
        named.push((format!("head{i}.w"), &mut h.w, ParamKind::Weight));
        named.push((format!("head{i}.b"), &mut h.b, ParamKind::Bias));
    }
    if finetune_all {
        backbone.visit_mut("backbone", &mut named);
    }
    named
}

/// Train attention + ConvLSTM + heads on top of a frozen backbone.
/// Returns the best-validation model and the per-epoch log.
pub fn train_stage2<T: Element>(
    train: &Dataset<T>,
    val: &Dataset<T>,
    bc: &BackboneConfig,
    backbone: BackboneParams<T>,
    order: LabelOrder,
    opts: &Stage2Options,
    tc: &TrainConfig,
) -> Result<(WeatherModel<T>, Vec<EpochLog>)> {
    tc.validate()?;
    bc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[STREAM_INIT, 2]));
    let mid = opts.attention_mid.unwrap_or_else(|| bc.feature_channels());
    let mut model = WeatherModel::new(
        bc.clone(),
        backbone,
        train.classes.clone(),
        order,
        opts.kernel,
        mid,
        opts.head_mode,
        opts.head_init,
        &mut rng,
    )?;
    if tc.max_epochs == 0 {
        return Ok((model, Vec::new()));
    }

    let mut optimizer = Adam::new(&stage2_named_params(&mut model, opts.finetune_all));
    let mut schedule = LrSchedule::new(tc.lr);
    let mut best: Option<(f64, WeatherModel<T>)> = None;
    let mut logs = Vec::new();

    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            tc.seed,
            &[STREAM_SHUFFLE, STREAM_STAGE2, epoch as u64],
        )));

        let mut epoch_loss = 0.0;
        for batch in indices.chunks(tc.batch_size) {
            let results: Vec<(f64, Option<Vec<Tensor<T>>>)> = batch
                .par_iter()
                .map(|&i| {
                    stage2_pass(&model, tc, &train.samples[i], epoch, i, true, opts.finetune_all)
                })
                .collect::<Result<_>>()?;

            let mut grad_sum: Vec<Tensor<T>> = Vec::new();
            for (loss, grads) in results {
                epoch_loss += loss;
                accumulate(&mut grad_sum, grads.expect("train pass returns grads"));
            }
            let mut named = stage2_named_params(&mut model, opts.finetune_all);
            finalize_grads(&mut grad_sum, batch.len(), &named, tc.l2);
            optimizer.apply(&mut named, &grad_sum, schedule.lr, tc)?;
        }
        let train_loss = epoch_loss / train.len() as f64;

        let val_loss = dataset_loss_stage2(&model, tc, val, epoch)?;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
        }
        let lr_used = schedule.lr;
        schedule.observe(val_loss, tc);
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok((best.expect("at least one epoch ran").1, logs))
}

/// Mean total (summed-over-steps) loss over a dataset in eval mode.
pub fn dataset_loss_stage2<T: Element>(
    model: &WeatherModel<T>,
    tc: &TrainConfig,
    data: &Dataset<T>,
    epoch: usize,
) -> Result<f64> {
    let losses: Vec<f64> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| stage2_pass(model, tc, s, epoch, i, false, false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
