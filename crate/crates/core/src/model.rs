//! The full recognizer: backbone features, channel-wise attention,
//! ConvLSTM recurrence, and a per-step sigmoid head emitting one label
//! probability per step. Steps follow a fixed label order; probabilities
//! are un-permuted back to canonical class order for reporting.

use crate::attention::{self, AttentionIds, AttentionParams};
use crate::backbone::{extract_features, BackboneConfig, BackboneIds, BackboneParams};
use crate::cells::{conv_lstm_step, ConvLstmIds, ConvLstmParams, ParamKind};
use crate::error::{Error, Result};
use crate::tape::{Activation, Tape, ValueId, BCE_EPS};
use crate::tensor::{xavier_uniform, Element, Tensor};
use rand::Rng;

/// One prediction head: w (flattened-hidden-length × 1) and scalar bias.
#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Element> HeadParams<T> {
    pub fn zeros(input_len: usize) -> Self {
        HeadParams {
            w: Tensor::zeros(vec![input_len, 1]),
            b: Tensor::zeros(vec![1]),
        }
    }

    pub fn init(input_len: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            w: xavier_uniform(vec![input_len, 1], input_len, 1, rng),
            b: Tensor::zeros(vec![1]),
        }
    }
}

/// Whether each step owns its head or all steps share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    PerStep,
    Shared,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::PerStep => "per-step",
            HeadMode::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(HeadMode::PerStep),
            "shared" => Ok(HeadMode::Shared),
            other => Err(Error::Config(format!("unknown head mode '{other}'"))),
        }
    }
}

/// How prediction heads start out; zero heads emit exactly 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    Xavier,
    Zeros,
}

/// Permutation of canonical class indices; `at(t)` is the class
/// predicted at step t. Fixed for the lifetime of a trained model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelOrder(Vec<usize>);

impl LabelOrder {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &i in &perm {
            if i >= n || seen[i] {
                return Err(Error::invalid(
                    "label_order",
                    format!("{perm:?} is not a permutation"),
                ));
            }
            seen[i] = true;
        }
        Ok(LabelOrder(perm))
    }

    pub fn identity(n: usize) -> Self {
        LabelOrder((0..n).collect())
    }

    /// Order given as class names, resolved against the canonical list.
    pub fn from_names(names: &[&str], classes: &[String]) -> Result<Self> {
        let mut perm = Vec::with_capacity(names.len());
        for name in names {
            let idx = classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("unknown class '{name}' in order")))?;
            perm.push(idx);
        }
        if perm.len() != classes.len() {
            return Err(Error::Config(format!(
                "order names {} classes, model has {}",
                perm.len(),
                classes.len()
            )));
        }
        Self::new(perm)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn at(&self, step: usize) -> usize {
        self.0[step]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn names<'a>(&self, classes: &'a [String]) -> Vec<&'a str> {
        self.0.iter().map(|&i| classes[i].as_str()).collect()
    }
}

/// Everything needed to run the recognizer.
#[derive(Clone, Debug)]
pub struct WeatherModel<T> {
    pub backbone_cfg: BackboneConfig,
    pub kernel: usize,
    pub head_mode: HeadMode,
    pub class_names: Vec<String>,
    pub order: LabelOrder,
    pub backbone: BackboneParams<T>,
    pub attention: AttentionParams<T>,
    pub cell: ConvLstmParams<T>,
    pub heads: Vec<HeadParams<T>>,
}

impl<T: Element> WeatherModel<T> {
    /// Fresh model around an already-trained (or fresh) backbone.
    /// Attention, cell, and heads are the stage-2 parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backbone_cfg: BackboneConfig,
        backbone: BackboneParams<T>,
        class_names: Vec<String>,
        order: LabelOrder,
        kernel: usize,
        attention_mid: usize,
        head_mode: HeadMode,
        head_init: HeadInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        backbone_cfg.validate()?;
        if order.len() != class_names.len() {
            return Err(Error::Config(format!(
                "order over {} classes, names list {}",
                order.len(),
                class_names.len()
            )));
        }
        let c = backbone_cfg.feature_channels();
        let head_in = backbone_cfg.feature_len();
        let head_count = match head_mode {
            HeadMode::PerStep => class_names.len(),
            HeadMode::Shared => 1,
        };
        let heads = (0..head_count)
            .map(|_| match head_init {
                HeadInit::Xavier => HeadParams::init(head_in, rng),
                HeadInit::Zeros => HeadParams::zeros(head_in),
            })
            .collect();
        Ok(WeatherModel {
            attention: AttentionParams::init(c, attention_mid, rng),
            cell: ConvLstmParams::init(c, c, kernel, true, rng),
            heads,
            backbone_cfg,
            kernel,
            head_mode,
            class_names,
            order,
            backbone,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn head_index(&self, step: usize) -> usize {
        match self.head_mode {
            HeadMode::PerStep => step,
            HeadMode::Shared => 0,
        }
    }

    /// Stage-2 parameters (everything but the backbone).
    pub fn visit_stage2<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>, ParamKind)>) {
        self.attention.visit("attention", out);
        self.cell.visit("cell", out);
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.w"), &h.w, ParamKind::Weight));
            out.push((format!("head{i}.b"), &h.b, ParamKind::Bias));
        }
    }

    pub fn visit_stage2_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<T>, ParamKind)>) {
        self.attention.visit_mut("attention", out);
        self.cell.visit_mut("cell", out);
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{i}.w"), &mut h.w, ParamKind::Weight));
            out.push((format!("head{i}.b"), &mut h.b, ParamKind::Bias));
        }
    }

    pub fn visit_all<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>, ParamKind)>) {
        self.backbone.visit("backbone", out);
        self.visit_stage2(out);
    }

    pub fn cast<U: Element>(&self) -> WeatherModel<U> {
        WeatherModel {
            backbone_cfg: self.backbone_cfg.clone(),
            kernel: self.kernel,
            head_mode: self.head_mode,
            class_names: self.class_names.clone(),
            order: self.order.clone(),
            backbone: BackboneParams {
                convs: self
                    .backbone
                    .convs
                    .iter()
                    .map(|l| crate::backbone::ConvLayer {
                        kernels: l.kernels.cast(),
                        bias: l.bias.cast(),
                    })
                    .collect(),
                head_w: self.backbone.head_w.cast(),
                head_b: self.backbone.head_b.cast(),
            },
            attention: AttentionParams {
                w1: self.attention.w1.cast(),
                b1: self.attention.b1.cast(),
                w2: self.attention.w2.cast(),
                b2: self.attention.b2.cast(),
            },
            cell: ConvLstmParams {
                w: std::array::from_fn(|g| self.cell.w[g].cast()),
                u: std::array::from_fn(|g| self.cell.u[g].cast()),
                b: std::array::from_fn(|g| self.cell.b[g].cast()),
            },
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    w: h.w.cast(),
                    b: h.b.cast(),
                })
                .collect(),
        }
    }
}

/// Tape-registered stage-2 parameters.
#[derive(Clone, Debug)]
pub struct Stage2Ids {
    pub attention: AttentionIds,
    pub cell: ConvLstmIds,
    pub heads: Vec<(ValueId, ValueId)>,
}

impl Stage2Ids {
    pub fn register<T: Element>(tape: &mut Tape<T>, model: &WeatherModel<T>) -> Self {
        Stage2Ids {
            attention: AttentionIds::register(tape, &model.attention),
            cell: ConvLstmIds::register(tape, &model.cell),
            heads: model
                .heads
                .iter()
                .map(|h| (tape.leaf(h.w.clone()), tape.leaf(h.b.clone())))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<ValueId> {
        let mut v = self.attention.flat();
        v.extend(self.cell.flat());
        for &(w, b) in &self.heads {
            v.push(w);
            v.push(b);
        }
        v
    }
}

/// One prediction step: recalibrate the features against the previous
/// hidden state, advance the ConvLSTM, and squash the flattened hidden
/// state to a probability. Returns (p_t, new state, z_t).
pub fn predict_step<T: Element>(
    tape: &mut Tape<T>,
    x: ValueId,
    state: (ValueId, ValueId),
    att: &AttentionIds,
    cell: &ConvLstmIds,
    head: (ValueId, ValueId),
    dropout_mask: Option<ValueId>,
) -> Result<(ValueId, (ValueId, ValueId), ValueId)> {
    let (xt, z) = attention::apply(tape, x, state.0, att)?;
    let new_state = conv_lstm_step(tape, xt, state, cell)?;
    let mut flat = tape.flatten(new_state.0)?;
    if let Some(mask) = dropout_mask {
        flat = tape.mul(flat, mask)?;
    }
    let pre = tape.affine(flat, head.0, head.1)?;
    let p = tape.activation(pre, Activation::Sigmoid);
    Ok((p, new_state, z))
}

/// Tape values produced by a full rollout.
pub struct Rollout {
    /// p_t per step, each a scalar value id.
    pub step_probs: Vec<ValueId>,
    /// z_t attention weights per step.
    pub step_attention: Vec<ValueId>,
    pub final_state: (ValueId, ValueId),
}

/// Run `steps` prediction steps from a zero state over a fixed feature
/// map. `dropout_masks`, when given, supplies one mask per step.
pub fn rollout<T: Element>(
    tape: &mut Tape<T>,
    features: ValueId,
    model: &WeatherModel<T>,
    ids: &Stage2Ids,
    dropout_masks: Option<&[ValueId]>,
) -> Result<Rollout> {
    let steps = model.order.len();
    if let Some(masks) = dropout_masks {
        if masks.len() != steps {
            return Err(Error::invalid(
                "rollout",
                format!("{} masks for {steps} steps", masks.len()),
            ));
        }
    }
    let fs = tape.value(features).shape().to_vec();
    if fs.len() != 3 {
        return Err(Error::shape(
            "rollout",
            format!("rank-3 features required, got {fs:?}"),
        ));
    }
    let c_h = model.cell.hidden_channels();
    let zero = crate::cells::zero_state::<T>(fs[0], fs[1], c_h);
    let mut state = (tape.leaf(zero.h), tape.leaf(zero.c));

    let mut step_probs = Vec::with_capacity(steps);
    let mut step_attention = Vec::with_capacity(steps);
    for t in 0..steps {
        let head = ids.heads[model.head_index(t)];
        let mask = dropout_masks.map(|m| m[t]);
        let (p, new_state, z) = predict_step(tape, features, state, &ids.attention, &ids.cell, head, mask)?;
        state = new_state;
        step_probs.push(p);
        step_attention.push(z);
    }
    Ok(Rollout {
        step_probs,
        step_attention,
        final_state: state,
    })
}

/// Inference output for a single image.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Per-class probability in canonical class order.
    pub probs: Vec<f64>,
    /// Thresholded labels (p >= 0.5 counts as present).
    pub labels: Vec<u8>,
    /// Raw p_t in prediction order.
    pub step_probs: Vec<f64>,
    /// Attention weights z_t per step.
    pub step_attention: Vec<Vec<f64>>,
}

pub const LABEL_THRESHOLD: f64 = 0.5;

/// Full inference: one backbone pass, then T prediction steps following
/// the model's label order; probabilities are mapped back to canonical
/// class positions and thresholded at 0.5 (ties count as present).
pub fn predict_labels<T: Element>(model: &WeatherModel<T>, image: &Tensor<T>) -> Result<Prediction> {
    let mut tape = Tape::new();
    let backbone_ids = BackboneIds::register(&mut tape, &model.backbone);
    let stage2_ids = Stage2Ids::register(&mut tape, model);
    let img = tape.leaf(image.clone());
    let feats = extract_features(&mut tape, img, &backbone_ids, &model.backbone_cfg)?;
    let roll = rollout(&mut tape, feats, model, &stage2_ids, None)?;

    let t_steps = model.order.len();
    let mut probs = vec![0.0f64; t_steps];
    let mut step_probs = Vec::with_capacity(t_steps);
    let mut step_attention = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let p = tape.value(roll.step_probs[t]).item().to_f64_lossy();
        probs[model.order.at(t)] = p;
        step_probs.push(p);
        step_attention.push(
            tape.value(roll.step_attention[t])
                .data()
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect(),
        );
    }
    let labels = probs
        .iter()
        .map(|&p| u8::from(p >= LABEL_THRESHOLD))
        .collect();
    Ok(Prediction {
        probs,
        labels,
        step_probs,
        step_attention,
    })
}

/// Mean binary cross-entropy over a batch of predictions for one step;
/// probabilities are clamped to [1e-7, 1-1e-7] before the logs.
pub fn step_loss<T: Element>(pred: &[T], truth: &[T]) -> T {
    assert_eq!(pred.len(), truth.len(), "step_loss batch sizes differ");
    assert!(!pred.is_empty(), "step_loss over empty batch");
    let eps = T::from_f64_lossy(BCE_EPS);
    let mut acc = T::zero();
    for (&p, &t) in pred.iter().zip(truth) {
        let pc = p.max(eps).min(T::one() - eps);
        acc = acc - (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
    }
    acc / T::from_f64_lossy(pred.len() as f64)
}

/// Total loss over all steps is their plain sum.
pub fn total_loss<T: Element>(step_losses: &[T]) -> T {
    step_losses.iter().copied().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::GroupSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_cfg() -> BackboneConfig {
        BackboneConfig {
            input_size: 8,
            pre_size: 9,
            in_channels: 2,
            groups: vec![GroupSpec { convs: 1, channels: 3 }, GroupSpec { convs: 1, channels: 4 }],
        }
    }

    fn micro_model(seed: u64, head_init: HeadInit) -> WeatherModel<f64> {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneParams::init(&cfg, 3, &mut rng);
        WeatherModel::new(
            cfg,
            backbone,
            vec!["a".into(), "b".into(), "c".into()],
            LabelOrder::identity(3),
            3,
            4,
            HeadMode::PerStep,
            head_init,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_emits_half_everywhere() {
        let cfg = micro_cfg();
        let backbone = BackboneParams::<f64>::zeros(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = WeatherModel::new(
            cfg,
            backbone,
            vec!["a".into(), "b".into()],
            LabelOrder::identity(2),
            3,
            4,
            HeadMode::PerStep,
            HeadInit::Zeros,
            &mut rng,
        )
        .unwrap();
        // zero the stage-2 parameters too
        model.attention = AttentionParams::zeros(4, 4);
        model.cell = ConvLstmParams::zeros(4, 4, 3);

        let image = Tensor::zeros(vec![8, 8, 2]);
        let pred = predict_labels(&model, &image).unwrap();
        for (&p, z) in pred.step_probs.iter().zip(&pred.step_attention) {
            assert_eq!(p, 0.5);
            assert!(z.iter().all(|&v| v == 0.5));
        }
        // threshold ties resolve to label 1
        assert!(pred.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn probabilities_stay_in_open_interval() {
        let model = micro_model(5, HeadInit::Xavier);
        let image = Tensor::from_fn(vec![8, 8, 2], |i| ((i % 11) as f64) / 11.0);
        let pred = predict_labels(&model, &image).unwrap();
        assert!(pred.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn head_input_is_flattened_hidden_state() {
        let model = micro_model(6, HeadInit::Xavier);
        // feature map 4x4x4 -> flattened head input of 64
        assert_eq!(model.backbone_cfg.feature_len(), 64);
        assert_eq!(model.heads[0].w.shape(), &[64, 1]);
    }

    #[test]
    fn step_loss_closed_forms() {
        assert!((step_loss(&[0.5f64], &[1.0]) - 2.0f64.ln()).abs() < 1e-12);
        assert!((step_loss(&[0.5f64], &[0.0]) - 2.0f64.ln()).abs() < 1e-12);
        assert!((step_loss(&[0.25f64], &[1.0]) - 4.0f64.ln()).abs() < 1e-12);
        // perfect prediction costs only the clamp
        assert!(step_loss(&[1.0f64, 0.0], &[1.0, 0.0]) <= 1.1e-7);
    }

    #[test]
    fn total_loss_is_the_sum() {
        let l2 = 2.0f64.ln();
        assert!((total_loss(&[l2; 5]) - 5.0 * l2).abs() < 1e-12);
        assert!((total_loss(&[l2; 7]) - 7.0 * l2).abs() < 1e-12);
        // T = 1 degenerates to the single step loss
        let single = step_loss(&[0.3f64], &[1.0]);
        assert_eq!(total_loss(&[single]), single);
    }

    #[test]
    fn label_order_rejects_non_permutations() {
        assert!(LabelOrder::new(vec![0, 1, 1]).is_err());
        assert!(LabelOrder::new(vec![0, 3]).is_err());
        assert!(LabelOrder::new(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn named_orders_resolve_against_class_tables() {
        // the seven-class rollout order used with 'other'-extended data
        let classes: Vec<String> = ["sunny", "cloudy", "foggy", "snowy", "moist", "rainy", "other"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let order = LabelOrder::from_names(
            &["moist", "cloudy", "other", "sunny", "snowy", "foggy", "rainy"],
            &classes,
        )
        .unwrap();
        assert_eq!(
            order.names(&classes),
            vec!["moist", "cloudy", "other", "sunny", "snowy", "foggy", "rainy"]
        );

        // and the five-class variant
        let classes: Vec<String> = ["sunny", "cloudy", "foggy", "rainy", "snowy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let order =
            LabelOrder::from_names(&["cloudy", "sunny", "foggy", "rainy", "snowy"], &classes)
                .unwrap();
        assert_eq!(order.as_slice(), &[1, 0, 2, 3, 4]);

        assert!(LabelOrder::from_names(&["cloudy"], &classes).is_err());
        assert!(LabelOrder::from_names(
            &["cloudy", "sunny", "foggy", "rainy", "hail"],
            &classes
        )
        .is_err());
    }

    #[test]
    fn relabeling_classes_moves_probabilities_consistently() {
        let model = micro_model(7, HeadInit::Xavier);
        let image = Tensor::from_fn(vec![8, 8, 2], |i| ((i * 13 % 29) as f64) / 29.0);
        let base = predict_labels(&model, &image).unwrap();

        // permute canonical storage: class i becomes rho[i]
        let rho = [2usize, 0, 1];
        let mut relabeled = model.clone();
        let mut names = vec![String::new(); 3];
        for (i, name) in model.class_names.iter().enumerate() {
            names[rho[i]] = name.clone();
        }
        relabeled.class_names = names;
        relabeled.order =
            LabelOrder::new(model.order.as_slice().iter().map(|&c| rho[c]).collect()).unwrap();

        let moved = predict_labels(&relabeled, &image).unwrap();
        // identical computation, probabilities land at the permuted slots
        for i in 0..3 {
            assert_eq!(base.probs[i], moved.probs[rho[i]]);
            assert_eq!(base.labels[i], moved.labels[rho[i]]);
        }
        assert_eq!(base.step_probs, moved.step_probs);
    }

    #[test]
    fn hidden_state_carries_across_steps() {
        let model = micro_model(8, HeadInit::Xavier);
        let image = Tensor::from_fn(vec![8, 8, 2], |i| ((i * 7 % 23) as f64) / 23.0);
        let pred = predict_labels(&model, &image).unwrap();
        // successive steps see different hidden states, so step
        // probabilities differ
        assert!(pred
            .step_probs
            .windows(2)
            .any(|w| (w[0] - w[1]).abs() > 1e-9));

        // permuting the order reassigns classes to steps
        let mut reordered = model.clone();
        reordered.order = LabelOrder::new(vec![1, 2, 0]).unwrap();
        let moved = predict_labels(&reordered, &image).unwrap();
        assert_eq!(pred.step_probs, moved.step_probs);
        assert!(pred
            .probs
            .iter()
            .zip(&moved.probs)
            .any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn shared_head_mode_uses_one_head_for_all_steps() {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let backbone = BackboneParams::init(&cfg, 3, &mut rng);
        let model = WeatherModel::new(
            cfg,
            backbone,
            vec!["a".into(), "b".into(), "c".into()],
            LabelOrder::identity(3),
            3,
            4,
            HeadMode::Shared,
            HeadInit::Xavier,
            &mut rng,
        )
        .unwrap();
        assert_eq!(model.heads.len(), 1);
        let image = Tensor::from_fn(vec![8, 8, 2], |i| ((i * 3) % 13) as f64 / 13.0);
        let pred = predict_labels(&model, &image).unwrap();
        assert_eq!(pred.probs.len(), 3);
        // steps still differ through the hidden state alone
        assert!(pred
            .step_probs
            .windows(2)
            .any(|w| (w[0] - w[1]).abs() > 1e-12));
    }

    #[test]
    fn micro_end_to_end_gradients() {
        let model = micro_model(9, HeadInit::Xavier);
        let image = Tensor::from_fn(vec![8, 8, 2], |i| ((i * 5 % 17) as f64) / 17.0);
        let targets = [1.0, 0.0, 1.0];

        // gradient wrt stage-2 params and the image, sampled
        let mut named = Vec::new();
        model.visit_stage2(&mut named);
        let mut points = vec![image];
        points.extend(named.iter().map(|(_, t, _)| (*t).clone()));

        let rep = crate::tape::grad_check_multi(
            |tape, ids| {
                let img = ids[0];
                let mut k = 1;
                let attention = AttentionIds {
                    w1: ids[k],
                    b1: ids[k + 1],
                    w2: ids[k + 2],
                    b2: ids[k + 3],
                };
                k += 4;
                let cell = ConvLstmIds {
                    w: [ids[k], ids[k + 3], ids[k + 6], ids[k + 9]],
                    u: [ids[k + 1], ids[k + 4], ids[k + 7], ids[k + 10]],
                    b: [ids[k + 2], ids[k + 5], ids[k + 8], ids[k + 11]],
                };
                k += 12;
                let heads: Vec<(ValueId, ValueId)> =
                    (0..3).map(|i| (ids[k + 2 * i], ids[k + 2 * i + 1])).collect();

                let backbone_ids = BackboneIds::register(tape, &model.backbone);
                let feats = extract_features(tape, img, &backbone_ids, &model.backbone_cfg)?;
                let stage2 = Stage2Ids {
                    attention,
                    cell,
                    heads,
                };
                let roll = rollout(tape, feats, &model, &stage2, None)?;
                let mut total: Option<ValueId> = None;
                for (t, &p) in roll.step_probs.iter().enumerate() {
                    let l = tape.bce(p, Tensor::scalar(targets[t]))?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, l)?,
                        None => l,
                    });
                }
                Ok(total.unwrap())
            },
            &points,
            1e-5,
            Some((160, 31)),
        )
        .unwrap();
        assert!(
            rep.max_rel_err < 1e-3,
            "max rel err {}",
            rep.max_rel_err
        );
    }
}
