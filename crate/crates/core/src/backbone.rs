//! Feature-extraction backbone: groups of 3×3 same-padding convolutions
//! with ReLU, a 2×2 max-pool between groups, and a flatten→affine head
//! used for the first training stage. Five groups take a 224×224 image
//! to a 14×14 map; the desk preset keeps the same depth at a fraction
//! of the width.

use crate::cells::ParamKind;
use crate::error::{Error, Result};
use crate::tape::{Activation, Tape, ValueId};
use crate::tensor::{xavier_uniform, Element, Tensor};
use rand::Rng;

pub const CONV_KERNEL: usize = 3;

/// One conv group: `convs` stacked 3×3 convolutions at `channels` width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub convs: usize,
    pub channels: usize,
}

/// Backbone topology. Pooling happens after every group except the
/// last, so the spatial downsampling factor is 2^(groups-1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Square side of the network input (after cropping).
    pub input_size: usize,
    /// Square side images are resized to before the training crop.
    pub pre_size: usize,
    pub in_channels: usize,
    pub groups: Vec<GroupSpec>,
}

impl BackboneConfig {
    /// Full-scale preset: five groups at VGG-like widths, 224×224 input.
    pub fn full() -> Self {
        BackboneConfig {
            input_size: 224,
            pre_size: 256,
            in_channels: 3,
            groups: vec![
                GroupSpec { convs: 2, channels: 64 },
                GroupSpec { convs: 2, channels: 128 },
                GroupSpec { convs: 3, channels: 256 },
                GroupSpec { convs: 3, channels: 512 },
                GroupSpec { convs: 3, channels: 512 },
            ],
        }
    }

    /// Laptop-sized preset: same depth, narrow groups, 64×64 input.
    pub fn desk() -> Self {
        BackboneConfig {
            input_size: 64,
            pre_size: 72,
            in_channels: 3,
            groups: vec![
                GroupSpec { convs: 1, channels: 8 },
                GroupSpec { convs: 1, channels: 16 },
                GroupSpec { convs: 1, channels: 32 },
                GroupSpec { convs: 1, channels: 64 },
                GroupSpec { convs: 1, channels: 64 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("backbone needs at least one group".into()));
        }
        if self.groups.iter().any(|g| g.convs == 0 || g.channels == 0) {
            return Err(Error::Config("backbone group with zero size".into()));
        }
        let factor = self.downsample_factor();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input size {} not divisible by pool factor {factor}",
                self.input_size
            )));
        }
        if self.pre_size < self.input_size {
            return Err(Error::Config(format!(
                "pre-crop size {} smaller than input size {}",
                self.pre_size, self.input_size
            )));
        }
        // every pooled map must have even spatial dims
        let mut side = self.input_size;
        for _ in 0..self.groups.len() - 1 {
            if !side.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "pooling reaches odd spatial size {side}"
                )));
            }
            side /= 2;
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.groups.len() - 1)
    }

    pub fn feature_spatial(&self) -> usize {
        self.input_size / self.downsample_factor()
    }

    pub fn feature_channels(&self) -> usize {
        self.groups.last().map(|g| g.channels).unwrap_or(0)
    }

    pub fn feature_len(&self) -> usize {
        self.feature_spatial() * self.feature_spatial() * self.feature_channels()
    }

    /// Groups as `channelsxconvs` pairs, e.g. "64x2,128x2".
    pub fn groups_string(&self) -> String {
        self.groups
            .iter()
            .map(|g| format!("{}x{}", g.channels, g.convs))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_groups(s: &str) -> Result<Vec<GroupSpec>> {
        let mut groups = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let (ch, cv) = part
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("bad group spec '{part}', want CHxN")))?;
            groups.push(GroupSpec {
                channels: ch
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad channel count '{ch}'")))?,
                convs: cv
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad conv count '{cv}'")))?,
            });
        }
        Ok(groups)
    }
}

/// One convolution layer: kernels Cout×Cin×3×3 and per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backbone weights plus the stage-1 classification head
/// (flatten → affine → T logits).
#[derive(Clone, Debug)]
pub struct BackboneParams<T> {
    pub convs: Vec<ConvLayer<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Element> BackboneParams<T> {
    pub fn zeros(cfg: &BackboneConfig, num_classes: usize) -> Self {
        let mut convs = Vec::new();
        let mut cin = cfg.in_channels;
        for g in &cfg.groups {
            for _ in 0..g.convs {
                convs.push(ConvLayer {
                    kernels: Tensor::zeros(vec![g.channels, cin, CONV_KERNEL, CONV_KERNEL]),
                    bias: Tensor::zeros(vec![g.channels]),
                });
                cin = g.channels;
            }
        }
        BackboneParams {
            convs,
            head_w: Tensor::zeros(vec![cfg.feature_len(), num_classes]),
            head_b: Tensor::zeros(vec![num_classes]),
        }
    }

    pub fn init(cfg: &BackboneConfig, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(cfg, num_classes);
        let mut cin = cfg.in_channels;
        let mut layer = 0;
        for g in &cfg.groups {
            for _ in 0..g.convs {
                let k2 = CONV_KERNEL * CONV_KERNEL;
                p.convs[layer].kernels = xavier_uniform(
                    vec![g.channels, cin, CONV_KERNEL, CONV_KERNEL],
                    cin * k2,
                    g.channels * k2,
                    rng,
                );
                cin = g.channels;
                layer += 1;
            }
        }
        let m = cfg.feature_len();
        p.head_w = xavier_uniform(vec![m, num_classes], m, num_classes, rng);
        p
    }

    pub fn num_classes(&self) -> usize {
        self.head_b.len()
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>, ParamKind)>) {
        for (i, layer) in self.convs.iter().enumerate() {
            out.push((
                format!("{prefix}.conv{i}.kernels"),
                &layer.kernels,
                ParamKind::Weight,
            ));
            out.push((format!("{prefix}.conv{i}.bias"), &layer.bias, ParamKind::Bias));
        }
        out.push((format!("{prefix}.head.w"), &self.head_w, ParamKind::Weight));
        out.push((format!("{prefix}.head.b"), &self.head_b, ParamKind::Bias));
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<T>, ParamKind)>,
    ) {
        for (i, layer) in self.convs.iter_mut().enumerate() {
            out.push((
                format!("{prefix}.conv{i}.kernels"),
                &mut layer.kernels,
                ParamKind::Weight,
            ));
            out.push((
                format!("{prefix}.conv{i}.bias"),
                &mut layer.bias,
                ParamKind::Bias,
            ));
        }
        out.push((format!("{prefix}.head.w"), &mut self.head_w, ParamKind::Weight));
        out.push((format!("{prefix}.head.b"), &mut self.head_b, ParamKind::Bias));
    }
}

/// Tape-registered backbone parameters.
#[derive(Clone, Debug)]
pub struct BackboneIds {
    pub convs: Vec<(ValueId, ValueId)>,
    pub head_w: ValueId,
    pub head_b: ValueId,
}

impl BackboneIds {
    pub fn register<T: Element>(tape: &mut Tape<T>, params: &BackboneParams<T>) -> Self {
        BackboneIds {
            convs: params
                .convs
                .iter()
                .map(|l| (tape.leaf(l.kernels.clone()), tape.leaf(l.bias.clone())))
                .collect(),
            head_w: tape.leaf(params.head_w.clone()),
            head_b: tape.leaf(params.head_b.clone()),
        }
    }

    pub fn flat(&self) -> Vec<ValueId> {
        let mut v = Vec::new();
        for &(k, b) in &self.convs {
            v.push(k);
            v.push(b);
        }
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

/// Run the conv/pool stack on a normalized image; yields the rank-3
/// feature map of shape feature_spatial²×channels.
pub fn extract_features<T: Element>(
    tape: &mut Tape<T>,
    image: ValueId,
    ids: &BackboneIds,
    cfg: &BackboneConfig,
) -> Result<ValueId> {
    let want = [cfg.input_size, cfg.input_size, cfg.in_channels];
    if tape.value(image).shape() != want {
        return Err(Error::shape(
            "extract_features",
            format!("image {:?}, expected {want:?}", tape.value(image).shape()),
        ));
    }
    let mut cur = image;
    let mut layer = 0;
    for (gi, g) in cfg.groups.iter().enumerate() {
        for _ in 0..g.convs {
            let (k, b) = ids.convs[layer];
            let conv = tape.conv2d(cur, k, b)?;
            cur = tape.activation(conv, Activation::Relu);
            layer += 1;
        }
        if gi + 1 < cfg.groups.len() {
            cur = tape.max_pool2(cur)?;
        }
    }
    Ok(cur)
}

/// Stage-1 head: flatten, optional dropout mask, affine to T logits.
/// The sigmoid lives in the loss.
pub fn stage1_logits<T: Element>(
    tape: &mut Tape<T>,
    features: ValueId,
    ids: &BackboneIds,
    dropout_mask: Option<ValueId>,
) -> Result<ValueId> {
    let mut flat = tape.flatten(features)?;
    if let Some(mask) = dropout_mask {
        flat = tape.mul(flat, mask)?;
    }
    tape.affine(flat, ids.head_w, ids.head_b)
}

/// Forward-only feature extraction on a scratch tape; used where the
/// backbone is frozen and gradients must not flow into it.
pub fn extract_features_tensor<T: Element>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let ids = BackboneIds::register(&mut tape, params);
    let img = tape.leaf(image.clone());
    let feats = extract_features(&mut tape, img, &ids, cfg)?;
    Ok(tape.value(feats).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check_multi;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_channels_at_full_resolution_give_14x14() {
        let mut cfg = BackboneConfig::desk();
        cfg.input_size = 224;
        cfg.pre_size = 256;
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_spatial(), 14);
        assert_eq!(cfg.feature_channels(), 64);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BackboneParams::<f32>::init(&cfg, 5, &mut rng);
        let mut tape = Tape::new();
        let ids = BackboneIds::register(&mut tape, &params);
        let img = tape.leaf(Tensor::filled(vec![224, 224, 3], 0.5f32));
        let feats = extract_features(&mut tape, img, &ids, &cfg).unwrap();
        assert_eq!(tape.value(feats).shape(), &[14, 14, 64]);
    }

    #[test]
    fn desk_preset_yields_4x4() {
        let cfg = BackboneConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_spatial(), 4);
        assert_eq!(cfg.downsample_factor(), 16);
    }

    #[test]
    fn zero_image_zero_params_gives_zero_features() {
        let mut cfg = BackboneConfig::desk();
        cfg.input_size = 16;
        cfg.pre_size = 18;
        cfg.groups.truncate(3);
        let params = BackboneParams::<f64>::zeros(&cfg, 4);
        let mut tape = Tape::new();
        let ids = BackboneIds::register(&mut tape, &params);
        let img = tape.leaf(Tensor::zeros(vec![16, 16, 3]));
        let feats = extract_features(&mut tape, img, &ids, &cfg).unwrap();
        assert!(tape.value(feats).data().iter().all(|&v| v == 0.0));

        let logits = stage1_logits(&mut tape, feats, &ids, None).unwrap();
        assert_eq!(tape.value(logits).shape(), &[4]);
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let cfg = BackboneConfig::desk();
        let params = BackboneParams::<f32>::zeros(&cfg, 2);
        let mut tape = Tape::new();
        let ids = BackboneIds::register(&mut tape, &params);
        let img = tape.leaf(Tensor::zeros(vec![32, 32, 3]));
        assert!(extract_features(&mut tape, img, &ids, &cfg).is_err());
    }

    #[test]
    fn head_width_matches_class_count() {
        let mut cfg = BackboneConfig::desk();
        cfg.input_size = 16;
        cfg.pre_size = 18;
        cfg.groups.truncate(2);
        for t in [7usize, 5] {
            let params = BackboneParams::<f32>::zeros(&cfg, t);
            let mut tape = Tape::new();
            let ids = BackboneIds::register(&mut tape, &params);
            let img = tape.leaf(Tensor::zeros(vec![16, 16, 3]));
            let feats = extract_features(&mut tape, img, &ids, &cfg).unwrap();
            let logits = stage1_logits(&mut tape, feats, &ids, None).unwrap();
            assert_eq!(tape.value(logits).shape(), &[t]);
        }
    }

    #[test]
    fn deterministic_init_and_forward() {
        let mut cfg = BackboneConfig::desk();
        cfg.input_size = 16;
        cfg.pre_size = 18;
        cfg.groups.truncate(3);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let params = BackboneParams::<f32>::init(&cfg, 3, &mut rng);
            let img = Tensor::from_fn(vec![16, 16, 3], |i| (i % 7) as f32 / 7.0);
            extract_features_tensor(&params, &cfg, &img).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn groups_string_round_trips() {
        let cfg = BackboneConfig::full();
        let parsed = BackboneConfig::parse_groups(&cfg.groups_string()).unwrap();
        assert_eq!(parsed, cfg.groups);
        assert!(BackboneConfig::parse_groups("64,2").is_err());
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        let cfg = BackboneConfig {
            input_size: 8,
            pre_size: 9,
            in_channels: 2,
            groups: vec![
                GroupSpec { convs: 1, channels: 2 },
                GroupSpec { convs: 1, channels: 3 },
                GroupSpec { convs: 1, channels: 3 },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = BackboneParams::<f64>::init(&cfg, 2, &mut rng);
        let image = Tensor::from_fn(vec![8, 8, 2], |i| ((i * 37 % 97) as f64) / 97.0);

        let mut points = vec![image];
        for l in &params.convs {
            points.push(l.kernels.clone());
            points.push(l.bias.clone());
        }
        points.push(params.head_w.clone());
        points.push(params.head_b.clone());

        let rep = grad_check_multi(
            |tape, ids| {
                let backbone_ids = BackboneIds {
                    convs: vec![(ids[1], ids[2]), (ids[3], ids[4]), (ids[5], ids[6])],
                    head_w: ids[7],
                    head_b: ids[8],
                };
                let feats = extract_features(tape, ids[0], &backbone_ids, &cfg)?;
                let logits = stage1_logits(tape, feats, &backbone_ids, None)?;
                let probs = tape.activation(logits, crate::tape::Activation::Sigmoid);
                tape.bce(probs, Tensor::new(vec![2], vec![1.0, 0.0]).unwrap())
            },
            &points,
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "max rel err {}", rep.max_rel_err);
    }
}
