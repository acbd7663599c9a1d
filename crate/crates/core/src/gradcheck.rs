//! Finite-difference verification suites, grouped by subsystem. The CLI
//! exposes them as `gradcheck --module ...`; the acceptance tests run
//! them directly. All checks use f64 and a central-difference step of
//! 1e-5.

use crate::attention::{AttentionIds, AttentionParams};
use crate::backbone::{extract_features, BackboneConfig, BackboneIds, BackboneParams};
use crate::cells::{
    conv_lstm_step, fc_lstm_step, ConvLstmIds, ConvLstmParams, FcLstmIds, FcLstmParams, GATES,
};
use crate::error::{Error, Result};
use crate::model::{rollout, HeadInit, HeadMode, LabelOrder, Stage2Ids, WeatherModel};
use crate::tape::{grad_check_multi, Activation, GradCheckReport, Tape, ValueId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPSILON: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const END_TO_END_FRACTION: f64 = 0.99;
pub const END_TO_END_SAMPLES: usize = 400;

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Fraction of checked coordinates within tolerance.
    pub fraction_within: f64,
    /// Fraction required to pass (1.0 except for the sampled
    /// end-to-end check).
    pub required_fraction: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn strict(name: &str, report: &GradCheckReport, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance,
            fraction_within: report.fraction_within(tolerance),
            required_fraction: 1.0,
            pass: report.max_rel_err < tolerance,
        }
    }

    fn sampled(name: &str, report: &GradCheckReport, tolerance: f64, required: f64) -> Self {
        let fraction = report.fraction_within(tolerance);
        CheckOutcome {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance,
            fraction_within: fraction,
            required_fraction: required,
            pass: fraction >= required,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} (max rel err {:.3e}, tol {:.0e}, {:.1}% within, need {:.1}%)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.fraction_within * 100.0,
            self.required_fraction * 100.0,
        )
    }
}

pub const MODULES: [&str; 4] = ["tensors", "cells", "attention", "model"];

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::trainer::derive_seed(seed, &[0x6763, salt]))
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-0.8..0.8))
}

/// Sum of squares turns any tensor-valued op into a scalar objective
/// whose gradient still depends on the op output.
fn sum_squares(tape: &mut Tape<f64>, id: ValueId) -> Result<ValueId> {
    let m = tape.mul(id, id)?;
    Ok(tape.sum_all(m))
}

pub fn suite_tensors(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut r = rng(seed, 1);

    let x = random_tensor(&[5, 4, 3], &mut r);
    let k = random_tensor(&[4, 3, 3, 3], &mut r);
    let b = random_tensor(&[4], &mut r);
    let rep = grad_check_multi(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2])?;
            sum_squares(tape, y)
        },
        &[x, k, b],
        EPSILON,
        None,
    )?;
    out.push(CheckOutcome::strict("conv2d", &rep, PRIMITIVE_TOL));

    let x = random_tensor(&[6], &mut r);
    let w = random_tensor(&[6, 4], &mut r);
    let b = random_tensor(&[4], &mut r);
    let rep = grad_check_multi(
        |tape, ids| {
            let y = tape.affine(ids[0], ids[1], ids[2])?;
            sum_squares(tape, y)
        },
        &[x, w, b],
        EPSILON,
        None,
    )?;
    out.push(CheckOutcome::strict("affine", &rep, PRIMITIVE_TOL));

    for (kind, name) in [
        (Activation::Sigmoid, "sigmoid"),
        (Activation::Tanh, "tanh"),
        (Activation::Relu, "relu"),
    ] {
        let x = random_tensor(&[9], &mut r);
        let rep = grad_check_multi(
            |tape, ids| {
                let y = tape.activation(ids[0], kind);
                sum_squares(tape, y)
            },
            &[x],
            EPSILON,
            None,
        )?;
        out.push(CheckOutcome::strict(name, &rep, PRIMITIVE_TOL));
    }

    let x = random_tensor(&[4, 5, 3], &mut r);
    let rep = grad_check_multi(
        |tape, ids| {
            let y = tape.global_avg_pool(ids[0])?;
            sum_squares(tape, y)
        },
        &[x],
        EPSILON,
        None,
    )?;
    out.push(CheckOutcome::strict("global_avg_pool", &rep, PRIMITIVE_TOL));

    let x = random_tensor(&[4, 4, 2], &mut r);
    let rep = grad_check_multi(
        |tape, ids| {
            let y = tape.max_pool2(ids[0])?;
            sum_squares(tape, y)
        },
        &[x],
        EPSILON,
        None,
    )?;
    out.push(CheckOutcome::strict("max_pool2", &rep, PRIMITIVE_TOL));

    // step loss: mean clamped cross-entropy on probabilities
    let probs = Tensor::from_fn(vec![8], |_| r.random_range(0.05..0.95));
    let target = Tensor::from_fn(vec![8], |_| f64::from(r.random_bool(0.5)));
    let rep = grad_check_multi(
        |tape, ids| tape.bce(ids[0], target.clone()),
        &[probs],
        EPSILON,
        None,
    )?;
    out.push(CheckOutcome::strict("step_loss", &rep, PRIMITIVE_TOL));

    Ok(out)
}

pub fn suite_cells(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut r = rng(seed, 2);

    // FC-LSTM step
    let (d_in, d_h) = (3, 2);
    let mut fc = FcLstmParams::<f64>::zeros(d_in, d_h);
    for g in 0..GATES {
        fc.w[g] = random_tensor(&[d_in, d_h], &mut r);
        fc.u[g] = random_tensor(&[d_h, d_h], &mut r);
        fc.b[g] = random_tensor(&[d_h], &mut r);
    }
    let mut points = vec![
        random_tensor(&[d_in], &mut r),
        random_tensor(&[d_h], &mut r),
        random_tensor(&[d_h], &mut r),
    ];
    for g in 0..GATES {
        points.push(fc.w[g].clone());
        points.push(fc.u[g].clone());
        points.push(fc.b[g].clone());
    }
    let rep = grad_check_multi(
        |tape, ids| {
            let fids = FcLstmIds {
                w: [ids[3], ids[6], ids[9], ids[12]],
                u: [ids[4], ids[7], ids[10], ids[13]],
                b: [ids[5], ids[8], ids[11], ids[14]],
            };
            let (h1, c1) = fc_lstm_step(tape, ids[0], (ids[1], ids[2]), &fids)?;
            let sh = sum_squares(tape, h1)?;
            let sc = sum_squares(tape, c1)?;
            tape.add(sh, sc)
        },
        &points,
        EPSILON,
        None,
    )?;
    out.push(CheckOutcome::strict("fc_lstm_step", &rep, PRIMITIVE_TOL));

    // ConvLSTM step
    let (c_in, c_h, k) = (2, 2, 3);
    let mut cell = ConvLstmParams::<f64>::zeros(c_in, c_h, k);
    for g in 0..GATES {
        cell.w[g] = random_tensor(&[c_h, c_in, k, k], &mut r);
        cell.u[g] = random_tensor(&[c_h, c_h, k, k], &mut r);
        cell.b[g] = random_tensor(&[c_h], &mut r);
    }
    let mut points = vec![
        random_tensor(&[3, 3, c_in], &mut r),
        random_tensor(&[3, 3, c_h], &mut r),
        random_tensor(&[3, 3, c_h], &mut r),
    ];
    for g in 0..GATES {
        points.push(cell.w[g].clone());
        points.push(cell.u[g].clone());
        points.push(cell.b[g].clone());
    }
    let rep = grad_check_multi(
        |tape, ids| {
            let cids = ConvLstmIds {
                w: [ids[3], ids[6], ids[9], ids[12]],
                u: [ids[4], ids[7], ids[10], ids[13]],
                b: [ids[5], ids[8], ids[11], ids[14]],
            };
            let (h1, c1) = conv_lstm_step(tape, ids[0], (ids[1], ids[2]), &cids)?;
            let sh = sum_squares(tape, h1)?;
            let sc = sum_squares(tape, c1)?;
            tape.add(sh, sc)
        },
        &points,
        EPSILON,
        None,
    )?;
    out.push(CheckOutcome::strict("conv_lstm_step", &rep, PRIMITIVE_TOL));

    Ok(out)
}

pub fn suite_attention(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut r = rng(seed, 3);
    let c = 3;
    let params = AttentionParams {
        w1: random_tensor(&[2 * c, c], &mut r),
        b1: random_tensor(&[c], &mut r),
        w2: random_tensor(&[c, c], &mut r),
        b2: random_tensor(&[c], &mut r),
    };
    let points = vec![
        random_tensor(&[4, 3, c], &mut r),
        random_tensor(&[4, 3, c], &mut r),
        params.w1.clone(),
        params.b1.clone(),
        params.w2.clone(),
        params.b2.clone(),
    ];
    let rep = grad_check_multi(
        |tape, ids| {
            let aids = AttentionIds {
                w1: ids[2],
                b1: ids[3],
                w2: ids[4],
                b2: ids[5],
            };
            let (xt, _z) = crate::attention::apply(tape, ids[0], ids[1], &aids)?;
            sum_squares(tape, xt)
        },
        &points,
        EPSILON,
        None,
    )?;
    Ok(vec![CheckOutcome::strict(
        "attention_chain",
        &rep,
        PRIMITIVE_TOL,
    )])
}

/// End-to-end: image through the desk-scale backbone, attention,
/// ConvLSTM rollout, and summed per-step losses. Gradients are sampled
/// across the image, backbone kernels, and all stage-2 parameters.
pub fn suite_model(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut r = rng(seed, 4);
    let bc = BackboneConfig::desk();
    let classes: Vec<String> = ["sun", "cloud", "fog", "rain"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let t_steps = classes.len();
    let backbone = BackboneParams::<f64>::init(&bc, t_steps, &mut r);
    let model = WeatherModel::new(
        bc.clone(),
        backbone,
        classes,
        LabelOrder::identity(t_steps),
        3,
        bc.feature_channels(),
        HeadMode::PerStep,
        HeadInit::Xavier,
        &mut r,
    )?;
    let image = Tensor::from_fn(vec![bc.input_size, bc.input_size, 3], |_| {
        r.random_range(0.0..1.0)
    });
    let targets: Vec<f64> = (0..t_steps).map(|_| f64::from(r.random_bool(0.5))).collect();

    // points: image, conv layers (kernels, bias), stage-2 params in
    // visit order
    let mut points = vec![image];
    for layer in &model.backbone.convs {
        points.push(layer.kernels.clone());
        points.push(layer.bias.clone());
    }
    let mut stage2_named = Vec::new();
    model.visit_stage2(&mut stage2_named);
    points.extend(stage2_named.iter().map(|(_, t, _)| (*t).clone()));
    let conv_layers = model.backbone.convs.len();

    let rep = grad_check_multi(
        |tape, ids| {
            let img = ids[0];
            let mut k = 1;
            let convs: Vec<(ValueId, ValueId)> = (0..conv_layers)
                .map(|i| (ids[k + 2 * i], ids[k + 2 * i + 1]))
                .collect();
            k += 2 * conv_layers;
            // the stage-1 head takes no part in the rollout loss
            let head_w = tape.leaf(model.backbone.head_w.clone());
            let head_b = tape.leaf(model.backbone.head_b.clone());
            let backbone_ids = BackboneIds {
                convs,
                head_w,
                head_b,
            };
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
            let heads: Vec<(ValueId, ValueId)> = (0..t_steps)
                .map(|i| (ids[k + 2 * i], ids[k + 2 * i + 1]))
                .collect();

            let feats = extract_features(tape, img, &backbone_ids, &bc)?;
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
            Ok(total.expect("at least one step"))
        },
        &points,
        EPSILON,
        Some((END_TO_END_SAMPLES, crate::trainer::derive_seed(seed, &[0xE2E]))),
    )?;
    Ok(vec![CheckOutcome::sampled(
        "end_to_end_desk",
        &rep,
        END_TO_END_TOL,
        END_TO_END_FRACTION,
    )])
}

pub fn run_module(module: &str, seed: u64) -> Result<Vec<CheckOutcome>> {
    match module {
        "tensors" => suite_tensors(seed),
        "cells" => suite_cells(seed),
        "attention" => suite_attention(seed),
        "model" => suite_model(seed),
        "all" => run_all(seed),
        other => Err(Error::Config(format!(
            "unknown gradcheck module '{other}', expected one of {MODULES:?} or 'all'"
        ))),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = suite_tensors(seed)?;
    out.extend(suite_cells(seed)?);
    out.extend(suite_attention(seed)?);
    out.extend(suite_model(seed)?);
    Ok(out)
}
