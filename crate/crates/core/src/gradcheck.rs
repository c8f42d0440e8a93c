//! Central finite-difference verification of every differentiable
//! operation, the image encoder, and the whole model pipeline, all in f64.
//!
//! Each check reduces its output to a scalar through a fixed random
//! weighting, compares reverse-mode gradients against (f(x+h) - f(x-h)) / 2h,
//! and reports the worst relative error
//! |a - n| / max(|a|, |n|, 1e-4).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{scaled_dot_attention, MixerBlock};
use crate::embed::ImageEncoder;
use crate::error::{Error, Result};
use crate::model::{Cell, MixerModel, ModalityBatch, ModalityKind, ModalitySpec, Mode, Value};
use crate::tensor::{concat_cols, concat_rows, Tape, Tensor};
use crate::train::compute_total_loss;
use crate::LN_EPS;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()
}

/// Values bounded away from zero, for kinked activations.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = 0.2 + 0.8 * rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Reduce any tracked tensor to a scalar with fixed untracked weights.
fn to_scalar(t: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>> {
    t.reshape(&[1, t.numel()])?.matmul(weights)
}

fn probe_weights(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_vec(&[n, 1], uniform(rng, n, -1.0, 1.0)).expect("probe weight shape")
}

type Build = dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>;

/// Exhaustively check d(scalar)/d(input) for every element of every input.
/// `corrupt` (index into the flattened gradient of input 0, plus an offset)
/// exists so tests can prove the harness catches wrong gradients.
fn check_graph_inner(
    name: &str,
    shapes: &[Vec<usize>],
    init: &[Vec<f64>],
    build: &Build,
    corrupt: Option<(usize, f64)>,
) -> Result<CheckReport> {
    // Analytic pass.
    let tape = Tape::new();
    let mut xs = Vec::with_capacity(shapes.len());
    for (s, d) in shapes.iter().zip(init) {
        xs.push(Tensor::from_vec(s, d.clone())?.watch(&tape)?);
    }
    let y = build(&tape, &xs)?;
    y.backward()?;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(xs.len());
    for x in &xs {
        grads.push(
            tape.grad_of(x)
                .ok_or_else(|| Error::contract(format!("{name}: missing gradient")))?,
        );
    }
    if let Some((idx, delta)) = corrupt {
        grads[0][idx] += delta;
    }

    // Numeric passes.
    let value_of = |values: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let mut xs = Vec::with_capacity(shapes.len());
        for (s, d) in shapes.iter().zip(values) {
            xs.push(Tensor::from_vec(s, d.clone())?.watch(&tape)?);
        }
        Ok(build(&tape, &xs)?.item())
    };
    let mut work: Vec<Vec<f64>> = init.to_vec();
    let mut max_err = 0.0f64;
    for k in 0..work.len() {
        for i in 0..work[k].len() {
            let orig = work[k][i];
            work[k][i] = orig + FD_STEP;
            let fp = value_of(&work)?;
            work[k][i] = orig - FD_STEP;
            let fm = value_of(&work)?;
            work[k][i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grads[k][i], numeric));
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: max_err, tolerance: OP_TOLERANCE })
}

fn check_graph(
    name: &str,
    shapes: &[Vec<usize>],
    init: &[Vec<f64>],
    build: &Build,
) -> Result<CheckReport> {
    check_graph_inner(name, shapes, init, build, None)
}

// ── Per-op suites ───────────────────────────────────────────────────────────

fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    {
        let w = probe_weights(rng, 6);
        reports.push(check_graph(
            "add",
            &[vec![2, 3], vec![2, 3]],
            &[uniform(rng, 6, -1.0, 1.0), uniform(rng, 6, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].add(&xs[1])?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 6);
        reports.push(check_graph(
            "mul_scalar",
            &[vec![2, 3]],
            &[uniform(rng, 6, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].mul_scalar(1.7)?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 12);
        reports.push(check_graph(
            "add_bias",
            &[vec![3, 4], vec![4]],
            &[uniform(rng, 12, -1.0, 1.0), uniform(rng, 4, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].add_bias(&xs[1])?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 8);
        reports.push(check_graph(
            "leaky_relu",
            &[vec![2, 4]],
            &[off_zero(rng, 8)],
            &move |_, xs| to_scalar(&xs[0].leaky_relu(crate::LEAKY_SLOPE)?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 6);
        reports.push(check_graph(
            "matmul",
            &[vec![3, 4], vec![4, 2]],
            &[uniform(rng, 12, -1.0, 1.0), uniform(rng, 8, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].matmul(&xs[1])?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 10);
        reports.push(check_graph(
            "softmax",
            &[vec![2, 5]],
            &[uniform(rng, 10, -2.0, 2.0)],
            &move |_, xs| to_scalar(&xs[0].softmax_lastaxis()?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 18);
        reports.push(check_graph(
            "layer_norm",
            &[vec![3, 6], vec![6], vec![6]],
            &[
                uniform(rng, 18, -1.5, 1.5),
                uniform(rng, 6, 0.5, 1.5),
                uniform(rng, 6, -0.5, 0.5),
            ],
            &move |_, xs| to_scalar(&xs[0].layer_norm(&xs[1], &xs[2], LN_EPS)?, &w),
        )?);
    }
    {
        reports.push(check_graph(
            "cross_entropy",
            &[vec![4, 3]],
            &[uniform(rng, 12, -2.0, 2.0)],
            &|_, xs| xs[0].cross_entropy(&[0, 2, 1, 0]),
        )?);
    }
    {
        let w = probe_weights(rng, 3 * 125);
        reports.push(check_graph(
            "conv3d_stride1",
            &[vec![1, 2, 5, 5, 5], vec![3, 2, 3, 3, 3], vec![3]],
            &[
                uniform(rng, 250, -1.0, 1.0),
                uniform(rng, 162, -0.5, 0.5),
                uniform(rng, 3, -0.5, 0.5),
            ],
            &move |_, xs| to_scalar(&xs[0].conv3d(&xs[1], &xs[2], 1)?, &w),
        )?);
    }
    {
        // 6x5x4 input, stride 2 -> 3x3x2 output extents.
        let w = probe_weights(rng, 2 * 3 * 3 * 2);
        reports.push(check_graph(
            "conv3d_stride2",
            &[vec![1, 2, 6, 5, 4], vec![2, 2, 3, 3, 3], vec![2]],
            &[
                uniform(rng, 240, -1.0, 1.0),
                uniform(rng, 108, -0.5, 0.5),
                uniform(rng, 2, -0.5, 0.5),
            ],
            &move |_, xs| to_scalar(&xs[0].conv3d(&xs[1], &xs[2], 2)?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 24);
        reports.push(check_graph(
            "permute",
            &[vec![2, 3, 4]],
            &[uniform(rng, 24, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].permute(&[2, 0, 1])?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 12);
        reports.push(check_graph(
            "reshape",
            &[vec![2, 6]],
            &[uniform(rng, 12, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].reshape(&[3, 4])?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 15);
        reports.push(check_graph(
            "concat_rows",
            &[vec![2, 3], vec![3, 3]],
            &[uniform(rng, 6, -1.0, 1.0), uniform(rng, 9, -1.0, 1.0)],
            &move |_, xs| to_scalar(&concat_rows(&[&xs[0], &xs[1]])?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 10);
        reports.push(check_graph(
            "concat_cols",
            &[vec![2, 2], vec![2, 3]],
            &[uniform(rng, 4, -1.0, 1.0), uniform(rng, 6, -1.0, 1.0)],
            &move |_, xs| to_scalar(&concat_cols(&[&xs[0], &xs[1]])?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 3);
        reports.push(check_graph(
            "mean_rows",
            &[vec![4, 3]],
            &[uniform(rng, 12, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].mean_rows()?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 4);
        reports.push(check_graph(
            "lookup_row",
            &[vec![5, 4]],
            &[uniform(rng, 20, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].lookup_row(2)?, &w),
        )?);
    }
    {
        let w = probe_weights(rng, 8);
        reports.push(check_graph(
            "scaled_dot_attention",
            &[vec![2, 4], vec![3, 4], vec![3, 4]],
            &[
                uniform(rng, 8, -1.0, 1.0),
                uniform(rng, 12, -1.0, 1.0),
                uniform(rng, 12, -1.0, 1.0),
            ],
            &move |_, xs| to_scalar(&scaled_dot_attention(&xs[0], &xs[1], &xs[2], 4)?, &w),
        )?);
    }
    {
        let block = MixerBlock::<f64>::new(8, 2, false, rng)?;
        let w = probe_weights(rng, 8);
        reports.push(check_graph(
            "mixer_block",
            &[vec![1, 8], vec![1, 8]],
            &[uniform(rng, 8, -1.0, 1.0), uniform(rng, 8, -1.0, 1.0)],
            &move |tape, xs| to_scalar(&block.forward(tape, &xs[0], &xs[1])?, &w),
        )?);
    }

    Ok(reports)
}

// ── Sampled structure-level checks ──────────────────────────────────────────

/// Indices probed per sampled parameter: both ends plus the middle.
fn probe_indices(n: usize) -> Vec<usize> {
    let mut v = vec![0];
    if n > 2 {
        v.push(n / 2);
    }
    if n > 1 {
        v.push(n - 1);
    }
    v
}

fn check_encoder(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut enc = ImageEncoder::<f64>::new(8, 2, (16, 16, 16), &[4, 4, 4, 4], 1, false, rng)?;
    let vol = Tensor::<f64>::from_vec(
        &[1, 1, 16, 16, 16],
        uniform(rng, 16 * 16 * 16, -1.0, 1.0),
    )?;
    let w = probe_weights(rng, 8);

    // Analytic gradients for every parameter.
    let tape = Tape::new();
    let y = to_scalar(&enc.encode(&tape, &vol)?, &w)?;
    y.backward()?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    enc.visit("enc", &mut |name, t| {
        let g = tape.grad_of(t).unwrap_or_else(|| vec![0.0; t.numel()]);
        analytic.push((name, g));
    });

    let sampled = [
        "enc.stem0.kernel",
        "enc.stem1.gamma",
        "enc.block0.conv1.kernel",
        "enc.block1.conv2.beta",
        "enc.block2.shortcut.kernel",
        "enc.block3.conv2.bias",
        "enc.pos_embed",
        "enc.enc0.attn.wq0",
        "enc.enc0.ff_w1",
        "enc.enc0.ln2_gamma",
        "enc.proj_w",
        "enc.proj_b",
    ];
    let mut max_err = 0.0f64;
    for target in sampled {
        let grad = &analytic
            .iter()
            .find(|(n, _)| n == target)
            .ok_or_else(|| Error::contract(format!("no parameter named {target}")))?
            .1;
        for idx in probe_indices(grad.len()) {
            let mut values = [0.0f64; 2];
            for (slot, delta) in [(0usize, FD_STEP), (1usize, -FD_STEP)] {
                set_encoder_param(&mut enc, target, idx, delta)?;
                let tape = Tape::new();
                values[slot] = to_scalar(&enc.encode(&tape, &vol)?, &w)?.item();
                set_encoder_param(&mut enc, target, idx, -delta)?;
            }
            let numeric = (values[0] - values[1]) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grad[idx], numeric));
        }
    }
    Ok(CheckReport {
        name: "encode_image".to_string(),
        max_rel_err: max_err,
        tolerance: OP_TOLERANCE,
    })
}

fn set_encoder_param(
    enc: &mut ImageEncoder<f64>,
    target: &str,
    idx: usize,
    delta: f64,
) -> Result<()> {
    let mut result = Ok(());
    let mut found = false;
    enc.visit_mut("enc", &mut |name, t| {
        if name == target && !found {
            found = true;
            match t.data_mut() {
                Ok(d) => d[idx] += delta,
                Err(e) => result = Err(e),
            }
        }
    });
    if !found {
        return Err(Error::contract(format!("no parameter named {target}")));
    }
    result
}

fn check_pipeline(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let specs = vec![
        ModalitySpec::new("scan", ModalityKind::Image { dims: (16, 16, 16) }),
        ModalitySpec::new("age", ModalityKind::Ordinal),
        ModalitySpec::new("apoe", ModalityKind::Categorical { vocab: 3 }),
    ];
    let mut model = MixerModel::<f64>::new(specs, d, h, false, &[4, 4, 4, 4], 1, rng.gen())?;
    model.set_ordinal_stats("age", 0.0, 1.0)?;

    let voxels: Vec<f32> = uniform(rng, 16 * 16 * 16, -1.0, 1.0)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let volume = crate::data::volume::Volume::from_normalized((16, 16, 16), voxels)?;
    let batch = ModalityBatch {
        cells: vec![vec![
            Cell::present(Value::Volume(volume)),
            Cell::present(Value::Ordinal(0.7)),
            Cell::present(Value::Categorical(1)),
        ]],
    };
    let labels = [1usize];

    let loss_of = |model: &MixerModel<f64>| -> Result<f64> {
        let tape = Tape::new();
        let out = model.forward(&tape, &batch, Mode::Eval)?;
        Ok(compute_total_loss(&out.final_logits, &out.aux_logits, &labels, 1.0)?.item())
    };

    // Analytic pass.
    let tape = Tape::new();
    let out = model.forward(&tape, &batch, Mode::Eval)?;
    let total = compute_total_loss(&out.final_logits, &out.aux_logits, &labels, 1.0)?;
    total.backward()?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, t| {
        let g = tape.grad_of(t).unwrap_or_else(|| vec![0.0; t.numel()]);
        analytic.push((name, g));
    });

    let sampled = [
        "query",
        "embed.scan.stem0.kernel",
        "embed.scan.block3.conv2.kernel",
        "embed.scan.pos_embed",
        "embed.scan.enc0.ff_w1",
        "embed.scan.proj_w",
        "embed.age.weight",
        "embed.age.bias",
        "embed.apoe.table",
        "mixer.scan.ln1_gamma",
        "mixer.age.self_attn.wq0",
        "mixer.apoe.cross_attn.wo",
        "aux.scan.w1",
        "aux.age.b1",
        "final.w2",
        "final.b2",
    ];
    let mut max_err = 0.0f64;
    for target in sampled {
        let grad = &analytic
            .iter()
            .find(|(n, _)| n == target)
            .ok_or_else(|| Error::contract(format!("no parameter named {target}")))?
            .1;
        for idx in probe_indices(grad.len()) {
            let mut values = [0.0f64; 2];
            for (slot, delta) in [(0usize, FD_STEP), (1usize, -FD_STEP)] {
                set_model_param(&mut model, target, idx, delta)?;
                values[slot] = loss_of(&model)?;
                set_model_param(&mut model, target, idx, -delta)?;
            }
            let numeric = (values[0] - values[1]) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grad[idx], numeric));
        }
    }
    Ok(CheckReport {
        name: "pipeline".to_string(),
        max_rel_err: max_err,
        tolerance: PIPELINE_TOLERANCE,
    })
}

fn set_model_param(
    model: &mut MixerModel<f64>,
    target: &str,
    idx: usize,
    delta: f64,
) -> Result<()> {
    let mut result = Ok(());
    let mut found = false;
    model.visit_params_mut(&mut |name, t| {
        if name == target && !found {
            found = true;
            match t.data_mut() {
                Ok(d) => d[idx] += delta,
                Err(e) => result = Err(e),
            }
        }
    });
    if !found {
        return Err(Error::contract(format!("no parameter named {target}")));
    }
    result
}

/// Run every check. `d` and `h` size the end-to-end pipeline model.
pub fn run_all(d: usize, h: usize, seed: u64) -> Result<Vec<CheckReport>> {
    if d == 0 || h == 0 || d % h != 0 {
        return Err(Error::config(format!(
            "pipeline dimension {} must be a positive multiple of head count {}",
            d, h
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = op_checks(&mut rng)?;
    reports.push(check_encoder(&mut rng)?);
    reports.push(check_pipeline(d, h, &mut rng)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_at_default_dims() {
        let reports = run_all(8, 2, 0).unwrap();
        assert!(reports.len() >= 19, "only {} checks registered", reports.len());
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: max rel err {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
        let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
        for expected in ["matmul", "softmax", "conv3d_stride1", "encode_image", "pipeline"] {
            assert!(names.contains(&expected), "missing check '{expected}'");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = probe_weights(&mut rng, 6);
        let init = uniform(&mut rng, 12, -1.0, 1.0);
        let report = check_graph_inner(
            "matmul_corrupted",
            &[vec![3, 4], vec![4, 2]],
            &[init, uniform(&mut rng, 8, -1.0, 1.0)],
            &move |_, xs| to_scalar(&xs[0].matmul(&xs[1])?, &w),
            Some((5, 0.25)),
        )
        .unwrap();
        assert!(!report.passed(), "corruption went unnoticed");
        assert_eq!(report.name, "matmul_corrupted");
    }

    #[test]
    fn bad_pipeline_dims_are_a_config_error() {
        assert!(matches!(run_all(9, 2, 0), Err(Error::Config(_))));
        assert!(matches!(run_all(0, 1, 0), Err(Error::Config(_))));
    }
}
