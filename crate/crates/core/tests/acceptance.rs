//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to stderr (uncaptured) before asserting.
//!
//! Trained models are shared between tests through `OnceLock`s; runtime
//! budgets are measured as CPU time of the thread doing the work.

use std::io::Write;
use std::sync::OnceLock;

use mue::checkpoint::{from_bytes, to_bytes};
use mue::data;
use mue::engine::{generate, reference_generate};
use mue::evalbench::{bench_point, dataset_time_reduction, expected_time_reduction, saturation_profile, SweepOptions, TimeWeighting};
use mue::exitpolicy::decay_threshold;
use mue::training::{self, backward, evaluate_loss, finite_diff_grad, ParamCoord, TrainConfig};
use mue::{ExitPolicyConfig, ExitTrace, Model, ModelConfig, PolicyKind, SeededRng, SyntheticExample, Task};

fn cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0);
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {criterion} [{name}]: {verdict} {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

const ENTAIL_STEPS: usize = 1200;
const CAPTION_STEPS: usize = 600;
const LEARNING_RATE: f64 = 5e-4;
const TRAIN_COUNT: usize = 2000;
const HELD_OUT: usize = 500;

fn toy() -> ModelConfig {
    ModelConfig::default()
}

fn train_toy(task: Task, seed: u64, steps: usize, layerwise: bool) -> Model {
    let cfg = toy();
    let train = data::generate(1 + 10 * seed, TRAIN_COUNT, task, &cfg).unwrap();
    let mut model = Model::init(cfg, seed).unwrap();
    let tc = TrainConfig {
        learning_rate: LEARNING_RATE,
        steps,
        batch_size: 16,
        seed,
        layerwise_loss: layerwise,
        ..TrainConfig::default()
    };
    training::train(&mut model, &train, &tc).unwrap();
    model
}

fn held_out(task: Task) -> Vec<SyntheticExample> {
    data::generate(99, HELD_OUT, task, &toy()).unwrap()
}

struct Trained {
    model: Model,
    cpu_seconds: f64,
}

fn entail_model() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = cpu_seconds();
        let model = train_toy(Task::Entail, 0, ENTAIL_STEPS, true);
        Trained {
            model,
            cpu_seconds: cpu_seconds() - start,
        }
    })
}

/// Caption models for seeds 0..3, with and without the layer-wise loss.
struct CaptionRuns {
    layerwise: Vec<Model>,
    final_only: Vec<Model>,
    cpu_seconds: f64,
}

fn caption_models() -> &'static CaptionRuns {
    static CELL: OnceLock<CaptionRuns> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = cpu_seconds();
        let layerwise = (0..3).map(|s| train_toy(Task::Caption, s, CAPTION_STEPS, true)).collect();
        let final_only = (0..3).map(|s| train_toy(Task::Caption, s, CAPTION_STEPS, false)).collect();
        CaptionRuns {
            layerwise,
            final_only,
            cpu_seconds: cpu_seconds() - start,
        }
    })
}

fn quality(model: &Model, data: &[SyntheticExample], policy: &ExitPolicyConfig) -> (f64, f64) {
    let row = bench_point(model, data, policy, policy.theta, &SweepOptions::default()).unwrap();
    (row.quality, row.time_reduction)
}

#[test]
fn criterion_1_full_model_equivalence() {
    let start = cpu_seconds();
    let cfg = toy();
    let model = Model::init(cfg.clone(), 11).unwrap();
    let mut examples = data::generate(21, 50, Task::Entail, &cfg).unwrap();
    examples.extend(data::generate(22, 50, Task::Caption, &cfg).unwrap());
    let policies = [
        ExitPolicyConfig::never(),
        ExitPolicyConfig::uniform_static(1.01),
        ExitPolicyConfig {
            theta: 1.01,
            theta_image: 1.01,
            theta_text: 1.01,
            ..ExitPolicyConfig::default()
        },
    ];
    let mut mismatches = 0;
    let mut traces = Vec::new();
    for ex in &examples {
        let reference = reference_generate(&model, ex).unwrap();
        for p in &policies {
            let out = generate(&model, ex, p).unwrap();
            mismatches += usize::from(out.tokens != reference);
            traces.push(out.trace);
        }
    }
    let etr = dataset_time_reduction(&traces, &cfg, TimeWeighting::Pair).unwrap();
    let secs = cpu_seconds() - start;
    let pass = mismatches == 0 && etr == 0.0 && secs < 10.0;
    report(
        1,
        "full-model equivalence",
        pass,
        &format!("{mismatches} mismatches over 100 examples x 3 policies, time reduction {etr}, {secs:.2}s"),
    );
    assert!(pass);
}

/// Counts skipped layer executions one by one, independently of the metric's
/// closed form, and returns skipped / total over the two halves.
fn recount(trace: &ExitTrace, cfg: &ModelConfig) -> f64 {
    let (ne, nd) = (cfg.n_enc_layers as u64, cfg.n_dec_layers as u64);
    let tokens = trace.per_token_decoder_exit.len() as u64;
    let mut enc_skipped = 0u64;
    for exit in [trace.image_exit_layer, trace.text_exit_layer] {
        for layer in 1..=ne {
            enc_skipped += u64::from(layer > exit as u64);
        }
    }
    let mut dec_skipped = 0u64;
    for &exit in &trace.per_token_decoder_exit {
        for layer in 1..=nd {
            dec_skipped += u64::from(layer > exit as u64);
        }
    }
    // (enc_skipped / 2ne + dec_skipped / (tokens·nd)) / 2 over a common denominator.
    let (enc_total, dec_total) = (2 * ne, tokens * nd);
    let num = enc_skipped * dec_total + dec_skipped * enc_total;
    num as f64 / (2 * enc_total * dec_total) as f64
}

#[test]
fn criterion_2_metric_oracle() {
    let start = cpu_seconds();
    let mut rng = SeededRng::new(2024);
    let mut mismatches = 0;
    for i in 0..1000 {
        let (ne, nd) = (1 + rng.below(12), 1 + rng.below(12));
        let cfg = ModelConfig {
            n_enc_layers: ne,
            n_dec_layers: nd,
            ..toy()
        };
        let tokens = 1 + rng.below(20);
        let trace = ExitTrace {
            image_exit_layer: 1 + rng.below(ne),
            text_exit_layer: 1 + rng.below(ne),
            per_token_decoder_exit: (0..tokens).map(|_| 1 + rng.below(nd)).collect(),
            image_tokens: 16,
            text_tokens: 8,
            signals: None,
        };
        let got = expected_time_reduction(&trace, &cfg).unwrap();
        if got != recount(&trace, &cfg) {
            mismatches += 1;
            eprintln!("trace {i}: {trace:?} gives {got}");
        }
    }
    let hand = ExitTrace {
        image_exit_layer: 6,
        text_exit_layer: 6,
        per_token_decoder_exit: vec![3, 3, 6, 6],
        image_tokens: 16,
        text_tokens: 8,
        signals: None,
    };
    let hand_value = expected_time_reduction(&hand, &toy()).unwrap();
    let secs = cpu_seconds() - start;
    let pass = mismatches == 0 && hand_value == 0.125 && secs < 1.0;
    report(
        2,
        "metric oracle",
        pass,
        &format!("{mismatches}/1000 mismatches, hand case {hand_value}, {secs:.3}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_decay_threshold() {
    let published = ExitPolicyConfig {
        kind: PolicyKind::Decay,
        theta: 0.99,
        beta: 0.95,
        tau: 1.0,
        total_steps: 16,
        ..ExitPolicyConfig::default()
    };
    let start_value = decay_threshold(0, &published);
    let mut pass = (start_value - 0.9905).abs() <= 1e-12;
    let mut rng = SeededRng::new(3);
    for _ in 0..200 {
        let cfg = ExitPolicyConfig {
            theta: rng.uniform(),
            beta: rng.uniform() * 0.999,
            tau: 1e-3 + 5.0 * rng.uniform(),
            total_steps: 1 + rng.below(40),
            ..published.clone()
        };
        let first = decay_threshold(0, &cfg);
        pass &= (first - (cfg.beta * cfg.theta + 1.0 - cfg.beta)).abs() <= 1e-12;
        let values: Vec<f64> = (0..=cfg.total_steps).map(|t| decay_threshold(t, &cfg)).collect();
        pass &= values.windows(2).all(|w| w[1] <= w[0]);
    }
    report(3, "decay threshold", pass, &format!("threshold at step 0 = {start_value}"));
    assert!(pass);
}

#[test]
fn criterion_4_gradient_check() {
    let start = cpu_seconds();
    let cfg = toy();
    let mut model = Model::init(cfg.clone(), 4).unwrap();
    let mut noise = SeededRng::new(5);
    model.params.visit_mut(|_, t| {
        for v in t.data_mut() {
            *v += 0.05 * noise.normal();
        }
    });
    let ex = data::generate(6, 1, Task::Caption, &cfg).unwrap().remove(0);
    let tc = TrainConfig::default();
    let (_, grads) = backward(&model, &ex, &tc).unwrap();
    let grad_refs = grads.refs();
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut rng = SeededRng::new(7);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (tensor, g) in grad_refs.iter().enumerate() {
        // Per tensor, the largest-gradient of a few random candidates, so
        // every group is probed where the loss actually depends on it.
        let index = (0..8)
            .map(|_| rng.below(g.len()))
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap();
        let analytic = g.data()[index];
        let fd = finite_diff_grad(&mut model, &ex, ParamCoord { tensor, index }, 1e-5, true).unwrap();
        let rel = (analytic - fd).abs() / fd.abs().max(1e-8);
        if rel > worst.0 {
            worst = (rel, format!("{}[{index}]", names[tensor]));
        }
        checked += 1;
    }
    let secs = cpu_seconds() - start;
    let pass = checked >= 50 && worst.0 < 1e-4 && secs < 60.0;
    report(
        4,
        "gradient check",
        pass,
        &format!("{checked} coordinates over every tensor, worst relative error {:.2e} at {}, {secs:.1}s", worst.0, worst.1),
    );
    assert!(pass);
}

#[test]
fn criterion_5_threshold_monotonicity() {
    let start = cpu_seconds();
    let cfg = toy();
    let model = Model::init(cfg.clone(), 8).unwrap();
    let examples = data::generate(9, 50, Task::Entail, &cfg).unwrap();
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut violations = Vec::new();
    let mut etrs = Vec::new();
    for kind in [PolicyKind::Static, PolicyKind::Decay] {
        let runs: Vec<Vec<_>> = grid
            .iter()
            .map(|&theta| {
                let p = ExitPolicyConfig {
                    kind,
                    theta,
                    theta_image: theta,
                    theta_text: theta,
                    ..ExitPolicyConfig::default()
                };
                examples.iter().map(|ex| generate(&model, ex, &p).unwrap()).collect()
            })
            .collect();
        for pair in runs.windows(2) {
            for (i, (lo, hi)) in pair[0].iter().zip(&pair[1]).enumerate() {
                let (a, b) = (&lo.trace, &hi.trace);
                let mut ok = a.image_exit_layer <= b.image_exit_layer && a.text_exit_layer <= b.text_exit_layer;
                for (step, (x, y)) in a.per_token_decoder_exit.iter().zip(&b.per_token_decoder_exit).enumerate() {
                    ok &= x <= y;
                    if lo.tokens.get(step) != hi.tokens.get(step) {
                        break;
                    }
                }
                if !ok {
                    violations.push(format!("{} example {i}: {a:?} vs {b:?}", kind.as_str()));
                }
            }
        }
        let traces: Vec<Vec<ExitTrace>> = runs.iter().map(|r| r.iter().map(|o| o.trace.clone()).collect()).collect();
        let values: Vec<f64> = traces
            .iter()
            .map(|t| dataset_time_reduction(t, &cfg, TimeWeighting::Pair).unwrap())
            .collect();
        if !values.windows(2).all(|w| w[1] <= w[0]) {
            violations.push(format!("{} time reduction not decreasing: {values:?}", kind.as_str()));
        }
        etrs.push(values);
    }
    for v in &violations {
        eprintln!("{v}");
    }
    let secs = cpu_seconds() - start;
    let pass = violations.is_empty() && secs < 60.0;
    report(
        5,
        "threshold monotonicity",
        pass,
        &format!(
            "{} violations; static time reduction {:.3} at 0.0 to {:.3} at 1.0, {secs:.1}s",
            violations.len(),
            etrs[0][0],
            etrs[0][10]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_saturation_after_training() {
    let trained = entail_model();
    let test = held_out(Task::Entail);
    let (accuracy, _) = quality(&trained.model, &test, &ExitPolicyConfig::never());
    let profile = saturation_profile(&trained.model, &test, 100).unwrap();
    let rises = |v: &[f64]| v.last().unwrap() > v.first().unwrap();
    let pass = accuracy >= 0.9
        && rises(&profile.image)
        && rises(&profile.text)
        && rises(&profile.decoder)
        && trained.cpu_seconds <= 600.0;
    let fmt = |v: &[f64]| format!("{:.3}->{:.3}", v.first().unwrap(), v.last().unwrap());
    report(
        6,
        "saturation after training",
        pass,
        &format!(
            "entail accuracy {accuracy:.3}; similarity first->last image {} text {} decoder {}; training {:.0}s",
            fmt(&profile.image),
            fmt(&profile.text),
            fmt(&profile.decoder),
            trained.cpu_seconds
        ),
    );
    assert!(pass);
}

/// Exact match at the largest grid threshold whose time reduction is at
/// least 0.30, or `None` if no threshold reaches it.
fn exact_match_at_target(model: &Model, test: &[SyntheticExample]) -> Option<(f64, f64, f64)> {
    (0..=20).rev().map(|i| 0.80 + i as f64 / 100.0).find_map(|theta| {
        let p = ExitPolicyConfig {
            theta,
            total_steps: model.config.max_gen_len,
            ..ExitPolicyConfig::default()
        };
        let row = bench_point(model, test, &p, theta, &SweepOptions::default()).unwrap();
        (row.time_reduction >= 0.30).then_some((theta, row.time_reduction, row.exact_match))
    })
}

#[test]
fn criterion_7_layerwise_loss_ablation() {
    let runs = caption_models();
    let start = cpu_seconds();
    let test = data::generate(98, 200, Task::Caption, &toy()).unwrap();
    let mut detail = Vec::new();
    let mut means = [0.0; 2];
    let mut reached = true;
    for (slot, (label, models)) in [("layer-wise", &runs.layerwise), ("final-only", &runs.final_only)].into_iter().enumerate() {
        for (seed, m) in models.iter().enumerate() {
            match exact_match_at_target(m, &test) {
                Some((theta, etr, em)) => {
                    means[slot] += em / models.len() as f64;
                    detail.push(format!("{label} seed {seed}: theta {theta:.2} reduction {etr:.3} exact {em:.3}"));
                }
                None => {
                    reached = false;
                    detail.push(format!("{label} seed {seed}: no threshold reaches 0.30"));
                }
            }
        }
    }
    for d in &detail {
        eprintln!("{d}");
    }
    let secs = runs.cpu_seconds + cpu_seconds() - start;
    let pass = reached && means[0] >= means[1] && secs <= 1800.0;
    report(
        7,
        "layer-wise loss ablation",
        pass,
        &format!("mean exact match layer-wise {:.3} vs final-only {:.3}, {secs:.0}s", means[0], means[1]),
    );
    assert!(pass);
}

/// Accuracy lost when the image pass, then the text pass, is cut at `layer`.
fn forced_exit_losses(model: &Model, test: &[SyntheticExample], layer: usize) -> (f64, f64, f64) {
    let (full, _) = quality(model, test, &ExitPolicyConfig::never());
    let image = ExitPolicyConfig {
        fixed_image_exit: Some(layer),
        ..ExitPolicyConfig::never()
    };
    let text = ExitPolicyConfig {
        fixed_text_exit: Some(layer),
        ..ExitPolicyConfig::never()
    };
    (full, full - quality(model, test, &image).0, full - quality(model, test, &text).0)
}

#[test]
fn criterion_8_decomposition_asymmetry() {
    let entail = &entail_model().model;
    let caption = &caption_models().layerwise[0];
    let start = cpu_seconds();
    let layer = toy().n_enc_layers.div_ceil(3);
    let (ef, e_img, e_txt) = forced_exit_losses(entail, &held_out(Task::Entail), layer);
    let (cf, c_img, c_txt) = forced_exit_losses(caption, &held_out(Task::Caption), layer);
    let secs = cpu_seconds() - start;
    let entail_ok = e_img < e_txt;
    let caption_ok = c_txt < c_img;
    let pass = entail_ok && caption_ok && secs <= 300.0;
    report(
        8,
        "decomposition asymmetry",
        pass,
        &format!(
            "exit at layer {layer}: entail (full {ef:.3}) loses {e_img:.3} image-cut vs {e_txt:.3} text-cut [{}]; caption (full {cf:.3}) loses {c_img:.3} image-cut vs {c_txt:.3} text-cut [{}]; {secs:.0}s",
            if entail_ok { "ok" } else { "reversed" },
            if caption_ok { "ok" } else { "reversed" }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_persistence() {
    let start = cpu_seconds();
    let cfg = toy();
    let examples = data::generate(12, 40, Task::Caption, &cfg).unwrap();
    let mut model = Model::init(cfg.clone(), 13).unwrap();
    let tc = TrainConfig {
        steps: 5,
        batch_size: 4,
        ..TrainConfig::default()
    };
    training::train(&mut model, &examples, &tc).unwrap();
    let logged = evaluate_loss(&model, &examples[..10], true).unwrap().total;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    mue::checkpoint::save_checkpoint(&model.params, &path).unwrap();
    let saved = std::fs::read(&path).unwrap();
    let params = mue::checkpoint::load_checkpoint(&path, &cfg).unwrap();
    let resaved = to_bytes(&params);
    let reloaded = Model { config: cfg.clone(), params };
    let again = evaluate_loss(&reloaded, &examples[..10], true).unwrap().total;
    let direct = from_bytes(&saved, &cfg).unwrap() == model.params;
    let secs = cpu_seconds() - start;
    let pass = saved == resaved && direct && (again - logged).abs() <= 1e-12 && secs < 5.0;
    report(
        9,
        "persistence",
        pass,
        &format!("{} bytes round-trip identical: {}, loss {logged} vs {again}, {secs:.2}s", saved.len(), saved == resaved),
    );
    assert!(pass);
}
