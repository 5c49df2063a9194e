//! Efficiency and quality measurement: expected time reduction from exit
//! traces, task scores, layer-similarity profiles, and threshold sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticExample, Task};
use crate::engine::{generate, ExitTrace, GenerationOutput};
use crate::error::{Error, Result};
use crate::exitpolicy::{ExitPolicyConfig, PolicyKind};
use crate::model::{Model, ModelConfig, EOS};

/// How the two encoder exit layers combine into one encoder depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeWeighting {
    /// Plain mean of the image and text exit layers.
    Pair,
    /// Mean weighted by each modality's token count.
    Tokens,
}

/// `1 − (n_E/N_E + Σ n_D/(T·N_D)) / 2` for one trace, where `T` is the number
/// of generated tokens and `n_E = (p + q) / 2`.
pub fn expected_time_reduction(trace: &ExitTrace, cfg: &ModelConfig) -> Result<f64> {
    expected_time_reduction_with(trace, cfg, TimeWeighting::Pair)
}

pub fn expected_time_reduction_with(trace: &ExitTrace, cfg: &ModelConfig, weighting: TimeWeighting) -> Result<f64> {
    let tokens = trace.per_token_decoder_exit.len() as u128;
    if tokens == 0 {
        return Err(Error::Contract("trace has no generated tokens".into()));
    }
    let (ne, nd) = (cfg.n_enc_layers as u128, cfg.n_dec_layers as u128);
    let (p, q) = (trace.image_exit_layer as u128, trace.text_exit_layer as u128);
    if !(1..=ne).contains(&p) || !(1..=ne).contains(&q) {
        return Err(Error::Contract(format!("encoder exits ({p}, {q}) outside 1..={ne}")));
    }
    if trace.per_token_decoder_exit.iter().any(|&e| e == 0 || e as u128 > nd) {
        return Err(Error::Contract(format!("decoder exit outside 1..={nd}")));
    }
    // Encoder fraction as enc_num / enc_den, decoder fraction as dec_num / dec_den.
    let (enc_num, enc_den) = match weighting {
        TimeWeighting::Pair => (p + q, 2 * ne),
        TimeWeighting::Tokens => {
            let (ni, nt) = (trace.image_tokens as u128, trace.text_tokens as u128);
            if ni + nt == 0 {
                return Err(Error::Contract("trace records no encoder tokens".into()));
            }
            (p * ni + q * nt, (ni + nt) * ne)
        }
    };
    let dec_num: u128 = trace.per_token_decoder_exit.iter().map(|&e| e as u128).sum();
    let dec_den = tokens * nd;
    let den = 2 * enc_den * dec_den;
    let num = den - (enc_num * dec_den + dec_num * enc_den);
    Ok(num as f64 / den as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean of per-example time reductions.
pub fn dataset_time_reduction(traces: &[ExitTrace], cfg: &ModelConfig, weighting: TimeWeighting) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Contract("no traces".into()));
    }
    let values = traces
        .iter()
        .map(|t| expected_time_reduction_with(t, cfg, weighting))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&values))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    /// First emitted token equals the first reference token.
    pub accuracy: f64,
    pub exact_match: f64,
    pub token_f1: f64,
}

impl QualityScores {
    /// Headline score for a task: accuracy for classification, exact match
    /// for generation.
    pub fn headline(&self, task: Task) -> f64 {
        if task.is_classification() {
            self.accuracy
        } else {
            self.exact_match
        }
    }
}

fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.split_last() {
        Some((&EOS, rest)) => rest,
        _ => tokens,
    }
}

/// Multiset token overlap F1. Two empty sequences score 1.
pub fn token_f1(output: &[usize], reference: &[usize]) -> f64 {
    if output.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if output.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut remaining = reference.to_vec();
    let mut overlap = 0usize;
    for t in output {
        if let Some(pos) = remaining.iter().position(|r| r == t) {
            remaining.swap_remove(pos);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / output.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Scores generated token sequences against references. Trailing EOS on
/// either side is ignored.
pub fn quality_scores(outputs: &[Vec<usize>], references: &[Vec<usize>]) -> Result<QualityScores> {
    if outputs.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} outputs for {} references",
            outputs.len(),
            references.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Contract("nothing to score".into()));
    }
    let n = outputs.len() as f64;
    let (mut acc, mut em, mut f1) = (0.0, 0.0, 0.0);
    for (o, r) in outputs.iter().zip(references) {
        let (o, r) = (strip_eos(o), strip_eos(r));
        if o.first().is_some() && o.first() == r.first() {
            acc += 1.0;
        }
        if o == r {
            em += 1.0;
        }
        f1 += token_f1(o, r);
    }
    Ok(QualityScores {
        accuracy: acc / n,
        exact_match: em / n,
        token_f1: f1 / n,
    })
}

/// Generation outputs for a dataset under one policy, in dataset order.
pub fn run_dataset(model: &Model, data: &[SyntheticExample], policy: &ExitPolicyConfig) -> Result<Vec<GenerationOutput>> {
    data.iter().map(|ex| generate(model, ex, policy)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationProfile {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub decoder: Vec<f64>,
}

/// Mean layer-to-layer similarity per stack over the first `sample_count`
/// examples, running every stack at full depth.
pub fn saturation_profile(model: &Model, data: &[SyntheticExample], sample_count: usize) -> Result<SaturationProfile> {
    if sample_count == 0 || data.is_empty() {
        return Err(Error::Contract("saturation profile needs at least one example".into()));
    }
    let policy = ExitPolicyConfig {
        record_signals: true,
        ..ExitPolicyConfig::never()
    };
    let (ne, nd) = (model.config.n_enc_layers, model.config.n_dec_layers);
    let mut image = vec![0.0; ne];
    let mut text = vec![0.0; ne];
    let mut decoder = vec![0.0; nd];
    let mut decoder_rows = 0usize;
    let samples = &data[..sample_count.min(data.len())];
    for ex in samples {
        let out = generate(model, ex, &policy)?;
        let s = out.trace.signals.expect("signals requested");
        for (acc, v) in image.iter_mut().zip(&s.image) {
            *acc += v;
        }
        for (acc, v) in text.iter_mut().zip(&s.text) {
            *acc += v;
        }
        for step in &s.decoder {
            for (acc, v) in decoder.iter_mut().zip(step) {
                *acc += v;
            }
            decoder_rows += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(SaturationProfile {
        image: image.into_iter().map(|v| v / n).collect(),
        text: text.into_iter().map(|v| v / n).collect(),
        decoder: decoder.into_iter().map(|v| v / decoder_rows.max(1) as f64).collect(),
    })
}

pub fn profile_csv(profile: &SaturationProfile) -> String {
    let mut s = String::from("layer,stack,mean_similarity\n");
    for (stack, values) in [("image", &profile.image), ("text", &profile.text), ("decoder", &profile.decoder)] {
        for (i, v) in values.iter().enumerate() {
            s.push_str(&format!("{},{stack},{}\n", i + 1, format_float(*v)));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub policy: String,
    pub theta: f64,
    pub beta: f64,
    pub tau: f64,
    pub time_reduction: f64,
    pub quality: f64,
    pub exact_match: f64,
    pub token_f1: f64,
    pub n_examples: usize,
    /// Zero unless timing was requested.
    pub wall_ms_per_example: f64,
}

/// The policy a sweep evaluates at grid value `theta`. Similarity policies
/// use it as the threshold on every stack; the confidence baseline as its
/// probability level; the patience baseline as its patience (rounded).
pub fn policy_at(base: &ExitPolicyConfig, theta: f64) -> ExitPolicyConfig {
    let mut p = base.clone();
    match base.kind {
        PolicyKind::Never => {}
        PolicyKind::Static | PolicyKind::Decay => {
            p.theta = theta;
            p.theta_image = theta;
            p.theta_text = theta;
        }
        PolicyKind::Confidence => p.confidence_level = theta,
        PolicyKind::Patience => p.patience = theta.round().max(1.0) as usize,
    }
    p
}

pub struct SweepOptions {
    pub weighting: TimeWeighting,
    pub wall_clock: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            weighting: TimeWeighting::Pair,
            wall_clock: false,
        }
    }
}

/// Evaluates one policy over a dataset.
pub fn bench_point(
    model: &Model,
    data: &[SyntheticExample],
    policy: &ExitPolicyConfig,
    theta: f64,
    opts: &SweepOptions,
) -> Result<BenchRow> {
    if data.is_empty() {
        return Err(Error::Contract("empty benchmark set".into()));
    }
    let start = Instant::now();
    let outputs = run_dataset(model, data, policy)?;
    let elapsed = start.elapsed();
    let traces: Vec<ExitTrace> = outputs.iter().map(|o| o.trace.clone()).collect();
    let time_reduction = dataset_time_reduction(&traces, &model.config, opts.weighting)?;
    let tokens: Vec<Vec<usize>> = outputs.into_iter().map(|o| o.tokens).collect();
    let refs: Vec<Vec<usize>> = data.iter().map(|e| e.reference().to_vec()).collect();
    let scores = quality_scores(&tokens, &refs)?;
    let task = data[0].task;
    Ok(BenchRow {
        policy: policy.kind.as_str().to_string(),
        theta,
        beta: policy.beta,
        tau: policy.tau,
        time_reduction,
        quality: scores.headline(task),
        exact_match: scores.exact_match,
        token_f1: scores.token_f1,
        n_examples: data.len(),
        wall_ms_per_example: if opts.wall_clock {
            elapsed.as_secs_f64() * 1000.0 / data.len() as f64
        } else {
            0.0
        },
    })
}

/// One row per grid value, in grid order.
pub fn threshold_sweep(
    model: &Model,
    data: &[SyntheticExample],
    theta_grid: &[f64],
    base: &ExitPolicyConfig,
    opts: &SweepOptions,
) -> Result<Vec<BenchRow>> {
    if theta_grid.is_empty() {
        return Err(Error::Contract("empty threshold grid".into()));
    }
    theta_grid
        .iter()
        .map(|&theta| bench_point(model, data, &policy_at(base, theta), theta, opts))
        .collect()
}

pub const BENCH_HEADER: &str =
    "policy,theta,beta,tau,time_reduction,quality,exact_match,token_f1,n_examples,wall_ms_per_example";

/// Shortest round-trip-safe rendering with 17 significant digits: fixed
/// notation for moderate magnitudes, scientific otherwise.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return format!("{:.16}", 0.0);
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-5..17).contains(&exp) {
        format!("{:.*}", (16 - exp) as usize, v)
    } else {
        sci
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.policy,
            format_float(r.theta),
            format_float(r.beta),
            format_float(r.tau),
            format_float(r.time_reduction),
            format_float(r.quality),
            format_float(r.exact_match),
            format_float(r.token_f1),
            r.n_examples,
            format_float(r.wall_ms_per_example),
        ));
    }
    s
}
