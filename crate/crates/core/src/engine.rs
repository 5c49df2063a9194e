//! Early-exit inference: independent image and text encoder passes over the
//! shared stack, then greedy decoding where every generated token may leave
//! the decoder at its own depth.

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticExample, Task};
use crate::error::{Error, Result};
use crate::exitpolicy::{
    confidence_decision, patience_decision, similarity_signal, static_decision, ExitPolicyConfig, PolicyKind,
};
use crate::graph::Eval;
use crate::model::{self, DecoderCaches, HiddenState, Model, BOS, EOS, PAD};
use crate::numerics::{argmax, Tensor2D};

/// Per-layer similarities kept for profiling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerSignals {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    /// One list per generated token.
    pub decoder: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub image_exit_layer: usize,
    pub text_exit_layer: usize,
    pub per_token_decoder_exit: Vec<usize>,
    pub image_tokens: usize,
    pub text_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signals: Option<LayerSignals>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub tokens: Vec<usize>,
    pub trace: ExitTrace,
    /// Generation stopped at the step budget without emitting EOS.
    pub hit_limit: bool,
}

/// How an encoder pass decides where to stop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EncoderRule {
    Full,
    /// Stop after the first layer whose similarity to the previous strictly
    /// exceeds the threshold.
    Similarity(f64),
    /// Stop after exactly this many layers.
    Fixed(usize),
}

#[derive(Clone, Debug)]
pub struct EncoderRun {
    pub state: HiddenState,
    pub exit_layer: usize,
    pub signals: Vec<f64>,
}

pub fn run_encoder(model: &Model, state0: &HiddenState, rule: EncoderRule) -> Result<EncoderRun> {
    if state0.layer != 0 {
        return Err(Error::Contract(format!("encoder pass must start at layer 0, got {}", state0.layer)));
    }
    let depth = model.config.n_enc_layers;
    let stop_at = match rule {
        EncoderRule::Fixed(k) if k == 0 || k > depth => {
            return Err(Error::Contract(format!("fixed exit {k} outside 1..={depth}")));
        }
        EncoderRule::Fixed(k) => k,
        _ => depth,
    };
    let bias = model.encoder_bias(state0.modality, state0.tensor.rows())?;
    let mut state = state0.clone();
    let mut signals = Vec::with_capacity(stop_at);
    for layer in 1..=stop_at {
        let next = model.encoder_layer_forward(&state, layer, &bias)?;
        let signal = similarity_signal(&state, &next)?;
        signals.push(signal);
        state = next;
        if let EncoderRule::Similarity(theta) = rule {
            if static_decision(signal, theta).exit_now {
                break;
            }
        }
    }
    Ok(EncoderRun {
        exit_layer: state.layer,
        state,
        signals,
    })
}

/// Encoder output `C = [I_p; T_q]` and what each pass did.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub c: Tensor2D,
    pub image: EncoderRun,
    pub text: EncoderRun,
}

fn encoder_rule(fixed: Option<usize>, policy: &ExitPolicyConfig, theta: f64) -> EncoderRule {
    match fixed {
        Some(k) => EncoderRule::Fixed(k),
        None if policy.kind.gates_encoder() => EncoderRule::Similarity(theta),
        None => EncoderRule::Full,
    }
}

pub fn encode_example(model: &Model, example: &SyntheticExample, policy: &ExitPolicyConfig) -> Result<Encoded> {
    example.check(&model.config)?;
    let image = run_encoder(
        model,
        &model.embed_image(&example.grid)?,
        encoder_rule(policy.fixed_image_exit, policy, policy.theta_image),
    )?;
    let text = run_encoder(
        model,
        &model.embed_text(&example.text)?,
        encoder_rule(policy.fixed_text_exit, policy, policy.theta_text),
    )?;
    let c = Tensor2D::concat_rows(&[&image.state.tensor, &text.state.tensor])?;
    Ok(Encoded { c, image, text })
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Unrestricted greedy choice from `logits`.
    pub token: usize,
    pub exit_layer: usize,
    pub signals: Vec<f64>,
    pub logits: Tensor2D,
}

/// One generation step at step index `t` (0 for the first generated token).
/// Layers skipped by an exit still receive this position's key/value,
/// computed from the exit-layer state.
pub fn decode_step(
    model: &Model,
    caches: &mut DecoderCaches,
    prev_token: usize,
    t: usize,
    policy: &ExitPolicyConfig,
) -> Result<StepOutput> {
    let lengths = caches.lengths();
    if lengths.iter().any(|&l| l != t) {
        return Err(Error::State(format!("caches hold {lengths:?} positions at step {t}")));
    }
    let depth = model.config.n_dec_layers;
    let threshold = policy.decoder_threshold(t);
    let mut state = model.embed_decoder_token(prev_token)?;
    let mut signals = Vec::with_capacity(depth);
    let mut history = Vec::new();
    let mut logits = None;
    for layer in 1..=depth {
        let next = model.decoder_layer_forward(&state, layer, caches)?;
        let signal = similarity_signal(&state, &next)?;
        signals.push(signal);
        state = next;
        let exit = match policy.kind {
            PolicyKind::Never => false,
            PolicyKind::Static | PolicyKind::Decay => {
                static_decision(signal, threshold.expect("similarity policy has a threshold")).exit_now
            }
            PolicyKind::Confidence => {
                let l = model.decoder_logits(&state)?;
                let d = confidence_decision(&l, policy.confidence_level)?;
                logits = Some(l);
                d.exit_now
            }
            PolicyKind::Patience => {
                let l = model.decoder_logits(&state)?;
                history.push(argmax(l.row(0)));
                logits = Some(l);
                patience_decision(&history, policy.patience).exit_now
            }
        };
        if exit {
            break;
        }
    }
    let exit_layer = state.layer;
    if exit_layer < depth {
        caches.propagate(model, exit_layer, &state.tensor)?;
    }
    let logits = match logits {
        Some(l) => l,
        None => model.decoder_logits(&state)?,
    };
    Ok(StepOutput {
        token: argmax(logits.row(0)),
        exit_layer,
        signals,
        logits,
    })
}

/// Greedy choice for step `t` of `task`. A classification answer is the best
/// non-special token, followed by EOS.
fn choose_token(task: Task, t: usize, logits_row: &[f64]) -> usize {
    match (task.is_classification(), t) {
        (true, 0) => {
            let mut best = None;
            for (id, &v) in logits_row.iter().enumerate() {
                if id > PAD && best.map_or(true, |(_, b)| v > b) {
                    best = Some((id, v));
                }
            }
            best.map_or(EOS, |(id, _)| id)
        }
        (true, _) => EOS,
        (false, _) => argmax(logits_row),
    }
}

/// Number of decoder steps a task may take.
pub fn step_budget(model: &Model, task: Task) -> usize {
    if task.is_classification() {
        2
    } else {
        model.config.max_gen_len
    }
}

pub fn generate(model: &Model, example: &SyntheticExample, policy: &ExitPolicyConfig) -> Result<GenerationOutput> {
    policy.validate()?;
    let encoded = encode_example(model, example, policy)?;
    let mut caches = DecoderCaches::new(model, &encoded.c)?;
    let budget = step_budget(model, example.task);
    let mut tokens = Vec::new();
    let mut exits = Vec::new();
    let mut decoder_signals = Vec::new();
    let mut prev = BOS;
    let mut hit_limit = true;
    for t in 0..budget {
        let step = decode_step(model, &mut caches, prev, t, policy)?;
        let token = choose_token(example.task, t, step.logits.row(0));
        tokens.push(token);
        exits.push(step.exit_layer);
        if policy.record_signals {
            decoder_signals.push(step.signals);
        }
        if token == EOS {
            hit_limit = false;
            break;
        }
        prev = token;
    }
    let signals = policy.record_signals.then(|| LayerSignals {
        image: encoded.image.signals.clone(),
        text: encoded.text.signals.clone(),
        decoder: decoder_signals,
    });
    Ok(GenerationOutput {
        tokens,
        trace: ExitTrace {
            image_exit_layer: encoded.image.exit_layer,
            text_exit_layer: encoded.text.exit_layer,
            per_token_decoder_exit: exits,
            image_tokens: encoded.image.state.tensor.rows(),
            text_tokens: encoded.text.state.tensor.rows(),
            signals,
        },
        hit_limit,
    })
}

/// Label for a classification example: the first step of generation only.
pub fn classify(model: &Model, example: &SyntheticExample, policy: &ExitPolicyConfig) -> Result<usize> {
    if !example.task.is_classification() {
        return Err(Error::Contract(format!("classify on a {} example", example.task.as_str())));
    }
    policy.validate()?;
    let encoded = encode_example(model, example, policy)?;
    let mut caches = DecoderCaches::new(model, &encoded.c)?;
    let step = decode_step(model, &mut caches, BOS, 0, policy)?;
    Ok(choose_token(example.task, 0, step.logits.row(0)))
}

/// Full-depth greedy decoding that recomputes the whole decoder over the
/// growing prefix at every step, with no caches. Slow; used as a reference.
pub fn reference_generate(model: &Model, example: &SyntheticExample) -> Result<Vec<usize>> {
    example.check(&model.config)?;
    let memory = model::full_memory(&mut Eval, &model.params, &model.config, &example.grid, &example.text)?;
    let mut input = vec![BOS];
    let mut tokens = Vec::new();
    for t in 0..step_budget(model, example.task) {
        let logits = model::teacher_forced_decode(&mut Eval, &model.params, &model.config, &memory, &input, false)?;
        let last = logits.last().expect("final layer logits");
        let token = choose_token(example.task, t, last.row(t));
        tokens.push(token);
        if token == EOS {
            break;
        }
        input.push(token);
    }
    Ok(tokens)
}

/// Per-step logits of the reference decoder for a fixed token prefix.
pub fn reference_logits(model: &Model, example: &SyntheticExample, decoder_input: &[usize]) -> Result<Tensor2D> {
    let mut logits = model::teacher_forced_logits(
        &mut Eval,
        &model.params,
        &model.config,
        &example.grid,
        &example.text,
        decoder_input,
        false,
    )?;
    Ok(logits.pop().expect("final layer logits"))
}
