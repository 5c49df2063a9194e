//! Layer-wise task loss, exact gradients via the tape, a finite-difference
//! oracle, and the optimizer loop.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticExample;
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::model::{self, Model, ModelParams};
use crate::numerics::{self, SeededRng, Tensor2D};
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean of `per_layer`.
    pub total: f64,
    /// Summed token cross-entropy read off each supervised decoder layer.
    pub per_layer: Vec<f64>,
    pub token_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Supervise every decoder layer; otherwise only the last.
    pub layerwise_loss: bool,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * decay * p`.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            steps: 500,
            batch_size: 16,
            seed: 0,
            layerwise_loss: true,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Contract(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Contract("steps and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Contract("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Contract("adam_eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Position of one scalar parameter: tensor number in canonical order, then
/// the row-major offset inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub tensor: usize,
    pub index: usize,
}

/// Teacher-forced logits of every decoder layer, shallowest first, each of
/// shape `targets × vocab`. The encoder always runs at full depth.
pub fn forward_all_layers(model: &Model, example: &SyntheticExample) -> Result<Vec<Tensor2D>> {
    example.check(&model.config)?;
    model::teacher_forced_logits(
        &mut Eval,
        &model.params,
        &model.config,
        &example.grid,
        &example.text,
        &example.decoder_inputs(),
        true,
    )
}

/// Cross-entropy of each supplied layer's logits; the total is their mean.
pub fn layerwise_loss(per_layer_logits: &[Tensor2D], targets: &[usize]) -> Result<LossReport> {
    if per_layer_logits.is_empty() {
        return Err(Error::Contract("no layer logits to score".into()));
    }
    let per_layer = per_layer_logits
        .iter()
        .map(|l| {
            if l.rows() != targets.len() {
                return Err(Error::Contract(format!(
                    "{} logit rows for {} targets",
                    l.rows(),
                    targets.len()
                )));
            }
            numerics::cross_entropy(l, targets)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport {
        total: per_layer.iter().sum::<f64>() / per_layer.len() as f64,
        per_layer,
        token_count: targets.len(),
    })
}

/// Configured objective for one example, evaluated without a tape.
pub fn example_loss(model: &Model, example: &SyntheticExample, layerwise: bool) -> Result<LossReport> {
    let mut logits = forward_all_layers(model, example)?;
    if !layerwise {
        logits = vec![logits.pop().expect("at least one decoder layer")];
    }
    layerwise_loss(&logits, &example.decoder_targets())
}

/// Objective as a scalar through any graph backend: mean over supervised
/// layers of summed token cross-entropy.
fn objective<G: Graph>(
    g: &mut G,
    w: &model::Weights<G::Var>,
    model: &Model,
    example: &SyntheticExample,
    layerwise: bool,
) -> Result<(G::Var, Vec<f64>)> {
    let targets = example.decoder_targets();
    let logits = model::teacher_forced_logits(
        g,
        w,
        &model.config,
        &example.grid,
        &example.text,
        &example.decoder_inputs(),
        layerwise,
    )?;
    let mut per_layer = Vec::with_capacity(logits.len());
    let mut sum: Option<G::Var> = None;
    for l in &logits {
        let ce = g.cross_entropy(l, &targets)?;
        per_layer.push(g.value(&ce).data()[0]);
        sum = Some(match sum {
            None => ce,
            Some(s) => g.add(&s, &ce)?,
        });
    }
    let sum = sum.expect("at least one decoder layer");
    let mean = g.scale(&sum, 1.0 / logits.len() as f64);
    Ok((mean, per_layer))
}

/// Exact gradients of the configured objective for one example.
pub fn backward(model: &Model, example: &SyntheticExample, cfg: &TrainConfig) -> Result<(LossReport, ModelParams)> {
    example.check(&model.config)?;
    let mut tape = Tape::new();
    let leaves = model.params.map(|_, t| tape.leaf(t));
    let (root, per_layer) = objective(&mut tape, &leaves, model, example, cfg.layerwise_loss)?;
    let total = tape.value(&root).data()[0];
    let mut grads = tape.backward(root)?;
    let params = &model.params;
    let mut shapes = params.refs().into_iter();
    let gradient = leaves.map(|_, v| {
        let shape = shapes.next().expect("same layout").shape();
        grads.take(*v).unwrap_or_else(|| Tensor2D::zeros(shape.0, shape.1))
    });
    Ok((
        LossReport {
            total,
            per_layer,
            token_count: example.decoder_targets().len(),
        },
        gradient,
    ))
}

/// Objective value with one scalar parameter replaced by `value`.
fn loss_at(model: &mut Model, example: &SyntheticExample, coord: ParamCoord, value: f64, layerwise: bool) -> Result<f64> {
    let mut i = 0;
    let mut old = None;
    model.params.visit_mut(|_, t| {
        if i == coord.tensor {
            old = Some(t.data()[coord.index]);
            t.data_mut()[coord.index] = value;
        }
        i += 1;
    });
    let loss = example_loss(model, example, layerwise).map(|r| r.total);
    let old = old.expect("coordinate checked");
    let mut i = 0;
    model.params.visit_mut(|_, t| {
        if i == coord.tensor {
            t.data_mut()[coord.index] = old;
        }
        i += 1;
    });
    loss
}

/// `(f(x+ε) − f(x−ε)) / 2ε`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, epsilon: f64) -> f64 {
    (f(x + epsilon) - f(x - epsilon)) / (2.0 * epsilon)
}

/// Central-difference derivative of the configured objective with respect to
/// one scalar parameter. The model is restored before returning.
pub fn finite_diff_grad(
    model: &mut Model,
    example: &SyntheticExample,
    coord: ParamCoord,
    epsilon: f64,
    layerwise: bool,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon {epsilon} must be positive")));
    }
    let refs = model.params.refs();
    let tensor = refs.get(coord.tensor).ok_or(Error::Index {
        what: "parameter tensor",
        index: coord.tensor,
        len: refs.len(),
    })?;
    let x = *tensor.data().get(coord.index).ok_or(Error::Index {
        what: "parameter entry",
        index: coord.index,
        len: tensor.len(),
    })?;
    let plus = loss_at(model, example, coord, x + epsilon, layerwise)?;
    let minus = loss_at(model, example, coord, x - epsilon, layerwise)?;
    Ok((plus - minus) / (2.0 * epsilon))
}

/// Mean loss and mean gradients over a batch, accumulated in batch order.
pub fn batch_gradients(model: &Model, batch: &[&SyntheticExample], cfg: &TrainConfig) -> Result<(LossReport, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut acc: Option<(LossReport, ModelParams)> = None;
    for ex in batch {
        let (report, grads) = backward(model, ex, cfg)?;
        acc = Some(match acc {
            None => (report, grads),
            Some((mut r, mut g)) => {
                r.total += report.total;
                for (a, b) in r.per_layer.iter_mut().zip(&report.per_layer) {
                    *a += b;
                }
                r.token_count += report.token_count;
                g.zip_mut(&grads, |a, b| {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                });
                (r, g)
            }
        });
    }
    let (mut report, mut grads) = acc.expect("nonempty batch");
    let n = batch.len() as f64;
    report.total /= n;
    for v in &mut report.per_layer {
        *v /= n;
    }
    grads.visit_mut(|_, t| {
        for x in t.data_mut() {
            *x /= n;
        }
    });
    Ok((report, grads))
}

/// Mean per-example loss over a dataset.
pub fn evaluate_loss(model: &Model, data: &[SyntheticExample], layerwise: bool) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let mut total = 0.0;
    let mut per_layer: Vec<f64> = Vec::new();
    let mut tokens = 0;
    for ex in data {
        let r = example_loss(model, ex, layerwise)?;
        total += r.total;
        if per_layer.is_empty() {
            per_layer = vec![0.0; r.per_layer.len()];
        }
        for (a, b) in per_layer.iter_mut().zip(&r.per_layer) {
            *a += b;
        }
        tokens += r.token_count;
    }
    let n = data.len() as f64;
    Ok(LossReport {
        total: total / n,
        per_layer: per_layer.into_iter().map(|v| v / n).collect(),
        token_count: tokens,
    })
}

/// Optimizer state carried across steps.
pub struct OptimizerState {
    step: u64,
    first: ModelParams,
    second: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
        self.step += 1;
        let lr = cfg.learning_rate;
        let decay = cfg.weight_decay;
        match cfg.optimizer {
            Optimizer::Sgd => params.zip_mut(grads, |p, g| {
                for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * (d + decay * *x);
                }
            }),
            Optimizer::Adam => {
                let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
                self.first.zip_mut(grads, |m, g| {
                    for (x, d) in m.data_mut().iter_mut().zip(g.data()) {
                        *x = b1 * *x + (1.0 - b1) * d;
                    }
                });
                self.second.zip_mut(grads, |v, g| {
                    for (x, d) in v.data_mut().iter_mut().zip(g.data()) {
                        *x = b2 * *x + (1.0 - b2) * d * d;
                    }
                });
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                let firsts = self.first.refs();
                let seconds = self.second.refs();
                let mut i = 0;
                params.visit_mut(|_, p| {
                    let (m, v) = (firsts[i].data(), seconds[i].data());
                    for ((x, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                        let update = (mi / c1) / ((vi / c2).sqrt() + eps);
                        *x -= lr * (update + decay * *x);
                    }
                    i += 1;
                });
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Batch-mean loss at every step, before that step's update.
    pub curve: Vec<LossReport>,
}

/// Deterministic mini-batch training. Batches are drawn from a fresh
/// seeded shuffle of the dataset each epoch.
pub fn train(model: &mut Model, data: &[SyntheticExample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_, _| {})
}

/// Like [`train`], calling `on_step(step, report)` after every step.
pub fn train_with(
    model: &mut Model,
    data: &[SyntheticExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    for ex in data {
        ex.check(&model.config)?;
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut state = OptimizerState::new(&model.params);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(model, &batch, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { step, loss: loss.total });
        }
        state.apply(&mut model.params, &grads, cfg);
        if !model.params.is_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        on_step(step, &loss);
        report.curve.push(loss);
    }
    Ok(report)
}
