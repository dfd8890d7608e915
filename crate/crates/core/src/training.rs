//! Losses, the AdamW optimizer and the joint training loop.

use std::collections::BTreeMap;

use duplex_autograd::{Matrix, ParamId, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};
use crate::pipeline::Instance;

/// Mean cross-entropy over EDUs.
pub fn entail_loss(tape: &mut Tape, logits: Var, gold: &[usize]) -> Var {
    let ce = tape.cross_entropy_sum(logits, gold);
    tape.scale(ce, 1.0 / gold.len() as f64)
}

/// Token negative log-likelihood, summed or averaged over positions.
pub fn answer_loss(tape: &mut Tape, logits: Var, targets: &[usize], mean: bool) -> Var {
    let ce = tape.cross_entropy_sum(logits, targets);
    if mean {
        tape.scale(ce, 1.0 / targets.len() as f64)
    } else {
        ce
    }
}

/// `answer + lambda * entail`; the answer loss alone without an entailment term.
pub fn total_loss(tape: &mut Tape, answer: Var, entail: Option<Var>, lambda: f64) -> Var {
    match entail {
        Some(e) => {
            let weighted = tape.scale(e, lambda);
            tape.add(answer, weighted)
        }
        None => answer,
    }
}

pub fn combine(answer: f64, entail: f64, lambda: f64) -> f64 {
    answer + lambda * entail
}

#[derive(Clone, Debug)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: u32,
}

/// Adam with decoupled weight decay.
///
/// For a parameter `θ` with gradient `g` and its own step count `t`:
/// `m ← β1 m + (1 − β1) g`, `v ← β2 v + (1 − β2) g²`,
/// `m̂ = m / (1 − β1^t)`, `v̂ = v / (1 − β2^t)`,
/// `θ ← θ − lr (m̂ / (√v̂ + ε) + wd θ)`.
/// Parameters without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Matrix>, lr: impl Fn(ParamId) -> f64) {
        for (&id, g) in grads {
            let theta = store.get_mut(id);
            let st = self.moments.entry(id).or_insert_with(|| Moments {
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            let rate = lr(id);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, (p, &gi)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= rate * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }

    /// Steps taken for `id`, zero if it never received a gradient.
    pub fn steps_for(&self, id: ParamId) -> u32 {
        self.moments.get(&id).map_or(0, |s| s.t)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Matrix>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Matrix::sum_of_squares).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Linear warmup to the base rate, constant afterwards.
pub fn warmup_factor(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub answer_loss: f64,
    pub entail_loss: Option<f64>,
    pub loss: f64,
}

/// Optimizer state and progress of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: AdamW,
    pub lambda: f64,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            optimizer: AdamW::from_config(cfg),
            lambda: model.config.lambda,
        }
    }
}

/// Mean losses and gradients of a batch.
pub fn batch_gradients(model: &Model, batch: &[&Instance]) -> Result<(LogRecord, BTreeMap<ParamId, Matrix>)> {
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<ParamId, Matrix> = BTreeMap::new();
    let (mut answer, mut entail, mut total) = (0.0, None::<f64>, 0.0);
    for inst in batch {
        let mut tape = Tape::new();
        let l = model.losses(&mut tape, inst)?;
        answer += scale * tape.value(l.answer).item();
        if let Some(e) = l.entail {
            *entail.get_or_insert(0.0) += scale * tape.value(e).item();
        }
        total += scale * tape.value(l.total).item();
        let g = tape.backward(l.total);
        for (id, mut m) in g.into_params() {
            m.scale_in_place(scale);
            match grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&m),
                None => {
                    grads.insert(id, m);
                }
            }
        }
    }
    let record = LogRecord {
        step: 0,
        answer_loss: answer,
        entail_loss: entail,
        loss: total,
    };
    Ok((record, grads))
}

/// One optimizer step on `batch`; returns the batch losses before the update.
pub fn train_step(model: &mut Model, state: &mut TrainState, batch: &[&Instance], cfg: &TrainConfig) -> Result<LogRecord> {
    let (mut record, mut grads) = batch_gradients(model, batch)?;
    record.step = state.step;
    if !record.loss.is_finite() {
        return Err(Error::Diverged { step: state.step, loss: record.loss });
    }
    clip_global_norm(&mut grads, cfg.grad_clip);
    let factor = warmup_factor(state.step, cfg.warmup_steps);
    let (backbone, auxiliary) = (model.config.backbone_lr * factor, model.config.auxiliary_lr * factor);
    let groups: BTreeMap<ParamId, ParamGroup> = grads.keys().map(|&id| (id, model.group(id))).collect();
    state.optimizer.step(&mut model.store, &grads, |id| match groups[&id] {
        ParamGroup::Backbone => backbone,
        ParamGroup::Auxiliary => auxiliary,
    });
    state.step += 1;
    Ok(record)
}

/// Mean losses over a data set without updating parameters.
pub fn mean_losses(model: &Model, data: &[Instance]) -> Result<LogRecord> {
    let mut record = LogRecord { step: 0, answer_loss: 0.0, entail_loss: None, loss: 0.0 };
    let scale = 1.0 / data.len().max(1) as f64;
    for inst in data {
        let mut tape = Tape::new();
        let l = model.losses(&mut tape, inst)?;
        record.answer_loss += scale * tape.value(l.answer).item();
        if let Some(e) = l.entail {
            *record.entail_loss.get_or_insert(0.0) += scale * tape.value(e).item();
        }
        record.loss += scale * tape.value(l.total).item();
    }
    Ok(record)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    /// Losses of the final step's batch.
    pub last: LogRecord,
    pub best_dev_loss: Option<f64>,
    pub best_step: Option<usize>,
}

/// Joint training. With a dev set, the parameters with the lowest dev loss
/// are restored at the end.
pub fn train(
    model: &mut Model,
    data: &[Instance],
    dev: Option<&[Instance]>,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut state = TrainState::new(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut last = LogRecord { step: 0, answer_loss: f64::NAN, entail_loss: None, loss: f64::NAN };
    let dev = dev.filter(|d| !d.is_empty());

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        last = train_step(model, &mut state, &batch, cfg)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log::info!("step {step} loss {:.4} answer {:.4}", last.loss, last.answer_loss);
            on_log(&last);
        }
        let eval_now = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if let Some(dev) = dev {
            if eval_now || step + 1 == cfg.steps {
                let loss = mean_losses(model, dev)?.loss;
                log::info!("step {step} dev loss {loss:.4}");
                if best.as_ref().is_none_or(|b| loss < b.0) {
                    best = Some((loss, step, model.store.clone()));
                }
            }
        }
    }
    let (best_dev_loss, best_step) = match best {
        Some((loss, step, store)) => {
            model.store = store;
            (Some(loss), Some(step))
        }
        None => (None, None),
    };
    Ok(TrainReport {
        steps: state.step,
        last,
        best_dev_loss,
        best_step,
    })
}
