//! Minibatch SGD with momentum over the synthetic benchmark, with per-epoch
//! metrics and the loss-history trace.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afd::{decouple_loss, LossHistory};
use crate::config::{RunConfig, Window};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{accuracy, mean_accuracy};
use crate::model::Model;
use crate::parallel::Execution;
use crate::params::{splitmix64, Gradients, ParamStore};
use crate::synth::{argmax, Dataset, Sample};

/// Index split: the trailing `val_fraction` of samples is held out. With
/// nothing held out, validation reuses the training samples.
pub fn split(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let val = ((n as f64) * val_fraction).floor() as usize;
    let train: Vec<usize> = (0..n - val).collect();
    if val == 0 {
        return (train.clone(), train);
    }
    (train, (n - val..n).collect())
}

/// Evaluation of a parameter set on some samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: Vec<f64>,
    pub acc: Vec<f64>,
    pub macc: f64,
    /// Mean over samples and tasks of `|cos(f_sh, f_sp_j)|`.
    pub mean_abs_cos: f64,
    /// Per task, per sample.
    pub predictions: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub acc: Vec<f64>,
    pub macc: f64,
    /// Task weights in force during the epoch.
    pub weights: Vec<f64>,
    /// Change rates after the epoch's losses were recorded.
    pub rates: Vec<f64>,
    pub mu: f64,
    pub mean_abs_cos: f64,
    pub ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub metrics: Vec<MetricsRecord>,
    pub history: LossHistory,
    /// Final validation evaluation.
    pub eval: Evaluation,
}

struct SampleEval {
    ce: Vec<f64>,
    preds: Vec<usize>,
    abs_cos: f64,
}

fn eval_sample(model: &Model, ps: &ParamStore, s: &Sample) -> Result<SampleEval> {
    let mut g = Graph::with_params(ps);
    let out = model.forward(&mut g, &s.bundle)?;
    let mut ce = Vec::with_capacity(out.logits.len());
    let mut preds = Vec::with_capacity(out.logits.len());
    let mut abs_cos = 0.0;
    for (j, &l) in out.logits.iter().enumerate() {
        preds.push(argmax(g.value(l)));
        let c = g.cross_entropy(l, s.labels[j])?;
        ce.push(g.scalar(c));
        let cos = g.cosine(out.f_sh, out.f_sp[j], crate::afd::COSINE_EPS)?;
        abs_cos += g.scalar(cos).abs();
    }
    Ok(SampleEval {
        ce,
        preds,
        abs_cos: abs_cos / out.logits.len() as f64,
    })
}

/// No-gradient forward over `indices` of `data`.
pub fn evaluate(model: &Model, ps: &ParamStore, data: &Dataset, indices: &[usize], exec: Execution) -> Result<Evaluation> {
    if data.num_tasks() != model.num_tasks() {
        return Err(Error::ConfigMismatch(format!(
            "model has {} tasks, dataset {}",
            model.num_tasks(),
            data.num_tasks()
        )));
    }
    if indices.is_empty() {
        return Err(Error::EmptyList);
    }
    let results = exec.map(indices, |&i| eval_sample(model, ps, &data.samples[i]));
    let results: Vec<SampleEval> = results.into_iter().collect::<Result<_>>()?;
    let n = results.len() as f64;
    let tasks = model.num_tasks();
    let mut loss = vec![0.0; tasks];
    let mut predictions = vec![Vec::with_capacity(indices.len()); tasks];
    let mut cos = 0.0;
    for r in &results {
        for j in 0..tasks {
            loss[j] += r.ce[j];
            predictions[j].push(r.preds[j]);
        }
        cos += r.abs_cos;
    }
    loss.iter_mut().for_each(|l| *l /= n);
    let acc = (0..tasks)
        .map(|j| {
            let labels: Vec<usize> = indices.iter().map(|&i| data.samples[i].labels[j]).collect();
            accuracy(&predictions[j], &labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        macc: mean_accuracy(&acc)?,
        loss,
        acc,
        mean_abs_cos: cos / n,
        predictions,
    })
}

struct StepOut {
    grads: Gradients,
    ce: Vec<f64>,
    total: f64,
}

/// Forward and backward of one sample's share of the batch loss.
fn sample_step(
    model: &Model,
    ps: &ParamStore,
    s: &Sample,
    coeffs: &[f64],
    mu: Option<(f64, crate::afd::DecoupleMode)>,
    scale: f64,
) -> Result<StepOut> {
    let mut g = Graph::with_params(ps);
    let out = model.forward(&mut g, &s.bundle)?;
    let mut ce = Vec::with_capacity(coeffs.len());
    let mut terms = Vec::new();
    for (j, &l) in out.logits.iter().enumerate() {
        let c = g.cross_entropy(l, s.labels[j])?;
        ce.push(g.scalar(c));
        if coeffs[j] != 0.0 {
            terms.push(g.scale(c, coeffs[j]));
        }
    }
    if let Some((mu, mode)) = mu {
        let dec = decouple_loss(&mut g, out.f_sh, &out.f_sp, mode)?;
        terms.push(g.scale(dec, mu));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    let loss = g.scale(loss, scale);
    let total = g.scalar(loss);
    g.backward(loss)?;
    Ok(StepOut {
        grads: g.param_grads(),
        ce,
        total,
    })
}

/// Summed gradient of one minibatch's mean loss, and the batch-mean
/// cross-entropy of each task. Per-sample passes run under `exec`; the
/// reduction always follows batch order.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    model: &Model,
    ps: &ParamStore,
    data: &Dataset,
    batch: &[usize],
    coeffs: &[f64],
    decouple: Option<(f64, crate::afd::DecoupleMode)>,
    exec: Execution,
    step: usize,
) -> Result<(Gradients, Vec<f64>)> {
    let scale = 1.0 / batch.len() as f64;
    let outs = exec.map(batch, |&i| sample_step(model, ps, &data.samples[i], coeffs, decouple, scale));
    let mut grads = Gradients::zeros_like(ps);
    let mut batch_loss = vec![0.0; coeffs.len()];
    for o in outs {
        let o = o?;
        if !o.total.is_finite() || !o.grads.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        grads.add_assign(&o.grads);
        for (b, c) in batch_loss.iter_mut().zip(&o.ce) {
            *b += c * scale;
        }
    }
    Ok((grads, batch_loss))
}

/// SGD with momentum: `v = m v + g + wd p`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(ps: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: ps.ids().map(|id| vec![0.0; ps.get(id).len()]).collect(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore, grads: &Gradients) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let v = &mut self.velocity[id.index()];
            let p = ps.get_mut(id).data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= self.lr * *v;
            }
        }
    }
}

fn epoch_order(seed: u64, epoch: usize, train: &[usize]) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7368_7566_666c_65));
    rng.set_stream(epoch as u64);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Trains a freshly initialised model on `data`.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutput> {
    let (model, ps) = Model::init(cfg, &data.config)?;
    train_from(cfg, data, &model, ps)
}

/// Trains `model` starting from `ps`.
pub fn train_from(cfg: &RunConfig, data: &Dataset, model: &Model, mut ps: ParamStore) -> Result<TrainOutput> {
    let tasks = data.num_tasks();
    cfg.validate(tasks)?;
    if model.num_tasks() != tasks {
        return Err(Error::ConfigMismatch(format!(
            "model has {} tasks, dataset {tasks}",
            model.num_tasks()
        )));
    }
    let exec = if cfg.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let (train_idx, val_idx) = split(data.len(), cfg.val_fraction);
    if train_idx.is_empty() {
        return Err(Error::EmptyList);
    }
    let lambda = cfg.lambdas(tasks);
    let mut history = LossHistory::new(tasks, cfg.temperature, lambda.clone())?;
    let mut sgd = Sgd::new(&ps, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut steps_in_window = 0usize;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let epoch_weights = history.task_weights();
        let mut epoch_loss = vec![0.0; tasks];
        let mut mu = 0.0;
        for batch in epoch_order(cfg.seed, epoch, &train_idx).chunks(cfg.batch_size) {
            let weights = history.task_weights();
            let coeffs: Vec<f64> = (0..tasks)
                .map(|j| {
                    if !cfg.trains_task(j) {
                        0.0
                    } else if cfg.uses_d_task() {
                        weights[j] * lambda[j]
                    } else {
                        lambda[j]
                    }
                })
                .collect();
            mu = if cfg.uses_decouple() {
                cfg.decouple.mu(step, total_steps)
            } else {
                0.0
            };
            let dec = cfg.uses_decouple().then_some((mu, cfg.decouple.mode));
            let (mut grads, batch_loss) = batch_gradients(model, &ps, data, batch, &coeffs, dec, exec, step)?;
            if cfg.clip_norm > 0.0 {
                let n = grads.norm();
                if n > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / n);
                }
            }
            sgd.lr = cfg.learning_rate * cfg.lr_schedule.factor(step, total_steps);
            sgd.step(&mut ps, &grads);
            history.record(&batch_loss)?;
            for (e, b) in epoch_loss.iter_mut().zip(&batch_loss) {
                *e += b / steps_per_epoch as f64;
            }
            step += 1;
            steps_in_window += 1;
            if let Window::Steps(n) = cfg.window {
                if steps_in_window == n {
                    history.close_window();
                    steps_in_window = 0;
                }
            }
        }
        if cfg.window == Window::Epoch {
            history.close_window();
        }
        let ev = evaluate(model, &ps, data, &val_idx, exec)?;
        metrics.push(MetricsRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss,
            val_loss: ev.loss.clone(),
            acc: ev.acc.clone(),
            macc: ev.macc,
            weights: epoch_weights,
            rates: history.change_rates(),
            mu,
            mean_abs_cos: ev.mean_abs_cos,
            ms: if cfg.timing { started.elapsed().as_millis() } else { 0 },
        });
    }
    let eval = evaluate(model, &ps, data, &val_idx, exec)?;
    Ok(TrainOutput {
        params: ps,
        metrics,
        history,
        eval,
    })
}

/// Metrics CSV: the effective configuration as `#` comments, then
/// `epoch, loss_task1..N, acc_task1..N, mAcc, w_1..N, r_1..N, mu, ms`.
pub fn metrics_csv(cfg: &RunConfig, data: &Dataset, records: &[MetricsRecord]) -> String {
    let n = data.num_tasks();
    let mut out = String::new();
    for line in cfg.to_text().lines() {
        let _ = writeln!(out, "# {line}");
    }
    for line in data.config.to_text().lines() {
        let _ = writeln!(out, "# data.{line}");
    }
    out.push_str("epoch");
    for prefix in ["loss_task", "acc_task", "w_", "r_"] {
        if prefix == "w_" {
            out.push_str(",mAcc");
        }
        for j in 1..=n {
            let _ = write!(out, ",{prefix}{j}");
        }
    }
    out.push_str(",mu,ms\n");
    for r in records {
        let _ = write!(out, "{}", r.epoch);
        for v in r.train_loss.iter().chain(&r.acc) {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{}", r.macc);
        for v in r.weights.iter().chain(&r.rates) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{}", r.mu, r.ms);
    }
    out
}
