//! Cross-entropy training of the attention + pooling classifier:
//! analytic backpropagation, a finite-difference oracle, Adam, the
//! linear warmup/decay schedule, dropout, and checkpointing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_backward, multi_head_forward, multi_head_forward_cached, AttentionConfig,
    AttentionParams, FeatureMap, Mechanism, MhCache, ProjectionWeights,
};
use crate::dataio::{make_batches, Batch, EmbeddingSequence};
use crate::error::{Error, Result};
use crate::head::{self, ClassifierWeights, EvalReport, POOL_EPSILON};
use crate::numeric::{BinaryMask, Matrix, SeededRng};

/// Full trainable parameter set plus the frozen performer projection.
#[derive(Debug, Clone)]
pub struct LidModel {
    pub config: AttentionConfig,
    pub classes: usize,
    pub attn: AttentionParams,
    pub classifier: ClassifierWeights,
}

impl LidModel {
    /// Seeded initialization: projections and classifier entries are
    /// N(0, 1/d_in), biases and the depth-wise kernel start at zero, and
    /// the performer projection is drawn once and frozen.
    pub fn init(config: &AttentionConfig, classes: usize, rng: &SeededRng) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut init_rng = rng.derive("init");
        let proj_std = (1.0 / config.d_model as f64).sqrt();
        let mut proj = ProjectionWeights::zeros(config.d_model, config.d_attn);
        for w in [&mut proj.wq, &mut proj.wk, &mut proj.wv] {
            for v in w.data_mut() {
                *v = init_rng.next_normal() * proj_std;
            }
        }
        let dwc_kernel = match config.mechanism {
            Mechanism::Agent => Some(Matrix::zeros(config.dwc_width, config.d_attn)),
            _ => None,
        };
        let feature_map = match config.mechanism {
            Mechanism::Performer => Some(FeatureMap::new(
                &mut rng.derive("omega"),
                config.r,
                config.d_head(),
            )),
            _ => None,
        };
        let d_in = 2 * config.d_attn;
        let cls_std = (1.0 / d_in as f64).sqrt();
        let mut classifier = ClassifierWeights::zeros(d_in, classes);
        for v in classifier.w.data_mut() {
            *v = init_rng.next_normal() * cls_std;
        }
        Ok(LidModel {
            config: config.clone(),
            classes,
            attn: AttentionParams {
                proj,
                dwc_kernel,
                feature_map,
            },
            classifier,
        })
    }

    /// Ordered registry of trainable tensors; the frozen performer
    /// projection is excluded.
    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec!["w_q", "w_k", "w_v", "b_q", "b_k", "b_v"];
        if self.attn.dwc_kernel.is_some() {
            names.push("dwc_kernel");
        }
        names.push("cls_w");
        names.push("cls_b");
        names
    }

    pub fn param_shape(&self, name: &str) -> Result<(usize, usize)> {
        let (d_model, d_attn) = (self.config.d_model, self.config.d_attn);
        match name {
            "w_q" | "w_k" | "w_v" => Ok((d_model, d_attn)),
            "b_q" | "b_k" | "b_v" => Ok((1, d_attn)),
            "dwc_kernel" => {
                let k = self
                    .attn
                    .dwc_kernel
                    .as_ref()
                    .ok_or_else(|| Error::Config("no dwc kernel in this model".into()))?;
                Ok((k.rows(), k.cols()))
            }
            "cls_w" => Ok((2 * d_attn, self.classes)),
            "cls_b" => Ok((1, self.classes)),
            other => Err(Error::Config(format!("unknown parameter '{}'", other))),
        }
    }

    pub fn param(&self, name: &str) -> Result<&[f64]> {
        match name {
            "w_q" => Ok(self.attn.proj.wq.data()),
            "w_k" => Ok(self.attn.proj.wk.data()),
            "w_v" => Ok(self.attn.proj.wv.data()),
            "b_q" => Ok(&self.attn.proj.bq),
            "b_k" => Ok(&self.attn.proj.bk),
            "b_v" => Ok(&self.attn.proj.bv),
            "dwc_kernel" => self
                .attn
                .dwc_kernel
                .as_ref()
                .map(|k| k.data())
                .ok_or_else(|| Error::Config("no dwc kernel in this model".into())),
            "cls_w" => Ok(self.classifier.w.data()),
            "cls_b" => Ok(&self.classifier.b),
            other => Err(Error::Config(format!("unknown parameter '{}'", other))),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        match name {
            "w_q" => Ok(self.attn.proj.wq.data_mut()),
            "w_k" => Ok(self.attn.proj.wk.data_mut()),
            "w_v" => Ok(self.attn.proj.wv.data_mut()),
            "b_q" => Ok(&mut self.attn.proj.bq),
            "b_k" => Ok(&mut self.attn.proj.bk),
            "b_v" => Ok(&mut self.attn.proj.bv),
            "dwc_kernel" => self
                .attn
                .dwc_kernel
                .as_mut()
                .map(|k| k.data_mut())
                .ok_or_else(|| Error::Config("no dwc kernel in this model".into())),
            "cls_w" => Ok(self.classifier.w.data_mut()),
            "cls_b" => Ok(&mut self.classifier.b),
            other => Err(Error::Config(format!("unknown parameter '{}'", other))),
        }
    }
}

/// One gradient vector per registered parameter, flattened row-major.
pub type GradientSet = BTreeMap<String, Vec<f64>>;

/// Per-sequence intermediates retained for the backward pass.
#[derive(Debug, Clone)]
struct SeqCache {
    x: Matrix,
    mask: BinaryMask,
    mh: MhCache,
    /// Context after dropout (what the pooling saw).
    ctx_dropped: Matrix,
    ctx_drop_mask: Option<Matrix>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    pooled_dropped: Vec<f64>,
    pool_drop_mask: Option<Vec<f64>>,
    probs: Vec<f64>,
    label: usize,
}

/// Forward bookkeeping for one batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    seqs: Vec<SeqCache>,
}

fn dropout_matrix(m: &Matrix, rate: f64, rng: &mut SeededRng) -> (Matrix, Matrix) {
    let keep = 1.0 - rate;
    let mut mask = Matrix::zeros(m.rows(), m.cols());
    for v in mask.data_mut() {
        if rng.next_uniform() >= rate {
            *v = 1.0 / keep;
        }
    }
    let mut out = m.clone();
    for (o, k) in out.data_mut().iter_mut().zip(mask.data()) {
        *o *= k;
    }
    (out, mask)
}

fn dropout_vec(v: &[f64], rate: f64, rng: &mut SeededRng) -> (Vec<f64>, Vec<f64>) {
    let keep = 1.0 - rate;
    let mask: Vec<f64> = v
        .iter()
        .map(|_| if rng.next_uniform() >= rate { 1.0 / keep } else { 0.0 })
        .collect();
    let out = v.iter().zip(&mask).map(|(a, k)| a * k).collect();
    (out, mask)
}

/// Inverted dropout on a matrix; exposed for the expectation tests.
pub fn apply_dropout(m: &Matrix, rate: f64, rng: &mut SeededRng) -> Matrix {
    dropout_matrix(m, rate, rng).0
}

/// Mean cross-entropy over the batch with optional inverted dropout on
/// each context matrix and on the pooled descriptor.
///
/// `rng` is only consulted when `train_mode` is set and `dropout_rate`
/// is positive; eval mode is fully deterministic.
pub fn forward_loss(
    model: &LidModel,
    batch: &Batch,
    train_mode: bool,
    dropout_rate: f64,
    mut rng: Option<&mut SeededRng>,
) -> Result<(f64, ForwardCache)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::InvalidArgument("dropout rate must be in [0, 1)".into()));
    }
    let use_dropout = train_mode && dropout_rate > 0.0;
    if use_dropout && rng.is_none() {
        return Err(Error::InvalidArgument("dropout requires an rng".into()));
    }
    let mut seqs = Vec::with_capacity(batch.len());
    let mut total_loss = 0.0;
    for (((x, mask), &label), id) in batch
        .x
        .iter()
        .zip(&batch.masks)
        .zip(&batch.labels)
        .zip(&batch.ids)
    {
        if label >= model.classes {
            return Err(Error::InvalidArgument(format!(
                "label {} outside {} classes",
                label, model.classes
            )));
        }
        let (ctx, mh) = multi_head_forward_cached(x, &model.attn, &model.config, mask)?;
        if !ctx.is_finite() {
            return Err(Error::Numeric(format!("non-finite context for '{}'", id)));
        }
        let (ctx_dropped, ctx_drop_mask) = if use_dropout {
            let rng = rng.as_mut().unwrap();
            let (d, m) = dropout_matrix(&ctx, dropout_rate, rng);
            (d, Some(m))
        } else {
            (ctx, None)
        };
        let stats = head::stat_pool(&ctx_dropped, mask, POOL_EPSILON)?;
        let pooled = stats.concatenated();
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pooled stats for '{}'", id)));
        }
        let (pooled_dropped, pool_drop_mask) = if use_dropout {
            let rng = rng.as_mut().unwrap();
            let (d, m) = dropout_vec(&pooled, dropout_rate, rng);
            (d, Some(m))
        } else {
            (pooled, None)
        };
        let (logits, probs) = head::logits_softmax(&pooled_dropped, &model.classifier)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits for '{}'", id)));
        }
        total_loss += -probs[label].ln();
        seqs.push(SeqCache {
            x: x.clone(),
            mask: *mask,
            mh,
            ctx_dropped,
            ctx_drop_mask,
            mu: stats.mu,
            sigma: stats.sigma,
            pooled_dropped,
            pool_drop_mask,
            probs,
            label,
        });
    }
    let loss = total_loss / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((loss, ForwardCache { seqs }))
}

fn accumulate(grads: &mut GradientSet, name: &str, contribution: &[f64]) {
    let entry = grads
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; contribution.len()]);
    for (a, b) in entry.iter_mut().zip(contribution) {
        *a += b;
    }
}

/// Exact analytic gradients of the batch loss for every registered
/// parameter. The frozen performer projection receives none.
pub fn backward(model: &LidModel, cache: &ForwardCache) -> Result<GradientSet> {
    let mut grads: GradientSet = GradientSet::new();
    for name in model.param_names() {
        let (r, c) = model.param_shape(name)?;
        grads.insert(name.to_string(), vec![0.0; r * c]);
    }
    let batch_scale = 1.0 / cache.seqs.len() as f64;
    let d_attn = model.config.d_attn;

    for seq in &cache.seqs {
        let classes = model.classes;
        // Cross-entropy through softmax.
        let mut d_logits: Vec<f64> = seq.probs.iter().map(|p| p * batch_scale).collect();
        d_logits[seq.label] -= batch_scale;

        // Classifier: logits = s^T W + b.
        let mut d_cls_w = vec![0.0; 2 * d_attn * classes];
        for (i, &si) in seq.pooled_dropped.iter().enumerate() {
            for (l, &dl) in d_logits.iter().enumerate() {
                d_cls_w[i * classes + l] += si * dl;
            }
        }
        accumulate(&mut grads, "cls_w", &d_cls_w);
        accumulate(&mut grads, "cls_b", &d_logits);

        let mut d_pooled = vec![0.0; 2 * d_attn];
        for (i, d) in d_pooled.iter_mut().enumerate() {
            for (l, &dl) in d_logits.iter().enumerate() {
                *d += model.classifier.w.get(i, l) * dl;
            }
        }
        if let Some(mask) = &seq.pool_drop_mask {
            for (d, k) in d_pooled.iter_mut().zip(mask) {
                *d *= k;
            }
        }

        // Statistical pooling backward over the valid rows.
        let m = seq.mask.n_valid() as f64;
        let (d_mu, d_sigma) = d_pooled.split_at(d_attn);
        let mut d_ctx = Matrix::zeros(seq.ctx_dropped.rows(), d_attn);
        for i in 0..seq.mask.n_valid() {
            for j in 0..d_attn {
                let centered = seq.ctx_dropped.get(i, j) - seq.mu[j];
                let g = d_mu[j] / m + d_sigma[j] * centered / (m * seq.sigma[j]);
                d_ctx.set(i, j, g);
            }
        }
        if let Some(mask) = &seq.ctx_drop_mask {
            for (d, k) in d_ctx.data_mut().iter_mut().zip(mask.data()) {
                *d *= k;
            }
        }

        let mh_grads = multi_head_backward(&seq.mh, &model.attn, &model.config, &d_ctx)?;

        // Projections: Q = X Wq + bq and likewise for K, V. Padded rows
        // of the head gradients are zero, so the full X can be used.
        let xt = seq.x.transpose();
        for (w_name, b_name, dm) in [
            ("w_q", "b_q", &mh_grads.dq),
            ("w_k", "b_k", &mh_grads.dk),
            ("w_v", "b_v", &mh_grads.dv),
        ] {
            let dw = xt.matmul(dm)?;
            accumulate(&mut grads, w_name, dw.data());
            let mut db = vec![0.0; d_attn];
            for i in 0..dm.rows() {
                for (acc, v) in db.iter_mut().zip(dm.row(i)) {
                    *acc += v;
                }
            }
            accumulate(&mut grads, b_name, &db);
        }
        if let Some(dk) = &mh_grads.d_dwc {
            accumulate(&mut grads, "dwc_kernel", dk.data());
        }
    }
    Ok(grads)
}

/// Central difference of a scalar function; the oracle primitive.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Central finite differences of the batch loss with respect to one
/// parameter tensor. Dropout must be off; the feature map is fixed.
pub fn finite_diff_grad(
    model: &mut LidModel,
    batch: &Batch,
    name: &str,
    h: f64,
) -> Result<Vec<f64>> {
    let len = model.param(name)?.len();
    let mut grad = vec![0.0; len];
    for idx in 0..len {
        let original = model.param(name)?[idx];
        model.param_mut(name)?[idx] = original + h;
        let (plus, _) = forward_loss(model, batch, false, 0.0, None)?;
        model.param_mut(name)?[idx] = original - h;
        let (minus, _) = forward_loss(model, batch, false, 0.0, None)?;
        model.param_mut(name)?[idx] = original;
        grad[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Linear warmup to `base_lr` over `warmup_steps`, then linear decay to
/// zero over `decay_steps`, then zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

pub fn lr_at_step(s: u64, sched: &LrSchedule) -> f64 {
    if s <= sched.warmup_steps {
        if sched.warmup_steps == 0 {
            return sched.base_lr;
        }
        sched.base_lr * s as f64 / sched.warmup_steps as f64
    } else if s <= sched.warmup_steps + sched.decay_steps {
        let into = (s - sched.warmup_steps) as f64;
        sched.base_lr * (1.0 - into / sched.decay_steps as f64)
    } else {
        0.0
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators mirroring the parameter registry.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &LidModel) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in model.param_names() {
            let (r, c) = model.param_shape(name)?;
            m.insert(name.to_string(), vec![0.0; r * c]);
            v.insert(name.to_string(), vec![0.0; r * c]);
        }
        Ok(AdamState { m, v, step: 0 })
    }
}

/// Bias-corrected Adam update on one flattened tensor.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One optimizer step over every registered parameter.
pub fn adam_step(
    model: &mut LidModel,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    for name in model.param_names() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing gradient for '{}'", name)))?;
        let m = state.m.get_mut(name).expect("state mirrors registry");
        let v = state.v.get_mut(name).expect("state mirrors registry");
        let param = model.param_mut(name)?;
        if param.len() != grad.len() {
            return Err(Error::Shape(format!("gradient size mismatch for '{}'", name)));
        }
        adam_update(param, grad, m, v, state.step, lr);
    }
    Ok(())
}

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Evaluate on the dev set every this many steps, when a dev set
    /// is supplied.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dropout_rate: 0.2,
            batch_size: 16,
            max_steps: 200,
            seed: 0,
            eval_every: 20,
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub dev_acc: Option<f64>,
}

/// Training outcome: the per-step log plus checkpoint-selection info.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub best_dev_acc: Option<f64>,
    pub best_step: Option<u64>,
}

/// Argmax prediction for one sequence in eval mode.
pub fn predict(model: &LidModel, seq: &EmbeddingSequence) -> Result<usize> {
    let mask = BinaryMask::all_valid(seq.len())?;
    let ctx = multi_head_forward(&seq.x, &model.attn, &model.config, &mask)?;
    let stats = head::stat_pool(&ctx, &mask, POOL_EPSILON)?;
    let (_, probs) = head::classify(&stats, &model.classifier)?;
    Ok(probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0))
}

/// Deterministic evaluation of a model over a labeled dataset.
pub fn evaluate_model(model: &LidModel, data: &[EmbeddingSequence]) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(data.len());
    let mut truths = Vec::with_capacity(data.len());
    for seq in data {
        preds.push(predict(model, seq)?);
        truths.push(seq.label);
    }
    head::evaluate(&preds, &truths, model.classes)
}

/// Runs Adam over shuffled padded batches for `max_steps` steps.
///
/// Deterministic given the seed: batch order, dropout masks, and every
/// update are reproducible. When a dev set is given, the model with the
/// best dev accuracy is restored at the end (checkpoint selection).
pub fn train_loop(
    model: &mut LidModel,
    train: &[EmbeddingSequence],
    dev: Option<&[EmbeddingSequence]>,
    cfg: &TrainConfig,
    sched: &LrSchedule,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let base_rng = SeededRng::new(cfg.seed);
    let mut dropout_rng = base_rng.derive("dropout");
    let mut adam = AdamState::new(model)?;
    let mut log = Vec::new();
    let mut best: Option<(f64, u64, AttentionParams, ClassifierWeights)> = None;

    let mut step: u64 = 0;
    let mut epoch: u64 = 0;
    'outer: loop {
        let batches = make_batches(
            train,
            cfg.batch_size,
            base_rng.derive(&format!("epoch-{}", epoch)).seed(),
            true,
        )?;
        epoch += 1;
        for batch in &batches {
            if step >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            let (loss, cache) = forward_loss(
                model,
                batch,
                true,
                cfg.dropout_rate,
                Some(&mut dropout_rng),
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("diverged at step {}: {}", step, msg))
                }
                other => other,
            })?;
            let grads = backward(model, &cache)?;
            let lr = lr_at_step(step, sched);
            adam_step(model, &grads, &mut adam, lr)?;

            let mut dev_acc = None;
            if let Some(dev_data) = dev {
                if step % cfg.eval_every == 0 || step == cfg.max_steps {
                    let report = evaluate_model(model, dev_data)?;
                    dev_acc = Some(report.accuracy);
                    let improved = best
                        .as_ref()
                        .map(|(acc, _, _, _)| report.accuracy > *acc)
                        .unwrap_or(true);
                    if improved {
                        best = Some((
                            report.accuracy,
                            step,
                            model.attn.clone(),
                            model.classifier.clone(),
                        ));
                    }
                }
            }
            log.push(StepLog {
                step,
                lr,
                loss,
                dev_acc,
            });
        }
        if cfg.max_steps == 0 {
            break;
        }
    }

    let (best_dev_acc, best_step) = match best {
        Some((acc, s, attn, classifier)) => {
            model.attn = attn;
            model.classifier = classifier;
            (Some(acc), Some(s))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        log,
        best_dev_acc,
        best_step,
    })
}

/// Writes the loss log as CSV: `step,lr,loss,dev_acc`.
pub fn write_loss_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,lr,loss,dev_acc")?;
    for entry in log {
        let dev = entry
            .dev_acc
            .map(|a| format!("{}", a))
            .unwrap_or_default();
        writeln!(w, "{},{},{},{}", entry.step, entry.lr, entry.loss, dev)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-block trainable parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub projections: usize,
    pub dwc_kernel: usize,
    pub classifier: usize,
    pub total: usize,
}

/// Counts trainable parameters; the frozen performer projection is
/// excluded.
pub fn count_parameters(model: &LidModel) -> ParamCounts {
    let c = &model.config;
    let projections = 3 * (c.d_model * c.d_attn + c.d_attn);
    let dwc_kernel = model
        .attn
        .dwc_kernel
        .as_ref()
        .map(|k| k.rows() * k.cols())
        .unwrap_or(0);
    let classifier = 2 * c.d_attn * model.classes + model.classes;
    ParamCounts {
        projections,
        dwc_kernel,
        classifier,
        total: projections + dwc_kernel + classifier,
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"LIDCKPT1";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: AttentionConfig,
    classes: usize,
    step: u64,
    params: Vec<(String, usize, usize)>,
    omega: Option<(usize, usize)>,
    has_adam: bool,
    adam_step: u64,
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        read_exact_ckpt(r, &mut buf, path)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

fn read_exact_ckpt(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

/// Versioned binary checkpoint: config echo, parameter registry, raw
/// little-endian tensors, the frozen performer projection, and optional
/// Adam state with its step counter.
pub fn save_checkpoint(
    path: &Path,
    model: &LidModel,
    adam: Option<&AdamState>,
    step: u64,
) -> Result<()> {
    let params: Vec<(String, usize, usize)> = model
        .param_names()
        .iter()
        .map(|name| {
            let (r, c) = model.param_shape(name).expect("registered");
            (name.to_string(), r, c)
        })
        .collect();
    let header = CheckpointHeader {
        config: model.config.clone(),
        classes: model.classes,
        step,
        params: params.clone(),
        omega: model
            .attn
            .feature_map
            .as_ref()
            .map(|fm| (fm.omega.rows(), fm.omega.cols())),
        has_adam: adam.is_some(),
        adam_step: adam.map(|a| a.step).unwrap_or(0),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (name, _, _) in &params {
        write_f64s(&mut w, model.param(name)?)?;
    }
    if let Some(fm) = &model.attn.feature_map {
        write_f64s(&mut w, fm.omega.data())?;
    }
    if let Some(adam) = adam {
        for (name, _, _) in &params {
            write_f64s(&mut w, &adam.m[name])?;
        }
        for (name, _, _) in &params {
            write_f64s(&mut w, &adam.v[name])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint; returns the model, optional Adam state, and the
/// training step at which it was written.
pub fn load_checkpoint(path: &Path) -> Result<(LidModel, Option<AdamState>, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_ckpt(&mut r, &mut magic, path)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::BadMagic(path.display().to_string()));
    }
    let mut u32buf = [0u8; 4];
    read_exact_ckpt(&mut r, &mut u32buf, path)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(Error::Version(version));
    }
    let mut u64buf = [0u8; 8];
    read_exact_ckpt(&mut r, &mut u64buf, path)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    if header_len > (1 << 26) {
        return Err(Error::ShapeOverflow(path.display().to_string()));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact_ckpt(&mut r, &mut header_bytes, path)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    header.config.validate()?;

    // Rebuild the model skeleton, then overwrite every tensor.
    let mut model = LidModel::init(&header.config, header.classes, &SeededRng::new(0))?;
    for (name, rows, cols) in &header.params {
        let expect = model.param_shape(name)?;
        if expect != (*rows, *cols) {
            return Err(Error::Config(format!(
                "checkpoint shape {:?} for '{}' does not match config {:?}",
                (rows, cols),
                name,
                expect
            )));
        }
        let data = read_f64s(&mut r, rows * cols, path)?;
        model.param_mut(name)?.copy_from_slice(&data);
    }
    if let Some((rows, cols)) = header.omega {
        let data = read_f64s(&mut r, rows * cols, path)?;
        let fm = model
            .attn
            .feature_map
            .as_mut()
            .ok_or_else(|| Error::Config("checkpoint has omega but config does not".into()))?;
        fm.omega = Matrix::from_vec(rows, cols, data)?;
    }
    let adam = if header.has_adam {
        let mut state = AdamState::new(&model)?;
        state.step = header.adam_step;
        for (name, rows, cols) in &header.params {
            let data = read_f64s(&mut r, rows * cols, path)?;
            state.m.insert(name.clone(), data);
        }
        for (name, rows, cols) in &header.params {
            let data = read_f64s(&mut r, rows * cols, path)?;
            state.v.insert(name.clone(), data);
        }
        Some(state)
    } else {
        None
    };
    Ok((model, adam, header.step))
}

/// Largest element-wise relative error between two gradient tensors,
/// with an absolute floor so negligible entries do not dominate.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let denom = x.abs().max(y.abs()).max(1e-6);
            (x - y).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gen_synthetic;
    use crate::dataio::SyntheticSpec;
    use crate::numeric::gaussian_matrix;

    fn tiny_config(mechanism: Mechanism) -> AttentionConfig {
        let mut cfg = AttentionConfig::new(mechanism, 6, 4, 2);
        cfg.r = 8;
        cfg.p = 2;
        cfg
    }

    fn tiny_batch(seed: u64, classes: usize, d_model: usize) -> Batch {
        let spec = SyntheticSpec {
            classes,
            d_model,
            n_min: 3,
            n_max: 6,
            class_mean_scale: 1.0,
            noise_scale: 0.3,
            seed,
        };
        let data = gen_synthetic(&spec, 2).unwrap();
        make_batches(&data, data.len(), seed, false).unwrap().remove(0)
    }

    #[test]
    fn zero_classifier_gives_uniform_loss() {
        // With a zeroed classifier every class has probability 1/L, so
        // the mean cross-entropy is exactly ln L.
        for classes in [2usize, 5, 23] {
            let cfg = tiny_config(Mechanism::SelfAttn);
            let mut model = LidModel::init(&cfg, classes, &SeededRng::new(3)).unwrap();
            for v in model.classifier.w.data_mut() {
                *v = 0.0;
            }
            model.classifier.b.iter_mut().for_each(|b| *b = 0.0);
            let batch = tiny_batch(9, classes, cfg.d_model);
            let (loss, _) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config(Mechanism::Performer);
        let model = LidModel::init(&cfg, 3, &SeededRng::new(4)).unwrap();
        let batch = tiny_batch(10, 3, cfg.d_model);
        let (a, _) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
        let (b, _) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_without_dropout_matches_eval() {
        let cfg = tiny_config(Mechanism::Agent);
        let model = LidModel::init(&cfg, 3, &SeededRng::new(5)).unwrap();
        let batch = tiny_batch(11, 3, cfg.d_model);
        let mut rng = SeededRng::new(0);
        let (a, _) = forward_loss(&model, &batch, true, 0.0, Some(&mut rng)).unwrap();
        let (b, _) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_is_unbiased_in_expectation() {
        // Inverted dropout rescales kept entries by 1/(1-rate), so the
        // expected output equals the input.
        let m = Matrix::from_vec(1, 4, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut rng = SeededRng::new(77);
        let rate = 0.3;
        let trials = 20_000;
        let mut sums = vec![0.0; 4];
        for _ in 0..trials {
            let dropped = apply_dropout(&m, rate, &mut rng);
            for (s, v) in sums.iter_mut().zip(dropped.data()) {
                *s += v;
            }
        }
        for (s, orig) in sums.iter().zip(m.data()) {
            let mean = s / trials as f64;
            // Per-entry standard error ~ |orig| * sqrt(rate/(1-rate)/trials).
            let se = orig.abs() * (rate / (1.0 - rate) / trials as f64).sqrt();
            assert!(
                (mean - orig).abs() < 5.0 * se.max(1e-3),
                "mean {} vs {}",
                mean,
                orig
            );
        }
    }

    #[test]
    fn single_sample_even_odds_costs_ln_two() {
        let cfg = tiny_config(Mechanism::SelfAttn);
        let mut model = LidModel::init(&cfg, 2, &SeededRng::new(6)).unwrap();
        for v in model.classifier.w.data_mut() {
            *v = 0.0;
        }
        let seq = gen_synthetic(
            &SyntheticSpec {
                classes: 2,
                d_model: cfg.d_model,
                n_min: 4,
                n_max: 4,
                class_mean_scale: 1.0,
                noise_scale: 0.1,
                seed: 8,
            },
            1,
        )
        .unwrap()
        .remove(0);
        let batch = make_batches(&[seq], 1, 0, false).unwrap().remove(0);
        let (loss, _) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn central_difference_recovers_quadratic_slope() {
        // d/dx x^2 at 3 is 6; central differences are exact for quadratics
        // up to rounding.
        let g = central_difference(|x| Ok(x * x), 3.0, 1e-5).unwrap();
        assert!((g - 6.0).abs() < 1e-9);
    }

    #[test]
    fn central_difference_error_shrinks_quadratically() {
        // For f = exp, halving h should cut the truncation error about 4x.
        let truth = 2f64.exp();
        let e1 = (central_difference(|x| Ok(x.exp()), 2.0, 1e-2).unwrap() - truth).abs();
        let e2 = (central_difference(|x| Ok(x.exp()), 2.0, 5e-3).unwrap() - truth).abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {}", ratio);
    }

    fn check_gradients(mechanism: Mechanism, seed: u64) {
        let cfg = tiny_config(mechanism);
        let mut model = LidModel::init(&cfg, 3, &SeededRng::new(seed)).unwrap();
        // A nonzero kernel keeps finite differences out of the
        // high-curvature region around the all-zero init.
        if let Some(kernel) = model.attn.dwc_kernel.as_mut() {
            let mut kr = SeededRng::new(seed).derive("kernel");
            for v in kernel.data_mut() {
                *v = 0.3 * kr.next_normal();
            }
        }
        let batch = tiny_batch(seed + 100, 3, cfg.d_model);
        let (_, cache) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
        let analytic = backward(&model, &cache).unwrap();
        for name in model.param_names() {
            let numeric = finite_diff_grad(&mut model, &batch, name, 1e-5).unwrap();
            let err = max_relative_error(&analytic[name], &numeric);
            assert!(err < 1e-4, "{:?} {}: rel err {}", mechanism, name, err);
        }
    }

    #[test]
    fn gradients_match_finite_differences_self() {
        check_gradients(Mechanism::SelfAttn, 21);
    }

    #[test]
    fn gradients_match_finite_differences_performer() {
        check_gradients(Mechanism::Performer, 22);
    }

    #[test]
    fn gradients_match_finite_differences_agent() {
        check_gradients(Mechanism::Agent, 23);
    }

    #[test]
    fn gradients_match_with_padded_batch() {
        // Mixed-length sequences exercise the masked paths end to end.
        let cfg = tiny_config(Mechanism::SelfAttn);
        let mut model = LidModel::init(&cfg, 2, &SeededRng::new(30)).unwrap();
        let seqs: Vec<EmbeddingSequence> = [(3usize, 0usize), (7, 1), (5, 0)]
            .iter()
            .enumerate()
            .map(|(i, &(n, label))| EmbeddingSequence {
                id: format!("s{}", i),
                label,
                x: gaussian_matrix(&mut SeededRng::new(200 + i as u64), n, cfg.d_model),
            })
            .collect();
        let batch = make_batches(&seqs, 3, 0, false).unwrap().remove(0);
        let (_, cache) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
        let analytic = backward(&model, &cache).unwrap();
        for name in model.param_names() {
            let numeric = finite_diff_grad(&mut model, &batch, name, 1e-5).unwrap();
            let err = max_relative_error(&analytic[name], &numeric);
            assert!(err < 1e-4, "{}: rel err {}", name, err);
        }
    }

    #[test]
    fn lr_schedule_hits_the_anchor_points() {
        let sched = LrSchedule {
            base_lr: 1e-4,
            warmup_steps: 200,
            decay_steps: 500,
        };
        assert_eq!(lr_at_step(0, &sched), 0.0);
        assert!((lr_at_step(100, &sched) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(200, &sched), 1e-4);
        assert!((lr_at_step(450, &sched) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(700, &sched), 0.0);
        assert_eq!(lr_at_step(10_000, &sched), 0.0);
        // Never exceeds the base rate, piecewise linear throughout.
        for s in 0..=800 {
            assert!(lr_at_step(s, &sched) <= 1e-4 + 1e-18);
        }
    }

    #[test]
    fn lr_schedule_degenerate_warmup() {
        let sched = LrSchedule {
            base_lr: 0.5,
            warmup_steps: 0,
            decay_steps: 10,
        };
        assert_eq!(lr_at_step(0, &sched), 0.5);
        assert_eq!(lr_at_step(5, &sched), 0.25);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_alone() {
        let mut p = vec![1.5, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1);
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_against_gradient_sign() {
        // With bias correction the first update is ~lr * sign(g).
        let mut p = vec![0.0, 0.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut p, &[3.0, -0.25], &mut m, &mut v, 1, 0.1);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize (theta - 2)^2 from 0 with lr 0.1.
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for t in 1..=100 {
            let g = 2.0 * (p[0] - 2.0);
            adam_update(&mut p, &[g], &mut m, &mut v, t, 0.1);
        }
        assert!((p[0] - 2.0).abs() < 0.1, "theta {}", p[0]);
    }

    #[test]
    fn parameter_registry_matches_mechanism() {
        let rng = SeededRng::new(0);
        let m_self = LidModel::init(&tiny_config(Mechanism::SelfAttn), 3, &rng).unwrap();
        assert_eq!(
            m_self.param_names(),
            vec!["w_q", "w_k", "w_v", "b_q", "b_k", "b_v", "cls_w", "cls_b"]
        );
        let m_agent = LidModel::init(&tiny_config(Mechanism::Agent), 3, &rng).unwrap();
        assert!(m_agent.param_names().contains(&"dwc_kernel"));
        let m_perf = LidModel::init(&tiny_config(Mechanism::Performer), 3, &rng).unwrap();
        assert!(m_perf.attn.feature_map.is_some());
        assert!(!m_perf.param_names().contains(&"omega"));
    }

    #[test]
    fn parameter_count_closed_forms() {
        // Reference layout: 1024-dim embeddings, 64-dim attention, 23
        // classes. Projections 3*(1024*64+64), classifier 128*23+23.
        let rng = SeededRng::new(0);
        let cfg = AttentionConfig::new(Mechanism::SelfAttn, 1024, 64, 4);
        let model = LidModel::init(&cfg, 23, &rng).unwrap();
        let counts = count_parameters(&model);
        assert_eq!(counts.projections, 3 * (1024 * 64 + 64));
        assert_eq!(counts.classifier, 128 * 23 + 23);
        assert_eq!(counts.total, 199_767);
        // Within 5% of the ~199K budget.
        assert!((counts.total as f64 - 199_000.0).abs() / 199_000.0 < 0.05);

        let mut agent_cfg = AttentionConfig::new(Mechanism::Agent, 1024, 64, 4);
        agent_cfg.p = 2;
        let agent = LidModel::init(&agent_cfg, 23, &rng).unwrap();
        let agent_counts = count_parameters(&agent);
        assert_eq!(agent_counts.dwc_kernel, 3 * 64);
        assert_eq!(agent_counts.total, counts.total + 3 * 64);
    }

    #[test]
    fn init_is_seed_deterministic_and_scaled() {
        let cfg = tiny_config(Mechanism::SelfAttn);
        let a = LidModel::init(&cfg, 3, &SeededRng::new(42)).unwrap();
        let b = LidModel::init(&cfg, 3, &SeededRng::new(42)).unwrap();
        let c = LidModel::init(&cfg, 3, &SeededRng::new(43)).unwrap();
        assert_eq!(a.attn.proj.wq.data(), b.attn.proj.wq.data());
        assert_ne!(a.attn.proj.wq.data(), c.attn.proj.wq.data());
        assert!(a.attn.proj.bq.iter().all(|&v| v == 0.0));

        // Variance of projection entries should be close to 1/d_model.
        let big = AttentionConfig::new(Mechanism::SelfAttn, 64, 32, 4);
        let m = LidModel::init(&big, 3, &SeededRng::new(7)).unwrap();
        let data = m.attn.proj.wq.data();
        let var = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        let expect = 1.0 / 64.0;
        assert!((var - expect).abs() / expect < 0.2, "var {}", var);
    }

    #[test]
    fn training_is_reproducible_per_seed() {
        let cfg = tiny_config(Mechanism::SelfAttn);
        let data = gen_synthetic(
            &SyntheticSpec {
                classes: 3,
                d_model: cfg.d_model,
                n_min: 3,
                n_max: 8,
                class_mean_scale: 2.0,
                noise_scale: 0.5,
                seed: 17,
            },
            6,
        )
        .unwrap();
        let sched = LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 2,
            decay_steps: 30,
        };
        let tcfg = TrainConfig {
            dropout_rate: 0.2,
            batch_size: 4,
            max_steps: 10,
            seed: 5,
            eval_every: 5,
        };
        let run = |seed: u64| {
            let mut model = LidModel::init(&cfg, 3, &SeededRng::new(seed)).unwrap();
            let out = train_loop(&mut model, &data, None, &tcfg, &sched).unwrap();
            (out, model)
        };
        let (out_a, model_a) = run(1);
        let (out_b, model_b) = run(1);
        assert_eq!(out_a.log, out_b.log);
        assert_eq!(model_a.classifier.w.data(), model_b.classifier.w.data());
        let (out_c, _) = run(2);
        assert_ne!(out_a.log, out_c.log);
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let cfg = tiny_config(Mechanism::SelfAttn);
        let data = gen_synthetic(
            &SyntheticSpec {
                classes: 2,
                d_model: cfg.d_model,
                n_min: 4,
                n_max: 8,
                class_mean_scale: 3.0,
                noise_scale: 0.3,
                seed: 23,
            },
            10,
        )
        .unwrap();
        let sched = LrSchedule {
            base_lr: 5e-3,
            warmup_steps: 5,
            decay_steps: 100,
        };
        let tcfg = TrainConfig {
            dropout_rate: 0.0,
            batch_size: 10,
            max_steps: 40,
            seed: 3,
            eval_every: 10,
        };
        let mut model = LidModel::init(&cfg, 2, &SeededRng::new(9)).unwrap();
        let out = train_loop(&mut model, &data, Some(&data), &tcfg, &sched).unwrap();
        let first = out.log.first().unwrap().loss;
        let last = out.log.last().unwrap().loss;
        assert!(last < first, "loss did not fall: {} -> {}", first, last);
        assert!(out.best_dev_acc.unwrap() > 0.5);
    }

    #[test]
    fn loss_log_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let log = vec![
            StepLog { step: 1, lr: 1e-4, loss: 2.3, dev_acc: None },
            StepLog { step: 2, lr: 2e-4, loss: 1.9, dev_acc: Some(0.75) },
        ];
        write_loss_log(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,lr,loss,dev_acc");
        assert_eq!(lines.next().unwrap(), "1,0.0001,2.3,");
        assert_eq!(lines.next().unwrap(), "2,0.0002,1.9,0.75");
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        for mechanism in [Mechanism::SelfAttn, Mechanism::Performer, Mechanism::Agent] {
            let cfg = tiny_config(mechanism);
            let mut model = LidModel::init(&cfg, 3, &SeededRng::new(11)).unwrap();
            let batch = tiny_batch(50, 3, cfg.d_model);
            let mut adam = AdamState::new(&model).unwrap();
            let (_, cache) = forward_loss(&model, &batch, false, 0.0, None).unwrap();
            let grads = backward(&model, &cache).unwrap();
            adam_step(&mut model, &grads, &mut adam, 1e-3).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&path, &model, Some(&adam), 17).unwrap();
            let (loaded, loaded_adam, step) = load_checkpoint(&path).unwrap();
            assert_eq!(step, 17);
            assert_eq!(loaded.config, model.config);
            for name in model.param_names() {
                assert_eq!(loaded.param(name).unwrap(), model.param(name).unwrap());
            }
            if let Some(fm) = &model.attn.feature_map {
                assert_eq!(
                    loaded.attn.feature_map.as_ref().unwrap().omega.data(),
                    fm.omega.data()
                );
            }
            let loaded_adam = loaded_adam.unwrap();
            assert_eq!(loaded_adam.step, adam.step);
            for name in model.param_names() {
                assert_eq!(loaded_adam.m[name], adam.m[name]);
                assert_eq!(loaded_adam.v[name], adam.v[name]);
            }
            // Predictions agree exactly after reload.
            let seq = gen_synthetic(
                &SyntheticSpec {
                    classes: 3,
                    d_model: cfg.d_model,
                    n_min: 5,
                    n_max: 5,
                    class_mean_scale: 1.0,
                    noise_scale: 0.2,
                    seed: 60,
                },
                1,
            )
            .unwrap()
            .remove(0);
            assert_eq!(predict(&model, &seq).unwrap(), predict(&loaded, &seq).unwrap());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let cfg = tiny_config(Mechanism::SelfAttn);
        let model = LidModel::init(&cfg, 3, &SeededRng::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, None, 0).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic = dir.path().join("bad-magic.ckpt");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad_magic, &corrupted).unwrap();
        assert!(matches!(load_checkpoint(&bad_magic), Err(Error::BadMagic(_))));

        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(Error::Truncated(_))));

        let bad_version = dir.path().join("bad-version.ckpt");
        let mut corrupted = bytes;
        corrupted[8] = 9;
        std::fs::write(&bad_version, &corrupted).unwrap();
        assert!(matches!(load_checkpoint(&bad_version), Err(Error::Version(9))));
    }

    #[test]
    fn evaluate_model_reports_on_synthetic_data() {
        let cfg = tiny_config(Mechanism::SelfAttn);
        let model = LidModel::init(&cfg, 3, &SeededRng::new(13)).unwrap();
        let data = gen_synthetic(
            &SyntheticSpec {
                classes: 3,
                d_model: cfg.d_model,
                n_min: 3,
                n_max: 6,
                class_mean_scale: 1.0,
                noise_scale: 0.5,
                seed: 31,
            },
            4,
        )
        .unwrap();
        let report = evaluate_model(&model, &data).unwrap();
        assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
        assert_eq!(report.confusion.len(), 3);
    }
}

