//! Optimization loop, evaluation protocol and split runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use loda_tensor::{Rng, Tape, Tensor};

use crate::adaptation::LodaModel;
use crate::config::{Config, Mode, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, plcc_loss, srcc, MetricPair};
use crate::params::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per trainable tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update of every tensor in `params` with decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    wd: f64,
) -> Result<()> {
    for name in params.names() {
        if !grads.contains_key(name) {
            return Err(Error::Contract(format!("no gradient for trainable tensor {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        if g.len() != p.numel() {
            return Err(Error::Contract(format!("gradient for {name} has {} values, tensor has {}", g.len(), p.numel())));
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * *pi);
        }
    }
    Ok(())
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// A crop of one source image carrying the source label.
#[derive(Debug, Clone)]
pub struct Patch {
    pub pixels: Tensor,
    pub label: f64,
}

/// `k` random `crop x crop` patches of a `(3, H, W)` image. In train mode
/// each patch is independently flipped horizontally and vertically with
/// probability 1/2.
pub fn sample_patches(
    image: &Tensor,
    label: f64,
    k: usize,
    crop: usize,
    rng: &mut Rng,
    train: bool,
) -> Result<Vec<Patch>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("expected a (3, H, W) image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if h < crop || w < crop || crop == 0 {
        return Err(Error::Input(format!("image {h}x{w} is smaller than the {crop}x{crop} crop")));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let y0 = rng.below(h - crop + 1);
        let x0 = rng.below(w - crop + 1);
        let (flip_h, flip_v) = if train { (rng.bernoulli(0.5), rng.bernoulli(0.5)) } else { (false, false) };
        let mut data = Vec::with_capacity(3 * crop * crop);
        for c in 0..3 {
            for y in 0..crop {
                let sy = y0 + if flip_v { crop - 1 - y } else { y };
                for x in 0..crop {
                    let sx = x0 + if flip_h { crop - 1 - x } else { x };
                    data.push(src[(c * h + sy) * w + sx]);
                }
            }
        }
        out.push(Patch { pixels: Tensor::from_vec(&[3, crop, crop], data)?, label });
    }
    Ok(out)
}

/// Stack `(3, c, c)` patches into a `(b, 3, c, c)` batch.
pub fn stack(patches: &[&Tensor]) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mut shape = vec![patches.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(patches.len() * first.numel());
    for p in patches {
        if p.shape() != first.shape() {
            return Err(Error::Contract(format!("patch shapes {:?} and {:?} differ", first.shape(), p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Mean that returns the common value exactly when all inputs are equal.
fn exact_mean(v: &[f64]) -> f64 {
    let first = v[0];
    first + v.iter().map(|x| x - first).sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// SRCC of the epoch's training-patch predictions (made before each update).
    pub train_srcc: f64,
    pub test_srcc: Option<f64>,
    pub test_plcc: Option<f64>,
}

pub const LOG_HEADER: [&str; 7] = ["epoch", "step", "lr", "loss", "train_srcc", "test_srcc", "test_plcc"];

pub fn write_log<W: Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::Input(format!("writing epoch log: {e}"));
    w.write_record(LOG_HEADER).map_err(wrap)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.step.to_string(),
            e.lr.to_string(),
            e.loss.to_string(),
            e.train_srcc.to_string(),
            opt(e.test_srcc),
            opt(e.test_plcc),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing epoch log: {e}")))
}

pub fn save_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_log(log, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub optimizer: OptimizerState,
}

/// Split `order` into batches of `size`; a trailing batch with fewer than two
/// samples is merged into the previous one.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn has_distinct_labels(batch: &[usize], labels: &[f64]) -> bool {
    batch.iter().any(|&i| labels[i] != labels[batch[0]])
}

/// Train `model` in place on `train_set`. `test_set` is evaluated after the
/// last epoch (or every epoch with `eval_each_epoch`).
pub fn train(model: &mut LodaModel, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if model.mode != cfg.mode {
        return Err(Error::Config(format!("model mode {} differs from train mode {}", model.mode, cfg.mode)));
    }
    let per_image = cfg.patches_per_train_image;
    let n = train_set.len() * per_image;
    let labels: Vec<f64> = (0..n).map(|i| train_set.labels[i / per_image]).collect();
    if n < 2 {
        return Err(Error::Input("need at least two training patches per epoch".into()));
    }
    let steps_per_epoch = batches(&(0..n).collect::<Vec<_>>(), cfg.batch_size).len();
    let total = steps_per_epoch * cfg.epochs;
    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.derive(100);
    let mut patch_rng = root.derive(101);
    let mut state = OptimizerState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut step = 0usize;
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        let mut plan = batches(&order, cfg.batch_size);
        if plan.iter().any(|b| !has_distinct_labels(b, &labels)) {
            shuffle_rng.shuffle(&mut order);
            plan = batches(&order, cfg.batch_size);
            if plan.iter().any(|b| !has_distinct_labels(b, &labels)) {
                return Err(Error::Degenerate(format!(
                    "epoch {epoch}: a batch has a single distinct label even after re-shuffling"
                )));
            }
        }
        let mut epoch_loss = 0.0;
        let mut seen_pred = Vec::with_capacity(n);
        let mut seen_label = Vec::with_capacity(n);
        for batch in &plan {
            let mut patches = Vec::with_capacity(batch.len());
            for &i in batch {
                let img = i / per_image;
                let mut p = sample_patches(&train_set.images[img], train_set.labels[img], 1, cfg.crop_size, &mut patch_rng, true)?;
                patches.push(p.pop().expect("one patch"));
            }
            let refs: Vec<&Tensor> = patches.iter().map(|p| &p.pixels).collect();
            let x = stack(&refs)?;
            let y: Vec<f64> = patches.iter().map(|p| p.label).collect();

            lr = cosine_lr(step, total, cfg.lr, cfg.lr_min);
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let out = model.forward_with(&tape, &x, &bound)?;
            let loss = plcc_loss(out.score, &y)?;
            let grads = tape.backward(loss)?;
            let g = bound.gradients(&grads);
            let full: BTreeMap<String, Tensor> = model
                .trainable
                .iter()
                .map(|(name, t)| {
                    let gt = g.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()).expect("valid shape"));
                    (name.to_string(), gt)
                })
                .collect();
            let loss_value = loss.value().item()?;
            seen_pred.extend(out.score.value().into_vec());
            seen_label.extend_from_slice(&y);
            drop(tape);
            adamw_step(&mut model.trainable, &full, &mut state, lr, cfg.weight_decay)?;
            step += 1;
            epoch_loss += loss_value;
            step_losses.push(loss_value);
        }
        let last = epoch + 1 == cfg.epochs;
        let (test_srcc, test_plcc) = match test_set {
            Some(ts) if last || cfg.eval_each_epoch => {
                let r = evaluate(model, ts, cfg)?;
                (Some(r.metrics.srcc), Some(r.metrics.plcc))
            }
            _ => (None, None),
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            step,
            lr,
            loss: epoch_loss / plan.len() as f64,
            train_srcc: srcc(&seen_pred, &seen_label)?,
            test_srcc,
            test_plcc,
        };
        log::info!(
            "epoch {} step {} lr {:.3e} loss {:.5} train_srcc {:.4}",
            entry.epoch,
            entry.step,
            entry.lr,
            entry.loss,
            entry.train_srcc
        );
        log.push(entry);
    }
    Ok(TrainOutcome { log, step_losses, optimizer: state })
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub metrics: MetricPair,
    /// Mean patch score per image.
    pub predictions: Vec<f64>,
    pub warning: Option<String>,
}

/// Patches evaluated per forward pass.
const EVAL_CHUNK: usize = 32;

/// Per image, average the scores of `patches_per_test_image` unflipped
/// random crops; SRCC on the raw means, PLCC after logistic correction.
pub fn evaluate(model: &LodaModel, data: &Dataset, cfg: &TrainConfig) -> Result<EvalResult> {
    let predictions = predict_images(model, data, cfg)?;
    let (metrics, warning) = evaluate_scores(&predictions, &data.labels)?;
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(EvalResult { metrics, predictions, warning })
}

pub fn predict_images(model: &LodaModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let k = cfg.patches_per_test_image;
    // Crops depend only on the seed and the image position.
    let root = Rng::new(cfg.seed).derive(200);
    let mut all = Vec::with_capacity(data.len() * k);
    for (i, img) in data.images.iter().enumerate() {
        let mut rng = root.derive(i as u64);
        all.extend(sample_patches(img, data.labels[i], k, cfg.crop_size, &mut rng, false)?);
    }
    let mut scores = Vec::with_capacity(all.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let refs: Vec<&Tensor> = chunk.iter().map(|p| &p.pixels).collect();
        scores.extend(model.predict(&stack(&refs)?)?);
    }
    Ok(scores.chunks(k).map(exact_mean).collect())
}

/// Random train/test partitions of `n` items.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub splits: Vec<(Vec<usize>, Vec<usize>)>,
}

impl SplitPlan {
    /// `count` splits; split `i` shuffles with seed `seed + i` and puts the
    /// first `round(fraction * n)` items (at least 2, leaving at least 2) in
    /// the training part.
    pub fn random(n: usize, count: usize, fraction: f64, seed: u64) -> Result<SplitPlan> {
        if n < 4 {
            return Err(Error::Input(format!("need at least 4 images to split, got {n}")));
        }
        let n_train = ((fraction * n as f64).round() as usize).clamp(2, n - 2);
        let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
        let splits = seeds
            .iter()
            .map(|&s| {
                let mut idx: Vec<usize> = (0..n).collect();
                Rng::new(s).shuffle(&mut idx);
                let test = idx.split_off(n_train);
                (idx, test)
            })
            .collect();
        Ok(SplitPlan { seeds, train_fraction: fraction, splits })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub split: usize,
    pub train_srcc: f64,
    pub test: MetricPair,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    pub splits: Vec<SplitResult>,
    pub median_srcc: f64,
    pub median_plcc: f64,
    pub trainable: usize,
    pub total: usize,
}

/// Median; for an even count, the mean of the two middle values.
pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Train a fresh model and evaluate on the train and test sets.
pub fn train_and_evaluate(cfg: &Config, train_set: &Dataset, test_set: &Dataset, split: usize) -> Result<(LodaModel, SplitResult)> {
    let mut model = LodaModel::new(cfg, cfg.train.mode, cfg.train.seed)?;
    let outcome = train(&mut model, train_set, None, &cfg.train)?;
    let train_eval = evaluate(&model, train_set, &cfg.train)?;
    let test_eval = evaluate(&model, test_set, &cfg.train)?;
    let result = SplitResult {
        split,
        train_srcc: train_eval.metrics.srcc,
        test: test_eval.metrics,
        final_loss: outcome.step_losses.last().copied().unwrap_or(f64::NAN),
    };
    Ok((model, result))
}

fn report(cfg: &Config, splits: Vec<SplitResult>) -> Result<EvalReport> {
    let probe = LodaModel::new(cfg, cfg.train.mode, cfg.train.seed)?;
    let s: Vec<f64> = splits.iter().map(|r| r.test.srcc).collect();
    let p: Vec<f64> = splits.iter().map(|r| r.test.plcc).collect();
    Ok(EvalReport {
        mode: cfg.train.mode,
        median_srcc: median(&s),
        median_plcc: median(&p),
        trainable: probe.trainable.numel(),
        total: probe.total_parameters(),
        splits,
    })
}

/// Train and evaluate once per split of `plan`; report per-split metrics and
/// their medians.
pub fn run_splits(data: &Dataset, cfg: &Config, plan: &SplitPlan) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(plan.splits.len());
    for (i, (tr, te)) in plan.splits.iter().enumerate() {
        if tr.iter().chain(te).any(|&j| j >= data.len()) {
            return Err(Error::Contract(format!("split {i} indexes past the {} images", data.len())));
        }
        let (_, r) = train_and_evaluate(cfg, &data.subset(tr), &data.subset(te), i)?;
        log::info!("split {i}: test srcc {:.4} plcc {:.4}", r.test.srcc, r.test.plcc);
        results.push(r);
    }
    report(cfg, results)
}

/// Train on all of `train_set`, evaluate on `test_set` without adaptation.
pub fn cross_dataset(train_set: &Dataset, test_set: &Dataset, cfg: &Config) -> Result<EvalReport> {
    let (_, r) = train_and_evaluate(cfg, train_set, test_set, 0)?;
    report(cfg, vec![r])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_hand_cases() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap().with_requires_grad(true));
        let zero: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::zeros(&[2]).unwrap())].into();
        let mut st = OptimizerState::default();
        adamw_step(&mut p, &zero, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
        adamw_step(&mut p, &zero, &mut st, 0.1, 0.01).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0 - 0.1 * 0.01, -2.0 + 0.1 * 0.01 * 2.0]);

        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0).with_requires_grad(true));
        let g: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::scalar(1.0))].into();
        adamw_step(&mut p, &g, &mut OptimizerState::default(), 0.1, 0.01).unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + ADAM_EPS)) - 0.1 * 0.01 * 1.0;
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        assert!(adamw_step(&mut p, &BTreeMap::new(), &mut OptimizerState::default(), 0.1, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 1e-5), 3e-4);
        assert!((cosine_lr(100, 100, 3e-4, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 3e-4, 1e-5) - (3e-4 + 1e-5) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn patches_inherit_labels_and_respect_mode() {
        let img = Tensor::uniform(&[3, 10, 10], 0.0, 1.0, &mut Rng::new(0)).unwrap();
        let ps = sample_patches(&img, 42.0, 3, 6, &mut Rng::new(1), true).unwrap();
        assert_eq!(ps.len(), 3);
        assert!(ps.iter().all(|p| p.label == 42.0 && p.pixels.shape() == [3, 6, 6]));
        let full = sample_patches(&img, 1.0, 2, 10, &mut Rng::new(1), false).unwrap();
        assert!(full[0].pixels.bit_eq(&img) && full[1].pixels.bit_eq(&img));
        let a = sample_patches(&img, 1.0, 4, 5, &mut Rng::new(9), true).unwrap();
        let b = sample_patches(&img, 1.0, 4, 5, &mut Rng::new(9), true).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.pixels.bit_eq(&y.pixels)));
        assert!(sample_patches(&img, 1.0, 1, 11, &mut Rng::new(0), false).is_err());
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..6], 4).iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2]);
    }

    #[test]
    fn median_rules() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert!((median(&v) - 0.55).abs() < 1e-15);
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
    }

    #[test]
    fn split_plan_is_a_partition() {
        let plan = SplitPlan::random(20, 10, 0.8, 7).unwrap();
        assert_eq!(plan.splits.len(), 10);
        for (tr, te) in &plan.splits {
            assert_eq!((tr.len(), te.len()), (16, 4));
            let mut all: Vec<usize> = tr.iter().chain(te).copied().collect();
            all.sort();
            assert_eq!(all, (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn exact_mean_of_equal_values() {
        let x = 0.1 + 0.2;
        assert_eq!(exact_mean(&[x; 15]), x);
    }
}
