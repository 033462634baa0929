//! SGD training, mIOU evaluation with multi-scale / flip test strategies,
//! and a finite-difference gradient checker.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentSpec, SceneSample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::heads::{Binding, Model};
use crate::ops::{bilinear_upsample, softmax_xent, BnMode, LabelMap};
use crate::tensor::{Real, Shape, Tape};

// ---- confusion matrix and mIOU ----

/// K×K pixel counts; entry `(g,p)` counts pixels with ground truth `g`
/// predicted as `p`. Ignore pixels are never recorded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn record(&mut self, gt: &[u32], pred: &[u32], ignore_label: u32) {
        for (&g, &p) in gt.iter().zip(pred) {
            if g != ignore_label {
                self.counts[g as usize * self.k + p as usize] += 1;
            }
        }
    }

    /// Builds a matrix directly from per-cell counts (row-major, ground
    /// truth by prediction).
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Contract(format!(
                "confusion matrix for {k} classes needs {} counts, got {}",
                k * k,
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::Contract(format!(
                "cannot merge confusion matrices with {} and {} classes",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `IoU_k = TP/(TP+FP+FN)`; `None` when the class appears in neither
    /// ground truth nor prediction (undefined, excluded from the mean).
    pub fn iou(&self, class: usize) -> Option<Real> {
        let tp = self.at(class, class);
        let row: u64 = (0..self.k).map(|p| self.at(class, p)).sum();
        let col: u64 = (0..self.k).map(|g| self.at(g, class)).sum();
        let denom = row + col - tp;
        if denom == 0 {
            None
        } else {
            Some(tp as Real / denom as Real)
        }
    }

    pub fn per_class_iou(&self) -> Vec<Option<Real>> {
        (0..self.k).map(|c| self.iou(c)).collect()
    }

    pub fn miou(&self) -> Real {
        let defined: Vec<Real> = (0..self.k).filter_map(|c| self.iou(c)).collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<Real>() / defined.len() as Real
        }
    }
}

// ---- evaluation ----

pub fn default_eval_scales() -> Vec<Real> {
    vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75]
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalStrategy {
    Single,
    MultiScale(Vec<Real>),
    MultiScaleFlip(Vec<Real>),
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub miou: Real,
    pub per_class_iou: Vec<Option<Real>>,
    pub confusion: ConfusionMatrix,
}

fn hflip_planes(buf: &[Real], c: usize, h: usize, w: usize) -> Vec<Real> {
    let mut out = buf.to_vec();
    for plane in 0..c * h {
        out[plane * w..(plane + 1) * w].reverse();
    }
    out
}

/// One forward pass at a given scale, logits bilinearly resized back to the
/// original resolution. With `flip`, the input is mirrored before the pass
/// and the logits are un-mirrored afterwards.
fn forward_member(
    model: &mut Model,
    sample: &SceneSample,
    scale: Real,
    flip: bool,
) -> Result<Vec<Real>> {
    let (h, w) = (sample.h, sample.w);
    let image = if flip {
        hflip_planes(&sample.image, 3, h, w)
    } else {
        sample.image.clone()
    };
    let mut tape = Tape::new();
    let mut x = tape.leaf([1, 3, h, w], image, false);
    let (sh, sw) = (
        ((h as Real * scale).round() as usize).max(1),
        ((w as Real * scale).round() as usize).max(1),
    );
    if (sh, sw) != (h, w) {
        x = bilinear_upsample(&mut tape, x, sh, sw)?;
    }
    let (mut logits, _) = model.forward(&mut tape, x, BnMode::Eval)?;
    if tape.shape(logits)[2..] != [h, w] {
        logits = bilinear_upsample(&mut tape, logits, h, w)?;
    }
    let k = tape.shape(logits)[1];
    let out = tape.data(logits).to_vec();
    Ok(if flip { hflip_planes(&out, k, h, w) } else { out })
}

/// Per-pixel argmax over fused logits; ties go to the lowest class index.
fn argmax_labels(logits: &[Real], k: usize, pixels: usize) -> Vec<u32> {
    (0..pixels)
        .map(|i| {
            let mut best = 0usize;
            for c in 1..k {
                if logits[c * pixels + i] > logits[best * pixels + i] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Predicts one sample under the given strategy by averaging member logits.
pub fn predict(
    model: &mut Model,
    sample: &SceneSample,
    strategy: &EvalStrategy,
) -> Result<Vec<u32>> {
    let members: Vec<(Real, bool)> = match strategy {
        EvalStrategy::Single => vec![(1.0, false)],
        EvalStrategy::MultiScale(scales) => scales.iter().map(|&s| (s, false)).collect(),
        EvalStrategy::MultiScaleFlip(scales) => scales
            .iter()
            .flat_map(|&s| [(s, false), (s, true)])
            .collect(),
    };
    if members.is_empty() {
        return Err(Error::Config("evaluation needs at least one scale".into()));
    }
    let k = model.cfg.num_classes;
    let pixels = sample.h * sample.w;
    let mut fused = vec![0.0; k * pixels];
    for &(scale, flip) in &members {
        let logits = forward_member(model, sample, scale, flip)?;
        for (f, l) in fused.iter_mut().zip(&logits) {
            *f += l;
        }
    }
    let inv = 1.0 / members.len() as Real;
    for f in &mut fused {
        *f *= inv;
    }
    Ok(argmax_labels(&fused, k, pixels))
}

/// Evaluates a model over a sample set. Runs every batch norm in eval mode;
/// neither parameters nor running statistics are modified.
pub fn evaluate(
    model: &mut Model,
    samples: &[SceneSample],
    strategy: &EvalStrategy,
    ignore_label: u32,
) -> Result<EvalReport> {
    let mut confusion = ConfusionMatrix::new(model.cfg.num_classes);
    for sample in samples {
        let pred = predict(model, sample, strategy)?;
        confusion.record(&sample.labels, &pred, ignore_label);
    }
    Ok(EvalReport {
        miou: confusion.miou(),
        per_class_iou: confusion.per_class_iou(),
        confusion,
    })
}

/// Replaces every convolution kernel by its left-right mirror average,
/// making the whole network exactly flip-equivariant. Useful for validating
/// the flip test strategy: on a mirror-symmetric input, a flip-equivariant
/// model makes the mirrored pass redundant by construction.
pub fn symmetrize_kernels(model: &mut Model) {
    let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
    model.visit_params(&mut |name, shape, _, trainable| {
        if trainable {
            shapes.insert(name.to_string(), shape);
        }
    });
    model.visit_trainable_mut(&mut |name, data| {
        let [_, _, kh, kw] = shapes[name];
        if kh * kw <= 1 || data.len() % (kh * kw) != 0 {
            return;
        }
        for chunk in data.chunks_mut(kh * kw) {
            for u in 0..kh {
                for v in 0..kw / 2 {
                    let (a, b) = (u * kw + v, u * kw + kw - 1 - v);
                    let m = 0.5 * (chunk[a] + chunk[b]);
                    chunk[a] = m;
                    chunk[b] = m;
                }
            }
        }
    });
}

// ---- SGD ----

/// Training hyperparameters. The learning-rate schedule is piecewise
/// constant: `(start_iteration, lr)` pairs with strictly increasing starts,
/// beginning at iteration 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_schedule: Vec<(u64, Real)>,
    pub momentum: Real,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_schedule: vec![(0, 0.01)],
            momentum: 0.9,
            batch_size: 2,
            max_iterations: 1000,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return Err(Error::Config(
                "lr schedule must be non-empty and start at iteration 0".into(),
            ));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config(
                    "lr schedule iterations must be strictly increasing".into(),
                ));
            }
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !lr.is_finite()) {
            return Err(Error::Config("lr values must be finite".into()));
        }
        if self.batch_size < 2 {
            // the image-pooling branch batch-normalizes a (N,C,1,1) map, so
            // training needs at least two values per channel
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> Real {
        self.lr_schedule
            .iter()
            .take_while(|&&(start, _)| start <= iteration)
            .last()
            .map(|&(_, lr)| lr)
            .unwrap_or(0.0)
    }
}

/// Momentum SGD on one flat parameter: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_update(
    param: &mut [Real],
    grad: &[Real],
    velocity: &mut [Real],
    lr: Real,
    momentum: Real,
    iteration: u64,
) -> Result<()> {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        if !g.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        *v = momentum * *v + g;
        *p -= lr * *v;
        if !p.is_finite() {
            return Err(Error::Divergence { iteration });
        }
    }
    Ok(())
}

/// Applies one SGD step to every trainable parameter that received a
/// gradient on the tape. Velocity buffers are keyed by parameter name.
pub fn sgd_step(
    model: &mut Model,
    tape: &Tape,
    binding: &Binding,
    velocity: &mut BTreeMap<String, Vec<Real>>,
    lr: Real,
    momentum: Real,
    iteration: u64,
) -> Result<()> {
    let mut result = Ok(());
    model.visit_trainable_mut(&mut |name, param| {
        if result.is_err() {
            return;
        }
        let grad = binding.id(name).and_then(|id| tape.grad(id));
        let Some(grad) = grad else { return };
        let vel = velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        result = sgd_update(param, grad, vel, lr, momentum, iteration);
    });
    result
}

// ---- training loop ----

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub iteration: u64,
    pub loss: Real,
    pub lr: Real,
    pub miou: Option<Real>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr,miou\n");
        for row in &self.rows {
            let miou = row.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.6},{},{miou}", row.iteration, row.loss, row.lr);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub final_loss: Real,
    pub best_miou: Option<Real>,
}

/// Stacks same-sized samples into one `(N,3,H,W)` batch with an `(N,H,W)`
/// label map.
pub fn stack_samples(samples: &[SceneSample]) -> Result<(Shape, Vec<Real>, LabelMap)> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("cannot stack an empty batch".into()));
    };
    let (h, w) = (first.h, first.w);
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.h, s.w) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "stack_samples",
                left: [1, 3, h, w],
                right: [1, 3, s.h, s.w],
            });
        }
        image.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.labels);
    }
    Ok((
        [samples.len(), 3, h, w],
        image,
        LabelMap::new(samples.len(), h, w, labels),
    ))
}

/// Seed-deterministic, single-threaded training. Samples batches with
/// replacement, optionally augmenting each draw; logs loss every iteration
/// and mIOU every `eval_every` iterations (single-scale), keeping the
/// best-mIOU checkpoint when a path is given.
pub fn train(
    model: &mut Model,
    train_set: &[SceneSample],
    eval_set: &[SceneSample],
    cfg: &TrainConfig,
    augment_spec: Option<&AugmentSpec>,
    best_checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = BTreeMap::new();
    let mut log = TrainLog::default();
    let mut final_loss = 0.0;
    let mut best_miou: Option<Real> = None;
    for it in 0..cfg.max_iterations {
        let lr = cfg.lr_at(it);
        let batch: Vec<SceneSample> = (0..cfg.batch_size)
            .map(|_| {
                let sample = &train_set[rng.gen_range(0..train_set.len())];
                match augment_spec {
                    Some(spec) => augment(sample, spec, rng.gen()),
                    None => sample.clone(),
                }
            })
            .collect();
        let (shape, image, labels) = stack_samples(&batch)?;
        let mut tape = Tape::new();
        let x = tape.leaf(shape, image, false);
        let (logits, binding) = model.forward(&mut tape, x, BnMode::Train)?;
        let xent = softmax_xent(&mut tape, logits, &labels, IGNORE_LABEL)?;
        let loss = tape.data(xent.loss)[0];
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it });
        }
        tape.backward(xent.loss)?;
        sgd_step(model, &tape, &binding, &mut velocity, lr, cfg.momentum, it)?;
        final_loss = loss;
        let mut miou = None;
        let last = it + 1 == cfg.max_iterations;
        if cfg.eval_every > 0 && !eval_set.is_empty() && ((it + 1) % cfg.eval_every == 0 || last) {
            let report = evaluate(model, eval_set, &EvalStrategy::Single, IGNORE_LABEL)?;
            miou = Some(report.miou);
            if best_miou.map_or(true, |b| report.miou > b) {
                best_miou = Some(report.miou);
                if let Some(path) = best_checkpoint {
                    model.save(path)?;
                }
            }
        }
        log.rows.push(TrainRow {
            iteration: it,
            loss,
            lr,
            miou,
        });
    }
    Ok(TrainOutcome {
        log,
        final_loss,
        best_miou,
    })
}

// ---- finite-difference gradient check ----

#[derive(Debug, Clone)]
pub struct GradcheckFailure {
    pub name: String,
    pub index: usize,
    pub analytic: Real,
    pub numeric: Real,
    pub rel_err: Real,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: Real,
    pub failures: Vec<GradcheckFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn set_param(model: &mut Model, target: &str, idx: usize, value: Real) {
    model.visit_trainable_mut(&mut |name, data| {
        if name == target {
            data[idx] = value;
        }
    });
}

fn get_param(model: &mut Model, target: &str, idx: usize) -> Real {
    let mut out = 0.0;
    model.visit_trainable_mut(&mut |name, data| {
        if name == target {
            out = data[idx];
        }
    });
    out
}

fn batch_loss(model: &mut Model, shape: Shape, image: &[Real], labels: &LabelMap) -> Result<Real> {
    let mut tape = Tape::new();
    let x = tape.leaf(shape, image.to_vec(), false);
    let (logits, _) = model.forward(&mut tape, x, BnMode::Train)?;
    let xent = softmax_xent(&mut tape, logits, labels, IGNORE_LABEL)?;
    Ok(tape.data(xent.loss)[0])
}

/// Compares analytic gradients of the cross-entropy loss against central
/// differences on up to `max_checks` randomly sampled parameter scalars.
/// Relative error is `|a−n| / max(|a|,|n|,1e-8)`. The model is restored to
/// its entry state (including running statistics) before returning.
pub fn gradcheck(
    model: &mut Model,
    samples: &[SceneSample],
    epsilon: Real,
    tolerance: Real,
    max_checks: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    run_gradcheck(model, samples, epsilon, tolerance, max_checks, seed, 1.0)
}

/// `grad_scale` multiplies the analytic gradients before comparison; values
/// other than 1.0 simulate a corrupted backward pass for fault-injection
/// tests.
pub(crate) fn run_gradcheck(
    model: &mut Model,
    samples: &[SceneSample],
    epsilon: Real,
    tolerance: Real,
    max_checks: usize,
    seed: u64,
    grad_scale: Real,
) -> Result<GradcheckReport> {
    if samples.is_empty() {
        return Err(Error::Config("gradcheck needs at least one sample".into()));
    }
    // batch-norm in train mode needs a batch of at least two
    let doubled;
    let samples = if samples.len() == 1 {
        doubled = vec![samples[0].clone(), samples[0].clone()];
        &doubled[..]
    } else {
        samples
    };
    let snapshot = model.to_entries();
    let (shape, image, labels) = stack_samples(samples)?;
    // analytic gradients
    let mut tape = Tape::new();
    let x = tape.leaf(shape, image.clone(), false);
    let (logits, binding) = model.forward(&mut tape, x, BnMode::Train)?;
    let xent = softmax_xent(&mut tape, logits, &labels, IGNORE_LABEL)?;
    tape.backward(xent.loss)?;
    let mut grads: BTreeMap<String, Vec<Real>> = BTreeMap::new();
    for (name, id) in binding.iter() {
        if let Some(g) = tape.grad(id) {
            grads.insert(name.to_string(), g.to_vec());
        }
    }
    drop(tape);
    // flat layout over all checked scalars
    let layout: Vec<(&String, usize)> = grads.iter().map(|(n, g)| (n, g.len())).collect();
    let total: usize = layout.iter().map(|&(_, len)| len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if total <= max_checks {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, max_checks).into_vec()
    };
    let locate = |flat: usize| -> (&String, usize) {
        let mut rest = flat;
        for &(name, len) in &layout {
            if rest < len {
                return (name, rest);
            }
            rest -= len;
        }
        unreachable!("flat index out of range");
    };
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for flat in picks {
        let (name, idx) = locate(flat);
        let name = name.clone();
        let orig = get_param(model, &name, idx);
        set_param(model, &name, idx, orig + epsilon);
        let lp = batch_loss(model, shape, &image, &labels)?;
        set_param(model, &name, idx, orig - epsilon);
        let lm = batch_loss(model, shape, &image, &labels)?;
        set_param(model, &name, idx, orig);
        let numeric = (lp - lm) / (2.0 * epsilon);
        let analytic = grads[&name][idx] * grad_scale;
        let diff = (analytic - numeric).abs();
        let rel = diff / analytic.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
        // central differences carry ~eps_machine·|loss|/epsilon of cancellation
        // noise, so absolute disagreements below 1e-8 are not evidence of a
        // wrong gradient even when the relative error looks large
        if rel > tolerance && diff > 1e-8 {
            report.failures.push(GradcheckFailure {
                name: name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }
    // undo the running-statistic drift from the probe forwards
    model.load_entries(&snapshot)?;
    Ok(report)
}
