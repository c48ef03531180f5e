//! Margin and reconstruction losses, Adam, the learning-rate schedule and the
//! two-phase (hard training) epoch loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data_io::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{class_probabilities, predict, Model, OutputCapsules};
use crate::params::ParamVars;
use crate::tensor::{FlushDenormals, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl MarginLossParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.m_plus) || !in_unit(self.m_minus) || self.m_minus >= self.m_plus || self.lambda <= 0.0 {
            return Err(Error::config(format!("margin loss needs 0 < m⁻ < m⁺ < 1 and λ > 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Phase 1: (0.9, 0.1, 0.5). Phase 2 tightens both bounds: (0.95, 0.05, 0.5).
pub fn hard_training_params(phase: u8) -> Result<MarginLossParams> {
    match phase {
        1 => Ok(MarginLossParams { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }),
        2 => Ok(MarginLossParams { m_plus: 0.95, m_minus: 0.05, lambda: 0.5 }),
        _ => Err(Error::usage(format!("training phase must be 1 or 2, got {phase}"))),
    }
}

/// `Σ_k T_k·max(0, m⁺−‖V_k‖)² + λ·(1−T_k)·max(0, ‖V_k‖−m⁻)²`, averaged over
/// the batch. `lengths` and `targets` are `[N, K]`.
pub fn margin_loss<F: Real>(g: &mut Graph<F>, lengths: Var, targets: Var, p: MarginLossParams) -> Result<Var> {
    if g.shape(lengths) != g.shape(targets) || g.shape(lengths).len() != 2 {
        return Err(Error::shape_mismatch("margin loss lengths vs targets", g.shape(lengths), g.shape(targets)));
    }
    let n = g.shape(lengths)[0];
    let neg_len = g.neg(lengths)?;
    let below = g.add_scalar(neg_len, F::from_f64(p.m_plus))?;
    let below = g.relu(below)?;
    let below = g.square(below)?;
    let above = g.add_scalar(lengths, F::from_f64(-p.m_minus))?;
    let above = g.relu(above)?;
    let above = g.square(above)?;
    let present = g.mul(targets, below)?;
    let neg_t = g.neg(targets)?;
    let absent_mask = g.add_scalar(neg_t, F::one())?;
    let absent = g.mul(absent_mask, above)?;
    let absent = g.scale(absent, F::from_f64(p.lambda))?;
    let per_class = g.add(present, absent)?;
    let total = g.sum(per_class)?;
    g.scale(total, F::one() / F::from_f64(n as f64))
}

/// `weight · mean((recon − input)²)`.
pub fn reconstruction_loss<F: Real>(g: &mut Graph<F>, recon: Var, input: Var, weight: f64) -> Result<Var> {
    if g.shape(recon) != g.shape(input) {
        return Err(Error::usage(format!(
            "reconstruction {:?} does not match input {:?}",
            g.shape(recon),
            g.shape(input)
        )));
    }
    let diff = g.sub(recon, input)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    g.scale(mse, F::from_f64(weight))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Per-epoch exponential decay factor.
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub phase1: MarginLossParams,
    pub phase2: MarginLossParams,
    /// Multiplied by the pixel count to weight the reconstruction MSE.
    pub recon_weight: f64,
    /// Zero the Adam moments when phase 2 starts.
    pub reset_adam: bool,
    pub shuffle: bool,
    pub eval_batch: usize,
    /// Record wall time in `metrics.csv` (breaks byte-identical reruns).
    pub metrics_wall_time: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            gamma: 0.96,
            batch_size: 128,
            epochs_phase1: 100,
            epochs_phase2: 100,
            phase1: hard_training_params(1).expect("phase 1"),
            phase2: hard_training_params(2).expect("phase 2"),
            recon_weight: 0.0005,
            reset_adam: false,
            shuffle: true,
            eval_batch: 100,
            metrics_wall_time: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = self.base_lr.is_finite() && self.base_lr >= 0.0;
        let gamma_ok = self.gamma > 0.0 && self.gamma <= 1.0;
        if !lr_ok || !gamma_ok || !(self.recon_weight.is_finite() && self.recon_weight >= 0.0) {
            return Err(Error::config(format!(
                "need lr ≥ 0, 0 < gamma ≤ 1, recon_weight ≥ 0; got lr={} gamma={} recon_weight={}",
                self.base_lr, self.gamma, self.recon_weight
            )));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be ≥ 1"));
        }
        self.phase1.validate()?;
        self.phase2.validate()
    }

    pub fn phase_params(&self, phase: u8) -> MarginLossParams {
        if phase == 1 {
            self.phase1
        } else {
            self.phase2
        }
    }
}

/// `base_lr · gamma^epoch` for the zero-based global epoch index.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.gamma.powi(epoch as i32)
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: &[Tensor<F>]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        Self::new(&shapes)
    }

    pub fn reset(&mut self) {
        self.t = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
    /// `p ← p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::usage(format!(
                "adam state for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::usage(format!("adam shape mismatch: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let (ob1, ob2) = (F::from_f64(1.0 - self.beta1), F::from_f64(1.0 - self.beta2));
        let (step, c2, eps) = (F::from_f64(lr / c1), F::from_f64(c2), F::from_f64(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// One-based global epoch.
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,phase,lr,train_loss,train_acc,val_acc,seconds";

    /// CSV row; `seconds` is written as `NA` unless `wall_time` is set.
    pub fn csv_row(&self, wall_time: bool) -> String {
        let val = self.val_acc.map_or("NA".to_string(), |v| format!("{v:.4}"));
        let secs = if wall_time { format!("{:.2}", self.seconds) } else { "NA".to_string() };
        format!("{},{},{:e},{:.6},{:.4},{val},{secs}", self.epoch, self.phase, self.lr, self.train_loss, self.train_acc)
    }
}

/// Seed of the batch order for a zero-based global epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Margin loss on the capsule lengths plus `recon_weight`-scaled MSE of the
/// reconstruction decoded from each row's `labels` capsule.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    params: &ParamVars,
    images: Var,
    one_hot: Var,
    labels: &[usize],
    loss_params: MarginLossParams,
    recon_weight: f64,
) -> Result<(Var, OutputCapsules)> {
    let out = model.forward(g, params, images)?;
    let margin = margin_loss(g, out.lengths, one_hot, loss_params)?;
    let recon = model.decode(g, params, out.capsules, labels)?;
    let rl = reconstruction_loss(g, recon, images, recon_weight)?;
    Ok((g.add(margin, rl)?, out))
}

/// One pass over `train`: margin loss plus weighted reconstruction (decoded
/// from the true-label capsule), backward, Adam step per batch.
pub fn train_epoch<F: Real>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    train: &Dataset,
    cfg: &TrainConfig,
    phase: u8,
    epoch: usize,
) -> Result<EpochMetrics> {
    let _ftz = FlushDenormals::new();
    let start = Instant::now();
    let lr = lr_at_epoch(epoch, cfg);
    let loss_params = cfg.phase_params(phase);
    let (h, w, c) = model.cfg.input;
    let recon_weight = cfg.recon_weight * (h * w * c) as f64;
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for batch in batches::<F>(train, cfg.batch_size, epoch_seed(cfg.seed, epoch), cfg.shuffle)? {
        let n = batch.labels.len();
        let mut g = Graph::new();
        let pv = model.params.attach(&mut g);
        let x = g.constant(batch.images);
        let t = g.constant(batch.one_hot);
        let (loss, out) = batch_loss(model, &mut g, &pv, x, t, &batch.labels, loss_params, recon_weight)?;
        g.backward(loss)?;

        loss_sum += g.value(loss).item().as_f64() * n as f64;
        correct += predict(g.value(out.lengths)).iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        seen += n;
        let grads: Vec<Tensor<F>> = pv.vars().iter().map(|&v| g.grad_or_zeros(v)).collect();
        drop(g);
        adam.step(model.params.tensors_mut(), &grads, lr)?;
    }
    let seen_f = seen.max(1) as f64;
    Ok(EpochMetrics {
        epoch: epoch + 1,
        phase,
        lr,
        train_loss: loss_sum / seen_f,
        train_acc: correct as f64 / seen_f,
        val_acc: None,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Accuracy per true class (`NaN` for classes absent from the set).
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
    /// `[N, K]` softmax of the capsule lengths.
    pub probabilities: Tensor<f64>,
}

/// Accuracy of `predictions` against `labels`, overall and per class.
pub fn score(predictions: &[usize], labels: &[usize], num_classes: usize) -> (f64, Vec<f64>) {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        totals[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let overall = hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64;
    let per_class = hits.iter().zip(&totals).map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 }).collect();
    (overall, per_class)
}

pub fn evaluate<F: Real>(model: &Model<F>, ds: &Dataset, batch: usize) -> Result<EvalResult> {
    if ds.num_classes != model.num_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, model {}",
            ds.num_classes,
            model.num_classes()
        )));
    }
    let images: Tensor<F> = ds.images.cast();
    let lengths = model.infer_lengths(&images, batch)?.cast::<f64>();
    let probabilities = class_probabilities(&lengths);
    let predictions = predict(&probabilities);
    let (accuracy, per_class) = score(&predictions, &ds.labels, ds.num_classes);
    Ok(EvalResult { accuracy, per_class, predictions, probabilities })
}

/// Where [`run_training`] writes its outputs, and what it echoes into them.
#[derive(Debug, Clone)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Resolved configuration text stored in every checkpoint.
    pub config_echo: &'a str,
    /// Echo each metrics row (with wall time) to stdout.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub best_val_acc: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Phase 1 then phase 2 (hard training). Writes `metrics.csv`,
/// `timing.csv` and `checkpoint_{phase1,phase2,best,final}.dlcp` to `out.dir`.
pub fn run_training<F: Real>(
    model: &mut Model<F>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: &RunOutput<'_>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out.dir)?;
    let mut metrics_file = fs::File::create(out.dir.join("metrics.csv"))?;
    writeln!(metrics_file, "{}", EpochMetrics::CSV_HEADER)?;
    let mut timing_file = fs::File::create(out.dir.join("timing.csv"))?;
    writeln!(timing_file, "epoch,seconds")?;
    if out.verbose {
        println!("{}", EpochMetrics::CSV_HEADER);
    }

    let mut adam = Adam::for_params(model.params.tensors_mut());
    let mut summary = TrainSummary { metrics: Vec::new(), best_val_acc: None, checkpoints: Vec::new() };
    let save = |model: &Model<F>, name: &str, summary: &mut TrainSummary| -> Result<()> {
        let path = out.dir.join(name);
        Checkpoint::from_params(out.config_echo, &model.params).save(&path)?;
        if !summary.checkpoints.contains(&path) {
            summary.checkpoints.push(path);
        }
        Ok(())
    };

    let mut epoch = 0;
    for (phase, epochs) in [(1u8, cfg.epochs_phase1), (2u8, cfg.epochs_phase2)] {
        if phase == 2 && cfg.reset_adam {
            adam.reset();
        }
        for _ in 0..epochs {
            let start = Instant::now();
            let mut m = train_epoch(model, &mut adam, train, cfg, phase, epoch)?;
            if let Some(val) = val {
                let acc = evaluate(model, val, cfg.eval_batch)?.accuracy;
                m.val_acc = Some(acc);
                if summary.best_val_acc.is_none_or(|best| acc > best) {
                    summary.best_val_acc = Some(acc);
                    save(model, "checkpoint_best.dlcp", &mut summary)?;
                }
            }
            m.seconds = start.elapsed().as_secs_f64();
            writeln!(metrics_file, "{}", m.csv_row(cfg.metrics_wall_time))?;
            writeln!(timing_file, "{},{:.3}", m.epoch, m.seconds)?;
            if out.verbose {
                println!("{}", m.csv_row(true));
            }
            summary.metrics.push(m);
            epoch += 1;
        }
        if epochs > 0 {
            save(model, &format!("checkpoint_phase{phase}.dlcp"), &mut summary)?;
        }
    }
    save(model, "checkpoint_final.dlcp", &mut summary)?;
    Ok(summary)
}
