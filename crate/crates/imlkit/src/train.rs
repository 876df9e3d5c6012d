//! Joint training loop: composite loss, linear LR schedule, deterministic
//! batching, evaluation, and the ablation switches.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ae::detection_rng;
use crate::error::{ImlError, Result};
use crate::metrics::PixelCounts;
use crate::model::{sample_losses, IMLModel, LossReport, LossWeights, ModelConfig};
use crate::nn::adamw::AdamW;
use crate::nn::{GradStore, Scalar};
use crate::types::{Sample, TaskKind};

/// Ablation switches (Table-style rows as configuration).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblationConfig {
    pub use_modal_gate: bool,
    pub force_modality: Option<crate::encoder::Route>,
    pub use_dwd: bool,
    pub use_dynamic_weights: bool,
    pub use_ae: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_modal_gate: true,
            force_modality: None,
            use_dwd: true,
            use_dynamic_weights: true,
            use_ae: true,
        }
    }
}

/// Full training configuration; mirrors the TOML config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch: usize,
    pub input_size: (usize, usize),
    pub lr_start: f64,
    pub lr_end: f64,
    /// Only "linear" is implemented.
    pub schedule: String,
    pub weights: LossWeights,
    pub ablation: AblationConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            input_size: (512, 512),
            lr_start: 1e-4,
            lr_end: 1e-6,
            schedule: "linear".into(),
            weights: LossWeights::default(),
            ablation: AblationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ImlError::Config("steps must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(ImlError::Config("batch must be >= 1".into()));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(ImlError::Config("require lr_start > lr_end > 0".into()));
        }
        if self.schedule != "linear" {
            return Err(ImlError::Config(format!("unknown schedule '{}'", self.schedule)));
        }
        let neg = |v: f64| v < 0.0;
        if neg(self.weights.mask) || neg(self.weights.aux) || neg(self.weights.gate)
            || neg(self.weights.det)
        {
            return Err(ImlError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            use_modal_gate: self.ablation.use_modal_gate,
            force_modality: self.ablation.force_modality,
            use_dwd: self.ablation.use_dwd,
            use_dynamic_weights: self.ablation.use_dynamic_weights,
            use_ae: self.ablation.use_ae,
            seed: self.seed,
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainingConfig =
            toml::from_str(&text).map_err(|e| ImlError::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// lr(step) = lr_start + (lr_end - lr_start) * step / steps.
pub fn lr_at(step: usize, cfg: &TrainingConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(ImlError::InvalidInput(format!(
            "step {step} outside schedule 0..={}",
            cfg.steps
        )));
    }
    Ok(cfg.lr_start + (cfg.lr_end - cfg.lr_start) * step as f64 / cfg.steps as f64)
}

/// Deterministic epoch-shuffled batch order: returns the sample indices for
/// the given step.
pub fn batch_indices(seed: u64, step: usize, n_samples: usize, batch: usize) -> Vec<usize> {
    let per_epoch = n_samples.div_ceil(batch);
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
    order.shuffle(&mut rng);
    order.into_iter().cycle().skip(slot * batch).take(batch).collect()
}

/// Owns the model and optimizer state for one run.
pub struct Trainer<F: Scalar> {
    pub model: IMLModel<F>,
    pub cfg: TrainingConfig,
    pub opt: AdamW<F>,
    pub step: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let model = IMLModel::new(cfg.model_config());
        // AdamW per the training protocol: beta (0.9, 0.999), wd 0.01
        let opt = AdamW::new(0.9, 0.999, 0.01);
        Ok(Self { model, cfg, opt, step: 0 })
    }

    /// One optimizer step over a batch. Per-sample forward/backward run in
    /// parallel; gradients merge in sample order, so results are independent
    /// of thread scheduling.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(ImlError::InvalidInput("empty batch".into()));
        }
        let inv_batch = 1.0 / batch.len() as f64;
        let weights = self.cfg.weights;
        let seed = self.cfg.seed;
        let step = self.step as u64;
        let model = &self.model;
        let results: Vec<Result<(GradStore<F>, LossReport)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let mut det_rng = detection_rng(seed, step, i as u64);
                let mut gs = GradStore::new();
                let report =
                    sample_losses(model, sample, &weights, &mut det_rng, inv_batch, &mut gs)?;
                Ok((gs, report))
            })
            .collect();

        let mut grads = GradStore::new();
        let mut total = LossReport::default();
        for r in results {
            let (gs, rep) = r?;
            grads.merge(gs);
            total.mask_ce += rep.mask_ce * inv_batch;
            total.aux_rgb_ce += rep.aux_rgb_ce * inv_batch;
            total.aux_fused_ce += rep.aux_fused_ce * inv_batch;
            total.gate_bce += rep.gate_bce * inv_batch;
            total.det_total += rep.det_total * inv_batch;
            total.total += rep.total * inv_batch;
        }
        if !total.total.is_finite() || grads.any_non_finite() {
            return Err(ImlError::NonFinite(format!(
                "loss/gradients at step {} (report: {:?})",
                self.step, total
            )));
        }
        let lr = lr_at(self.step, &self.cfg)?;
        self.opt.step(&mut self.model, &grads, lr);
        self.step += 1;
        Ok(total)
    }

    /// Runs the full schedule over an in-memory dataset, invoking `on_step`
    /// after each step (for logging / early stopping: return false to stop).
    pub fn run(
        &mut self,
        data: &[Sample],
        mut on_step: impl FnMut(usize, &LossReport, &mut Self) -> bool,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(ImlError::InvalidInput("empty training set".into()));
        }
        while self.step < self.cfg.steps {
            let idx = batch_indices(self.cfg.seed, self.step, data.len(), self.cfg.batch);
            let batch: Vec<Sample> = idx.into_iter().map(|i| data[i].clone()).collect();
            let report = self.train_step(&batch)?;
            let cur = self.step;
            if !on_step(cur, &report, self) {
                break;
            }
        }
        Ok(())
    }
}

/// Per-task localization scores.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskScores {
    pub iou: f64,
    pub f1: f64,
    pub n: usize,
    /// Fraction of samples the gate routed through the fused branch.
    pub gate_fused_rate: f64,
}

/// Evaluation report (also the JSON metrics file schema).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, TaskScores>,
    pub mean_iou: f64,
    pub mean_f1: f64,
}

/// Binarizes predictions at `threshold` and scores them per task with a
/// macro-average across the tasks present.
pub fn evaluate<F: Scalar>(
    model: &IMLModel<F>,
    samples: &[Sample],
    threshold: f32,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(ImlError::InvalidInput("empty evaluation set".into()));
    }
    let preds: Vec<Result<(TaskKind, f64, f64, bool)>> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.image, threshold)?;
            let counts = PixelCounts::from_masks(&pred.mask, &s.mask)?;
            let fused = pred.gate.choice == crate::encoder::Route::Fused;
            Ok((s.task, counts.iou(), counts.f1(), fused))
        })
        .collect();
    let mut acc: BTreeMap<&'static str, (f64, f64, usize, usize)> = BTreeMap::new();
    for p in preds {
        let (task, iou, f1, fused) = p?;
        let e = acc.entry(task.name()).or_insert((0.0, 0.0, 0, 0));
        e.0 += iou;
        e.1 += f1;
        e.2 += 1;
        e.3 += usize::from(fused);
    }
    let mut per_task = BTreeMap::new();
    let mut mean_iou = 0.0;
    let mut mean_f1 = 0.0;
    for (name, (iou, f1, n, fused)) in &acc {
        let scores = TaskScores {
            iou: iou / *n as f64,
            f1: f1 / *n as f64,
            n: *n,
            gate_fused_rate: *fused as f64 / *n as f64,
        };
        mean_iou += scores.iou;
        mean_f1 += scores.f1;
        per_task.insert(name.to_string(), scores);
    }
    let k = per_task.len() as f64;
    Ok(EvalReport { per_task, mean_iou: mean_iou / k, mean_f1: mean_f1 / k })
}

/// Mean IoU over the training samples themselves (overfit sanity metric).
pub fn train_set_iou<F: Scalar>(model: &IMLModel<F>, samples: &[Sample]) -> Result<f64> {
    let ious: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.image, 0.5)?;
            crate::metrics::pixel_iou(&pred.mask, &s.mask)
        })
        .collect();
    let mut total = 0.0;
    for i in &ious {
        total += *i.as_ref().map_err(|e| ImlError::InvalidInput(e.to_string()))?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainingConfig { steps: 100, ..Default::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(100, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        // midpoint: 1e-4 + (1e-6 - 1e-4)/2 = 5.05e-5
        assert!((lr_at(50, &cfg).unwrap() - 5.05e-5).abs() < 1e-12);
        assert!(lr_at(101, &cfg).is_err());
    }

    #[test]
    fn config_validation_and_toml_roundtrip() {
        let cfg = TrainingConfig::default();
        assert!(cfg.validate().is_ok());
        let text = cfg.to_toml_string();
        let parsed: TrainingConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        let bad = TrainingConfig { lr_start: 1e-6, lr_end: 1e-4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig { steps: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_order_is_deterministic_and_covers_all() {
        let a = batch_indices(7, 3, 10, 4);
        let b = batch_indices(7, 3, 10, 4);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        // one epoch covers every index
        let mut seen = std::collections::BTreeSet::new();
        for step in 0..3 {
            for i in batch_indices(7, step, 10, 4) {
                seen.insert(i);
            }
        }
        assert_eq!(seen.len(), 10);
    }
}
