//! Losses, optimizers, the learning-rate schedule, the training loop and
//! the gradient-check harness.

mod gradcheck;
mod losses;
mod optim;
mod schedule;

pub use gradcheck::{
    check_gradients, default_gradcheck_config, gradcheck, gradcheck_instance, GradcheckReport,
    TensorCheck, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use losses::{
    gradient_regularizer, gradient_regularizer_value, group_loss, relative_l2_loss,
};
pub use optim::{adamw_step, lion_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use schedule::lr_schedule;

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balltree::PatchLayout;
use crate::data::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::relative_l2;
use crate::model::{save_checkpoint, ModelConfig, Mspt, Normalizer};
use crate::numerics::{Real, Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CSV_HEADER: &str = "epoch,train_loss,val_rel_l2,lr,wall_seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rel_l2: f64,
    /// Weight `λ_g` of the spatial gradient regularizer; grid data only.
    pub grad_reg: f64,
    pub volume: f64,
    pub surface: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rel_l2: 1.0,
            grad_reg: 0.0,
            volume: 1.0,
            surface: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Samples whose gradients are accumulated per optimizer step.
    pub batch_size: usize,
    pub loss: LossWeights,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            peak_lr: 5e-5,
            final_lr: 1e-6,
            weight_decay: 5e-2,
            warmup_fraction: 0.05,
            epochs: 100,
            batch_size: 1,
            loss: LossWeights::default(),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1)"));
        }
        if !(self.peak_lr > self.final_lr && self.final_lr > 0.0) {
            return Err(Error::config("need peak_lr > final_lr > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.loss.rel_l2 < 0.0 || self.loss.grad_reg < 0.0 {
            return Err(Error::config("weights must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adamw => OptimizerConfig::adamw(self.weight_decay),
            OptimizerKind::Lion => OptimizerConfig::lion(self.weight_decay),
        }
    }
}

/// Model and training configuration together, as read by `mspt train`.
/// `in_dim`/`out_dim` of zero are filled in from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rel_l2: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.val_rel_l2, self.lr, self.wall_seconds
        )
    }
}

pub struct TrainOutcome<T: Real> {
    /// Parameters after the last epoch.
    pub model: Mspt<T>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Deterministic split of `m` sample indices into (train, val).
pub fn split_indices(m: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x73_706c_6974));
    let mut n_val = (val_fraction * m as f64).round() as usize;
    if val_fraction > 0.0 && m >= 2 {
        n_val = n_val.clamp(1, m - 1);
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

struct Prepared<T: Real> {
    input: Tensor<T>,
    target: Tensor<T>,
    layout: PatchLayout,
    sample: usize,
}

fn prepare<T: Real>(model: &Mspt<T>, s: &SampleRecord, sample: usize) -> Result<Prepared<T>> {
    s.validate()?;
    Ok(Prepared {
        input: s.model_input(),
        target: s.target(),
        layout: model.layout(&s.coords_f64(), s.coord_dim, s.grid.is_some())?,
        sample,
    })
}

/// One sample's loss and parameter gradients.
fn sample_gradients<T: Real>(
    model: &Mspt<T>,
    p: &Prepared<T>,
    s: &SampleRecord,
    w: &LossWeights,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, &p.input, &p.layout)?;
    let main = group_loss(&mut tape, rec.pred, &p.target, &s.groups, w.volume, w.surface)?;
    let mut loss = tape.scale(main, T::from_f64(w.rel_l2));
    if w.grad_reg > 0.0 {
        let g = gradient_regularizer(&mut tape, rec.pred, &p.target, s.grid)?;
        let g = tape.scale(g, T::from_f64(w.grad_reg));
        loss = tape.add(loss, g)?;
    }
    let value = tape.value(loss).data()[0].to_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {value}")));
    }
    let grads = tape.backward(loss)?;
    let n = model.params.len();
    Ok((value, (0..n).map(|i| grads.param(i)).collect()))
}

fn validation_error<T: Real>(model: &Mspt<T>, val: &[Prepared<T>]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for p in val {
        let pred = model.forward(&p.input, &p.layout)?;
        if !pred.all_finite() {
            return Err(Error::Numeric("non-finite validation prediction".into()));
        }
        total += relative_l2(pred.data(), p.target.data())?;
    }
    Ok(total / val.len() as f64)
}

/// Trains a model from scratch. When `out_dir` is given, the per-epoch CSV
/// log and the best and last checkpoints are written there.
pub fn train<T: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Input("training needs at least two samples".into()));
    }
    let first = &data.samples[0];
    let mut model_cfg = model_cfg.clone();
    if model_cfg.in_dim == 0 {
        model_cfg.in_dim = first.coord_dim + first.in_dim;
    }
    if model_cfg.out_dim == 0 {
        model_cfg.out_dim = first.out_dim;
    }
    let mut model = Mspt::<T>::new(model_cfg, cfg.seed)?;

    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let inputs: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| data.samples[i].model_input::<f64>().data().to_vec())
        .collect();
    let targets: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| data.samples[i].targets.iter().map(|&v| v as f64).collect())
        .collect();
    model.normalizer = Normalizer::fit(
        &inputs.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        model.config.in_dim,
        &targets.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        model.config.out_dim,
    );
    let prep = |ix: &[usize]| -> Result<Vec<Prepared<T>>> {
        ix.iter().map(|&i| prepare(&model, &data.samples[i], i)).collect()
    };
    let train_set = prep(&train_idx)?;
    let val_set = prep(&val_idx)?;

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = File::create(dir.join(METRICS_FILE))?;
            writeln!(f, "{CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let opt_cfg = cfg.optimizer_config();
    let mut state = OptimizerState::new(cfg.optimizer, model.params.tensors());
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x74_7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best_val) = (0, f64::INFINITY);
    let mut step = 0u64;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Tensor<T>> = model
                .params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &b in batch {
                let p = &train_set[b];
                let (loss, grads) = sample_gradients(&model, p, &data.samples[p.sample], &cfg.loss)?;
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        a.add_assign(&g)?;
                    }
                }
            }
            if batch.len() > 1 {
                let s = T::from_f64(1.0 / batch.len() as f64);
                acc.iter_mut().for_each(|a| a.data_mut().iter_mut().for_each(|v| *v *= s));
            }
            step += 1;
            lr = lr_schedule(step, total, cfg.peak_lr, cfg.final_lr, cfg.warmup_fraction);
            let params = model.params.tensors_mut();
            match cfg.optimizer {
                OptimizerKind::Adamw => adamw_step(params, &acc, &mut state, lr, &opt_cfg)?,
                OptimizerKind::Lion => lion_step(params, &acc, &mut state, lr, &opt_cfg)?,
            }
        }
        let val = validation_error(&model, &val_set)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_rel_l2: val,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} lr {:.3e}",
            entry.train_loss,
            val,
            lr
        );
        if let (Some(f), Some(dir)) = (log.as_mut(), out_dir) {
            writeln!(f, "{}", entry.csv_row())?;
            f.flush()?;
            if val < best_val {
                let meta = serde_json::json!({ "epoch": epoch, "val_rel_l2": val, "seed": cfg.seed });
                save_checkpoint(dir.join(BEST_CHECKPOINT), &model, &meta)?;
            }
        }
        if val < best_val || best_epoch == 0 {
            best_val = val;
            best_epoch = epoch;
        }
        history.push(entry);
        if epoch == 10.min(cfg.epochs) && epoch > 1 {
            let early: Vec<f64> = history.iter().map(|e| e.train_loss).collect();
            if early.windows(2).all(|w| w[1] >= w[0]) {
                log::warn!("training loss did not decrease over the first {epoch} epochs");
            }
        }
    }
    if let Some(dir) = out_dir {
        let meta = serde_json::json!({ "epoch": cfg.epochs, "seed": cfg.seed });
        save_checkpoint(dir.join(LAST_CHECKPOINT), &model, &meta)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val,
    })
}
