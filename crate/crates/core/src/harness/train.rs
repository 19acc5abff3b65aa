use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{assemble_batch, Dataset};
use super::metrics::{evaluate, Evaluation};
use super::transfer::TransferReport;
use crate::dataio::binary::{read_all, write_atomic};
use crate::dataio::{load_into, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet, OUTPUT_UNIT};
use crate::optim::{
    accumulate, adam_step, bce_with_logits, l2_penalty, AdamState, EarlyStop, LrSchedule, StopDecision,
    EARLY_STOP_PATIENCE, PLATEAU_FACTOR, PLATEAU_MIN_DELTA, PLATEAU_PATIENCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    #[default]
    Copd,
    Emphysema,
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskTag::Copd => "copd",
            TaskTag::Emphysema => "emphysema",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Initial learning rate. Zero freezes the model: no updates at all.
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub max_epochs: usize,
    /// Overrides the model's own `l2_lambda` when set.
    pub l2_lambda: Option<f64>,
    pub seed: u64,
    pub task: TaskTag,
    /// Checkpoint to initialize from before training.
    pub source: Option<PathBuf>,
    pub reinit_head: bool,
    /// Units treated as the head by transfer initialization.
    pub head_units: Vec<String>,
    /// Also evaluate the training set (inference mode) after every epoch.
    pub eval_train: bool,
    /// Stop once training accuracy reaches this value; implies `eval_train`.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            lr: 1e-6,
            plateau_factor: PLATEAU_FACTOR,
            plateau_patience: PLATEAU_PATIENCE,
            plateau_min_delta: PLATEAU_MIN_DELTA,
            early_stop_patience: EARLY_STOP_PATIENCE,
            early_stop_min_delta: PLATEAU_MIN_DELTA,
            max_epochs: 100,
            l2_lambda: None,
            seed: 0,
            task: TaskTag::Copd,
            source: None,
            reinit_head: true,
            head_units: vec![OUTPUT_UNIT.to_string()],
            eval_train: false,
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if self.l2_lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::config("l2_lambda must be >= 0"));
        }
        if self.target_train_accuracy.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::config("target_train_accuracy must lie in [0, 1]"));
        }
        // Construct once so the scheduler and stopper reject bad settings up front.
        if self.lr > 0.0 {
            self.schedule()?;
        }
        EarlyStop::new(self.early_stop_patience, self.early_stop_min_delta)?;
        Ok(())
    }

    fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::with(
            self.lr,
            self.plateau_factor,
            self.plateau_patience,
            self.plateau_min_delta,
        )
    }
}

/// SHA-256 (hex) of the resolved model and training configuration.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training batches (before L2).
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
    pub train_accuracy: Option<f64>,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    MaxEpochs,
    EarlyStopped,
    TargetReached,
    /// Training hit a non-finite value; the best state so far was kept.
    Aborted {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub loss: f64,
}

impl From<&Evaluation> for TestMetrics {
    fn from(e: &Evaluation) -> Self {
        TestMetrics {
            accuracy: e.accuracy,
            auc: e.auc,
            loss: e.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch improved on the initial state.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test: Option<TestMetrics>,
    pub status: RunStatus,
    /// Epochs after which the learning rate decayed.
    pub lr_decays: Vec<usize>,
    pub config_digest: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferReport>,
}

impl TrainReport {
    /// First epoch whose validation accuracy is at least `target`.
    pub fn epochs_to_val_accuracy(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val_accuracy >= target).map(|e| e.epoch)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("report serializes");
        write_atomic(path.as_ref(), &json)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_all(path.as_ref())?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub struct Datasets<'a> {
    pub train: &'a dyn Dataset,
    pub val: &'a dyn Dataset,
    pub test: Option<&'a dyn Dataset>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

struct Snapshot {
    epoch: usize,
    lr: f64,
    state: ParamSet<f32>,
    adam: AdamState<f32>,
}

/// [`train_with`] without a progress callback.
pub fn train(model: &mut Model<f32>, data: &Datasets<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |_| {})
}

/// Runs the training loop and leaves `model` holding the best-validation
/// state. `on_epoch` sees each record as soon as it is complete.
pub fn train_with(
    model: &mut Model<f32>,
    data: &Datasets<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config(format!(
            "training needs non-empty train and validation sets (got {} / {})",
            data.train.len(),
            data.val.len()
        )));
    }
    let lambda = cfg.l2_lambda.unwrap_or(model.config().l2_lambda);
    let frozen = cfg.lr == 0.0;
    let mut schedule = if frozen { None } else { Some(cfg.schedule()?) };
    let mut stopper = EarlyStop::new(cfg.early_stop_patience, cfg.early_stop_min_delta)?;
    let mut adam = AdamState::<f32>::new();
    let digest = config_digest(model.config(), cfg);
    let eval_train = cfg.eval_train || cfg.target_train_accuracy.is_some();

    let initial = evaluate(model, data.val, cfg.batch_size)?;
    let mut best = Snapshot {
        epoch: 0,
        lr: cfg.lr,
        state: model.state(),
        adam: adam.clone(),
    };
    let mut best_val_loss = if initial.loss.is_finite() {
        initial.loss
    } else {
        f64::INFINITY
    };

    let mut epochs = Vec::new();
    let mut lr_decays = Vec::new();
    let mut status = RunStatus::MaxEpochs;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    'epochs: for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let lr = schedule.as_ref().map_or(0.0, |s| s.current_lr);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = assemble_batch(data.train, chunk)?;
            let (logits, ctx) = model.forward(&x, true)?;
            let (loss, grad) = bce_with_logits(&logits, &y)?;
            if !loss.is_finite() {
                status = RunStatus::Aborted {
                    reason: format!("non-finite training loss in epoch {epoch}"),
                };
                break 'epochs;
            }
            loss_sum += f64::from(loss) * chunk.len() as f64;
            if frozen {
                continue;
            }
            let mut grads = model.backward(&ctx, &grad)?;
            if lambda > 0.0 {
                let (_, l2) = l2_penalty(&model.parameters(), lambda)?;
                accumulate(&mut grads, &l2)?;
            }
            adam_step(&mut model.parameters_mut(), &grads, &mut adam, lr)?;
            model.update_running_stats(&ctx)?;
        }

        let val = evaluate(model, data.val, cfg.batch_size)?;
        let train_eval = if eval_train {
            Some(evaluate(model, data.train, cfg.batch_size)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_auc: val.auc,
            train_accuracy: train_eval.as_ref().map(|e| e.accuracy),
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if !val.loss.is_finite() {
            status = RunStatus::Aborted {
                reason: format!("non-finite validation loss in epoch {epoch}"),
            };
            break;
        }
        on_epoch(&record);
        epochs.push(record);

        if val.loss < best_val_loss {
            best_val_loss = val.loss;
            best = Snapshot {
                epoch,
                lr,
                state: model.state(),
                adam: adam.clone(),
            };
        }
        if let Some(s) = schedule.as_mut() {
            if s.update(val.loss)? {
                lr_decays.push(epoch);
            }
        }
        if let (Some(target), Some(e)) = (cfg.target_train_accuracy, &train_eval) {
            if e.accuracy >= target {
                status = RunStatus::TargetReached;
                break;
            }
        }
        if stopper.check(val.loss)? == StopDecision::Stop {
            status = RunStatus::EarlyStopped;
            break;
        }
    }

    let best_ckpt = Checkpoint {
        meta: CheckpointMeta::default(),
        tensors: best.state,
        optimizer: None,
    };
    load_into(model, &best_ckpt, true)?;
    let test = match data.test {
        Some(t) => Some(TestMetrics::from(&evaluate(model, t, cfg.batch_size)?)),
        None => None,
    };
    let meta = CheckpointMeta {
        epoch: best.epoch,
        lr: best.lr,
        config_digest: digest.clone(),
        task: cfg.task.to_string(),
        model: None,
        adam: None,
    };
    let optimizer = (best.adam.t > 0).then_some(&best.adam);
    let checkpoint = Checkpoint::from_model(model, meta, optimizer);
    let report = TrainReport {
        epochs,
        best_epoch: best.epoch,
        best_val_loss,
        test,
        status,
        lr_decays,
        config_digest: digest,
        model_config: model.config().clone(),
        train_config: cfg.clone(),
        transfer: None,
    };
    Ok(TrainOutcome { checkpoint, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::InMemoryDataset;
    use crate::preprocess::{Intensity, Volume};
    use crate::tensor::Shape5;

    fn config() -> ModelConfig {
        ModelConfig {
            input_shape: Shape5 {
                n: 1,
                c: 1,
                d: 8,
                h: 8,
                w: 8,
            },
            initial_filters: 2,
            main_filters: 3,
            stages: 1,
            fc_width: 4,
            seed: 3,
            ..Default::default()
        }
    }

    /// Bright volumes are positive, dark ones negative.
    fn dataset(n: usize, salt: usize) -> InMemoryDataset {
        InMemoryDataset::new(
            (0..n)
                .map(|i| {
                    let label = (i % 2) as u8;
                    let base = if label == 1 { 0.7 } else { 0.3 };
                    let v = Volume::from_fn([8, 8, 8], [1.0; 3], Intensity::Normalized, |z, y, x| {
                        base + ((z * 7 + y * 3 + x + i * 11 + salt) % 9) as f32 / 40.0
                    })
                    .unwrap();
                    (v, label)
                })
                .collect(),
        )
        .unwrap()
    }

    fn quick(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr,
            max_epochs: epochs,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_gives_one_row() {
        let (tr, va) = (dataset(6, 0), dataset(4, 5));
        let mut model = Model::build(config()).unwrap();
        let data = Datasets {
            train: &tr,
            val: &va,
            test: Some(&va),
        };
        let out = train(&mut model, &data, &quick(1e-3, 1)).unwrap();
        assert_eq!(out.report.epochs.len(), 1);
        assert_eq!(out.report.epochs[0].epoch, 1);
        assert_eq!(out.report.status, RunStatus::MaxEpochs);
        assert!(out.report.test.is_some());
        assert_eq!(out.checkpoint.meta.config_digest, out.report.config_digest);
        assert_eq!(out.checkpoint.meta.task, "copd");
        assert_eq!(out.checkpoint.tensors, model.state());
    }

    #[test]
    fn same_seed_same_losses() {
        let (tr, va) = (dataset(6, 0), dataset(4, 5));
        let data = Datasets {
            train: &tr,
            val: &va,
            test: None,
        };
        let run = || {
            let mut model = Model::build(config()).unwrap();
            train(&mut model, &data, &quick(1e-3, 2)).unwrap().report
        };
        let (a, b) = (run(), run());
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert!((x.train_loss - y.train_loss).abs() <= 1e-6);
            assert_eq!(x.val_loss, y.val_loss);
        }
    }

    #[test]
    fn zero_lr_freezes_everything() {
        let (tr, va) = (dataset(6, 0), dataset(4, 5));
        let mut model = Model::build(config()).unwrap();
        let before = model.clone();
        let data = Datasets {
            train: &tr,
            val: &va,
            test: None,
        };
        let out = train(&mut model, &data, &quick(0.0, 3)).unwrap();
        assert_eq!(model, before);
        let first = &out.report.epochs[0];
        for e in &out.report.epochs {
            assert_eq!(
                (e.val_loss, e.val_accuracy, e.lr),
                (first.val_loss, first.val_accuracy, 0.0)
            );
        }
    }

    #[test]
    fn rejects_empty_sets_and_bad_configs() {
        let tr = dataset(4, 0);
        let empty = InMemoryDataset::default();
        let mut model = Model::build(config()).unwrap();
        let data = Datasets {
            train: &empty,
            val: &tr,
            test: None,
        };
        assert!(matches!(
            train(&mut model, &data, &quick(1e-3, 1)),
            Err(Error::Config(_))
        ));
        let data = Datasets {
            train: &tr,
            val: &tr,
            test: None,
        };
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..quick(1e-3, 1)
            },
            quick(-1.0, 1),
            quick(1e-3, 0),
            TrainConfig {
                plateau_factor: 1.5,
                ..quick(1e-3, 1)
            },
        ] {
            assert!(
                matches!(train(&mut model, &data, &cfg), Err(Error::Config(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn lr_only_decays_by_the_plateau_factor() {
        let (tr, va) = (dataset(4, 0), dataset(4, 5));
        let mut model = Model::build(config()).unwrap();
        let data = Datasets {
            train: &tr,
            val: &va,
            test: None,
        };
        let cfg = TrainConfig {
            plateau_patience: 0,
            plateau_min_delta: 10.0,
            early_stop_patience: 100,
            ..quick(1e-3, 4)
        };
        let report = train(&mut model, &data, &cfg).unwrap().report;
        let lrs: Vec<f64> = report.epochs.iter().map(|e| e.lr).collect();
        // Epoch 1 always improves on an infinite best, so decays start after epoch 2.
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3 * 0.9, 1e-3 * 0.9 * 0.9]);
        assert_eq!(report.lr_decays, vec![2, 3, 4]);
    }

    #[test]
    fn digest_tracks_every_setting() {
        let m = config();
        let t = TrainConfig::default();
        assert_eq!(config_digest(&m, &t), config_digest(&m, &t.clone()));
        assert_ne!(
            config_digest(&m, &t),
            config_digest(&m, &TrainConfig { seed: 1, ..t.clone() })
        );
        assert_ne!(
            config_digest(&m, &t),
            config_digest(
                &ModelConfig {
                    fc_width: 5,
                    ..m.clone()
                },
                &t
            )
        );
        assert_eq!(config_digest(&m, &t).len(), 64);
    }

    #[test]
    fn report_json_round_trips() {
        let (tr, va) = (dataset(4, 0), dataset(4, 5));
        let mut model = Model::build(config()).unwrap();
        let data = Datasets {
            train: &tr,
            val: &va,
            test: None,
        };
        let report = train(&mut model, &data, &quick(1e-3, 2)).unwrap().report;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.write_json(&path).unwrap();
        assert_eq!(TrainReport::read_json(&path).unwrap(), report);
    }
}
