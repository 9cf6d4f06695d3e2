//! Teacher-forced training with Adam.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Model};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) with the lowest validation loss, or training loss
    /// when there is no validation split.
    pub best_epoch: usize,
    pub best_params: ParamStore,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.3}", e.epoch, e.train_loss, val, e.seconds);
        }
        s
    }
}

fn sample_grads(model: &Model, ex: &Example) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let loss = model.loss(&tape, &p, &ex.input, &ex.target)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = loss.backward()?;
    Ok((value, model.params().collect_grads(&p, &grads)))
}

/// Mean per-example loss without updating anything.
pub fn mean_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("mean_loss: no examples"));
    }
    let losses = par::try_map(examples, |ex| {
        let tape = Tape::new();
        let p = model.params().bind_frozen(&tape);
        Ok::<f64, Error>(model.loss(&tape, &p, &ex.input, &ex.target)?.value().item())
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn dump_batch(dir: Option<&Path>, epoch: usize, batch: &[&Example], losses: &[f64]) -> String {
    let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
    let summary = format!("non-finite loss in epoch {epoch}; batch ids {ids:?}; losses {losses:?}");
    if let Some(dir) = dir {
        let detail = serde_json::json!({
            "epoch": epoch,
            "ids": ids,
            "losses": losses.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
            "targets": batch.iter().map(|e| &e.target).collect::<Vec<_>>(),
            "feature_max_abs": batch.iter().map(|e| e.input.features.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))).collect::<Vec<_>>(),
        });
        let path = dir.join("nan_batch.json");
        if fs::create_dir_all(dir).and_then(|_| fs::write(&path, detail.to_string())).is_ok() {
            return format!("{summary}; details in {}", path.display());
        }
    }
    summary
}

/// Trains in place. With `out_dir`, writes `train_log.csv` and the best
/// checkpoint under `checkpoint/`.
pub fn train(model: &mut Model, train: &[Example], val: &[Example], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    for ex in train.iter().chain(val) {
        model.check_input(&ex.input)?;
    }
    let mut adam = AdamState::new(cfg.adam, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let results = par::try_map(&batch, |ex| sample_grads(model, ex))?;
            let losses: Vec<f64> = results.iter().map(|r| r.0).collect();
            if losses.iter().any(|l| !l.is_finite()) {
                let msg = dump_batch(out_dir, epoch, &batch, &losses);
                log::error!("{msg}");
                return Err(Error::Numeric(msg));
            }
            let store = model.params_mut();
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in &results {
                store.accumulate(g, scale)?;
            }
            adam.step(store)?;
            total += losses.iter().sum::<f64>();
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() { None } else { Some(mean_loss(model, val)?) };
        let seconds = start.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:?} ({seconds:.2}s)");
        let criterion = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|b| criterion < b.0) {
            best = Some((criterion, epoch, model.params().clone()));
        }
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            seconds,
        });
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, model.params().clone()),
    };
    let report = TrainReport {
        epochs,
        best_epoch,
        best_params,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train_log.csv");
        fs::write(&log_path, report.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        Model::from_params(model.config().clone(), report.best_params.clone())?.save(&dir.join("checkpoint"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_image_features;
    use crate::model::{ModelConfig, ModelInput};

    fn examples(cfg: &ModelConfig, n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("s{i}"),
                input: ModelInput {
                    features: synth_image_features(i as u64, 4, cfg.d_feature),
                    k_c: synth_image_features(100 + i as u64, 3, cfg.d_feature),
                    k_t: synth_image_features(200 + i as u64, 2, cfg.d_feature),
                },
                target: vec![4 + i % 3, 5, 6 + i % 2],
            })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let cfg = ModelConfig::micro(10);
        let mut m = Model::new(cfg.clone(), 1).unwrap();
        let before = m.params().clone();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 2,
            adam: AdamConfig {
                lr: 0.0,
                weight_decay: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        train(&mut m, &examples(&cfg, 4), &[], &tc, None).unwrap();
        for (a, b) in before.iter().zip(m.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn loss_decreases_and_logs() {
        let cfg = ModelConfig::micro(10);
        let data = examples(&cfg, 6);
        for seed in 0..3 {
            let mut m = Model::new(cfg.clone(), seed).unwrap();
            let init = mean_loss(&m, &data).unwrap();
            let tc = TrainConfig {
                epochs: 1,
                batch_size: 2,
                seed,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
                ..Default::default()
            };
            train(&mut m, &data, &data[..2], &tc, None).unwrap();
            assert!(mean_loss(&m, &data).unwrap() < init, "seed {seed}");
        }
    }

    #[test]
    fn writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::micro(10);
        let mut m = Model::new(cfg.clone(), 2).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..Default::default()
        };
        let data = examples(&cfg, 3);
        let r = train(&mut m, &data, &data, &tc, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,train_loss,val_loss,seconds"));
        let back = Model::load(&dir.path().join("checkpoint")).unwrap();
        for (a, b) in back.params().iter().zip(r.best_params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn nan_input_aborts_with_ids() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::micro(10);
        let mut m = Model::new(cfg.clone(), 2).unwrap();
        let mut data = examples(&cfg, 2);
        data[1].input.features.data_mut()[0] = f64::NAN;
        let err = train(&mut m, &data, &[], &TrainConfig::default(), Some(dir.path())).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("s1")),
            other => panic!("unexpected {other}"),
        }
        assert!(dir.path().join("nan_batch.json").exists());
    }
}
