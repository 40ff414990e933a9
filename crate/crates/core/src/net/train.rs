use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{mse_loss, save_checkpoint, AdamW, AdamWConfig, Mode, Network, Tensor};

/// In-memory (input, target) pairs; inputs are `(1, H, W)` and targets
/// `(C, H_out, D_out, W_out)`, flattened.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub inputs: Vec<Vec<f32>>,
    pub targets: Vec<Vec<f32>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> TrainingSet {
        TrainingSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    fn batch(&self, idx: &[usize], net: &Network<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let [h, w] = net.config().input_size;
        let out = net.config().output_shape();
        let mut xs = Vec::with_capacity(idx.len() * h * w);
        let mut ys = Vec::new();
        for &i in idx {
            xs.extend_from_slice(&self.inputs[i]);
            ys.extend_from_slice(&self.targets[i]);
        }
        let n = idx.len();
        let x = Tensor::new(vec![n, 1, h, w], xs)?;
        let y = Tensor::new(vec![n, out[0], out[1], out[2], out[3]], ys)?;
        Ok((x, y))
    }
}

/// Piecewise-constant learning rate: `initial` before `decay_epoch`,
/// `decayed` from then on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_epoch: usize,
}

impl LrSchedule {
    pub fn paper() -> Self {
        LrSchedule {
            initial: 1e-4,
            decayed: 1e-5,
            decay_epoch: 30,
        }
    }

    pub fn desk() -> Self {
        LrSchedule {
            initial: 2e-3,
            decayed: 2e-4,
            decay_epoch: 60,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.initial
        } else {
            self.decayed
        }
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop after the first epoch that ends past this many seconds.
    pub max_seconds: Option<f64>,
    /// Stop once validation MSE reaches this value.
    pub target_val_mse: Option<f64>,
    /// Checkpoint written after every completed epoch.
    pub checkpoint: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 80,
            batch_size: 4,
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            max_seconds: None,
            target_val_mse: None,
            checkpoint: None,
            metrics_csv: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// Mean squared target value: the MSE of always predicting zero.
pub fn zero_predictor_mse(set: &TrainingSet) -> f64 {
    let (sum, n) = set
        .targets
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), &v| (s + (v as f64).powi(2), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Evaluation-mode MSE over the whole set.
pub fn evaluate_mse(net: &mut Network<f32>, set: &TrainingSet, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(chunk, net)?;
        let pred = net.forward(&x, Mode::Eval)?;
        total += mse_loss(&pred, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Evaluation-mode prediction for one `(1, H, W)` input.
pub fn predict(net: &mut Network<f32>, input: &[f32]) -> Result<Vec<f32>> {
    let [h, w] = net.config().input_size;
    let x = Tensor::new(vec![1, 1, h, w], input.to_vec())?;
    Ok(net.forward(&x, Mode::Eval)?.into_data())
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut s = String::from("epoch,train_mse,val_mse,lr\n");
    for m in metrics {
        let val = m.val_mse.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.9e},{},{:e}", m.epoch, m.train_mse, val, m.lr);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Mini-batch AdamW training. Batches are drawn from a seeded shuffle, so a
/// run is reproducible from `opts.seed`. A non-finite loss aborts with
/// [`Error::Diverged`], leaving the previous epoch's checkpoint in place.
pub fn train(
    net: &mut Network<f32>,
    train_set: &TrainingSet,
    val_set: &TrainingSet,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.optimizer);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let (x, y) = train_set.batch(batch, net)?;
            net.zero_grad();
            let pred = net.forward(&x, Mode::Train).map_err(|e| diverged(epoch, e))?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss became {loss}"),
                });
            }
            net.backward(&grad).map_err(|e| diverged(epoch, e))?;
            opt.step(net.params_mut(), lr)?;
        }
        let train_mse = evaluate_mse(net, train_set, opts.batch_size)?;
        let val_mse = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_mse(net, val_set, opts.batch_size)?)
        };
        if !train_mse.is_finite() || val_mse.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                reason: format!("evaluation MSE train {train_mse}, val {val_mse:?}"),
            });
        }
        metrics.push(EpochMetrics {
            epoch,
            train_mse,
            val_mse,
            lr,
        });
        if let Some(p) = &opts.checkpoint {
            save_checkpoint(p, net, epoch, lr, opts.seed)?;
        }
        if let Some(p) = &opts.metrics_csv {
            write_metrics_csv(p, &metrics)?;
        }
        let hit_target = matches!((opts.target_val_mse, val_mse), (Some(t), Some(v)) if v <= t);
        let out_of_time = opts.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() > s);
        if hit_target || out_of_time {
            stopped_early = epoch + 1 < opts.epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        metrics,
        stopped_early,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(reason) => Error::Diverged { epoch, reason },
        other => other,
    }
}
