//! Training: binary cross-entropy and Dice losses, RMSprop with coupled L2
//! weight decay, the epoch loop with per-layer update telemetry, best-on-
//! validation checkpointing, and Monte-Carlo dropout inference.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentFlags};
use crate::blocks::{ForwardCtx, Mode};
use crate::checkpoint::checkpoint_bytes;
use crate::data::{batch_to_tensors, Sample};
use crate::error::{Error, Result};
use crate::metrics::{record_layer_updates, snapshot_params, UpdateAccumulator, UpdateRecord};
use crate::net::Network;
use crate::ops::sigmoid;
use crate::rng::derive_rng;
use crate::tensor::{no_grad, real, Op, Parameter, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Dice,
}

/// Training recipe; defaults mirror RMSprop with learning rate 0.001 and
/// weight decay 0.001.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// When set, overrides the network config's dropout rate at build time.
    pub dropout_rate: Option<f64>,
    pub augment: AugmentFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Bce,
            learning_rate: 0.001,
            weight_decay: 0.001,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            dropout_rate: None,
            augment: AugmentFlags::none(),
        }
    }
}

#[derive(Deserialize)]
struct TrainFile {
    #[serde(default)]
    train: Option<TrainConfig>,
}

impl TrainConfig {
    /// Reads the optional `[train]` table from a config file; absent fields
    /// fall back to the defaults above.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TrainFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        let cfg = file.train.unwrap_or_default();
        if cfg.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                cfg.learning_rate
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Wrap<'a> {
            train: &'a TrainConfig,
        }
        toml::to_string(&Wrap { train: self }).expect("train config serializes")
    }
}

fn check_binary_targets<F: Real>(y: &Tensor<F>) -> Result<()> {
    if y.data()
        .iter()
        .any(|&v| v != F::zero() && v != F::one())
    {
        return Err(Error::Label(
            "targets must be strictly binary (0 or 1)".into(),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy of logits against binary labels, computed in
/// the numerically stable logit form
/// `max(z, 0) - z y + ln(1 + exp(-|z|))`.
pub fn bce_loss<F: Real>(logits: &Tensor<F>, targets: &Tensor<F>) -> Result<Tensor<F>> {
    let (ls, ts) = (logits.shape(), targets.shape());
    if ls != ts {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            left: ls,
            right: ts,
        });
    }
    check_binary_targets(targets)?;
    let y: Vec<F> = targets.data_vec();
    let total: f64 = {
        let zd = logits.data();
        zd.iter()
            .zip(y.iter())
            .map(|(&z, &t)| {
                let z = z.to_f64().unwrap();
                let t = t.to_f64().unwrap();
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum()
    };
    let mean = total / y.len() as f64;
    Ok(Tensor::from_op(
        vec![real(mean)],
        vec![1],
        Op::BceWithLogits {
            logits: logits.clone(),
            targets: y,
        },
        logits.tracks(),
    ))
}

/// Dice loss on probabilities:
/// `-(2 sum(o y) + smooth) / (sum o + sum y + smooth)`.
pub fn dice_loss_from_probs<F: Real>(
    probs: &Tensor<F>,
    targets: &Tensor<F>,
    smooth: f64,
) -> Result<Tensor<F>> {
    let (ps, ts) = (probs.shape(), targets.shape());
    if ps != ts {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            left: ps,
            right: ts,
        });
    }
    let s = real::<F>(smooth);
    let inter = probs.mul(targets)?.sum();
    let numer = inter.scale(real(2.0)).offset(s);
    let denom = probs.sum().add(&targets.sum())?.offset(s);
    Ok(numer.div(&denom)?.neg())
}

/// Dice loss of logits: sigmoid first, then the smoothed overlap ratio.
pub fn dice_loss<F: Real>(logits: &Tensor<F>, targets: &Tensor<F>, smooth: f64) -> Result<Tensor<F>> {
    dice_loss_from_probs(&sigmoid(logits), targets, smooth)
}

pub const DICE_SMOOTH_DEFAULT: f64 = 1.0;

pub fn loss_of_kind<F: Real>(
    kind: LossKind,
    logits: &Tensor<F>,
    targets: &Tensor<F>,
) -> Result<Tensor<F>> {
    match kind {
        LossKind::Bce => bce_loss(logits, targets),
        LossKind::Dice => dice_loss(logits, targets, DICE_SMOOTH_DEFAULT),
    }
}

/// RMSprop state: one squared-gradient accumulator per named parameter.
/// Update rule per step, elementwise:
/// `g = grad + wd * theta; acc = rho * acc + (1 - rho) * g^2;
///  theta -= lr * g / (sqrt(acc) + eps)`.
pub struct RmsProp<F: Real> {
    names: Vec<String>,
    acc: Vec<Vec<F>>,
    pub steps: u64,
}

impl<F: Real> RmsProp<F> {
    pub fn new(params: &[Parameter<F>]) -> Self {
        RmsProp {
            names: params.iter().map(|p| p.name.clone()).collect(),
            acc: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &[Parameter<F>], cfg: &TrainConfig) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::OptimizerState(format!(
                "{} parameters but optimizer tracks {}",
                params.len(),
                self.names.len()
            )));
        }
        let lr = real::<F>(cfg.learning_rate);
        let wd = real::<F>(cfg.weight_decay);
        let rho = real::<F>(cfg.rms_decay);
        let one_minus_rho = F::one() - rho;
        let eps = real::<F>(cfg.rms_eps);
        for (i, p) in params.iter().enumerate() {
            if p.name != self.names[i] {
                return Err(Error::OptimizerState(format!(
                    "parameter {i} is '{}', optimizer expects '{}'",
                    p.name, self.names[i]
                )));
            }
            let grad = p.tensor.grad_vec().ok_or_else(|| {
                Error::OptimizerState(format!("parameter '{}' has no gradient", p.name))
            })?;
            let acc = &mut self.acc[i];
            if grad.len() != acc.len() {
                return Err(Error::OptimizerState(format!(
                    "parameter '{}' gradient length {} vs state {}",
                    p.name,
                    grad.len(),
                    acc.len()
                )));
            }
            p.tensor.apply_data(|theta| {
                for k in 0..theta.len() {
                    let g = grad[k] + wd * theta[k];
                    acc[k] = rho * acc[k] + one_minus_rho * g * g;
                    theta[k] = theta[k] - lr * g / (acc[k].sqrt() + eps);
                }
            });
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn batch_accuracy<F: Real>(logits: &Tensor<F>, targets: &Tensor<F>) -> (usize, usize) {
    let ld = logits.data();
    let td = targets.data();
    let hits = ld
        .iter()
        .zip(td.iter())
        .filter(|(&z, &y)| (z > F::zero()) == (y >= real(0.5)))
        .count();
    (hits, ld.len())
}

/// One full pass over `data` in a seeded shuffle order. Per batch:
/// augment, forward in train mode, loss, backward, snapshot, RMSprop step,
/// telemetry record, zero gradients. Accuracy is measured on the train-mode
/// outputs of the augmented batches.
pub fn train_epoch<F: Real>(
    net: &Network<F>,
    data: &[Sample],
    cfg: &TrainConfig,
    opt: &mut RmsProp<F>,
    telemetry: &mut UpdateAccumulator,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Config("train_epoch called with no data".into()));
    }
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive_rng(cfg.seed, "shuffle", epoch as u64));
    }

    let mut loss_weighted = 0.0f64;
    let mut seen = 0usize;
    let mut hits = 0usize;
    let mut pixels = 0usize;
    let mut tail: Vec<f64> = Vec::new();
    for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
        let augmented: Vec<Sample> = chunk
            .iter()
            .map(|&i| {
                if cfg.augment.any() {
                    let tag = ((epoch as u64) << 32) | i as u64;
                    augment_sample(&data[i], &mut derive_rng(cfg.seed, "augment", tag), &cfg.augment)
                } else {
                    data[i].clone()
                }
            })
            .collect();
        let refs: Vec<&Sample> = augmented.iter().collect();
        let (x, y) = batch_to_tensors::<F>(&refs)?;
        let mut ctx = ForwardCtx::train(derive_rng(
            cfg.seed,
            "forward",
            ((epoch as u64) << 32) | batch_idx as u64,
        ));
        let logits = net.forward(&x, &mut ctx)?;
        let loss = loss_of_kind(cfg.loss, &logits, &y)?;
        let lv = loss.item()?.to_f64().unwrap();
        if !lv.is_finite() {
            return Err(Error::NanLoss {
                epoch,
                batch: batch_idx,
                tail,
            });
        }
        tail.push(lv);
        if tail.len() > 8 {
            tail.remove(0);
        }
        let (h, n) = batch_accuracy(&logits, &y);
        hits += h;
        pixels += n;
        loss_weighted += lv * chunk.len() as f64;
        seen += chunk.len();

        loss.backward()?;
        let before = snapshot_params(net.parameters());
        opt.step(net.parameters(), cfg)?;
        let after = snapshot_params(net.parameters());
        record_layer_updates(&before, &after, telemetry)?;
        net.zero_grads();
    }
    telemetry.close_epoch(epoch);
    Ok(EpochStats {
        mean_loss: loss_weighted / seen as f64,
        accuracy: hits as f64 / pixels as f64,
    })
}

/// Loss and pixel accuracy over a dataset in eval mode, without gradients
/// or augmentation.
pub fn evaluate<F: Real>(
    net: &Network<F>,
    data: &[Sample],
    kind: LossKind,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Config("evaluate called with no data".into()));
    }
    let batch_size = batch_size.max(1);
    no_grad(|| {
        let mut loss_weighted = 0.0;
        let mut hits = 0usize;
        let mut pixels = 0usize;
        for chunk in data.chunks(batch_size) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (x, y) = batch_to_tensors::<F>(&refs)?;
            let logits = net.forward(&x, &mut ForwardCtx::eval())?;
            let loss = loss_of_kind(kind, &logits, &y)?;
            loss_weighted += loss.item()?.to_f64().unwrap() * chunk.len() as f64;
            let (h, n) = batch_accuracy(&logits, &y);
            hits += h;
            pixels += n;
        }
        Ok((
            loss_weighted / data.len() as f64,
            hits as f64 / pixels as f64,
        ))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub telemetry: Vec<UpdateRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    /// Checkpoint of the strictly-best validation loss (the initial state
    /// when no epoch ran or none improved).
    pub best_checkpoint: Vec<u8>,
}

/// Runs the epoch loop, evaluating on `val` after each epoch and keeping
/// the checkpoint of every strict validation-loss improvement.
pub fn fit<F: Real>(
    net: &Network<F>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    fit_with(net, train_set, val_set, cfg, &mut |_| {})
}

/// `fit` with a per-epoch observer (progress printing, early inspection).
pub fn fit_with<F: Real>(
    net: &Network<F>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut opt = RmsProp::new(net.parameters());
    let mut telemetry = UpdateAccumulator::for_params(net.parameters());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut best_checkpoint = checkpoint_bytes(net);
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(net, train_set, cfg, &mut opt, &mut telemetry, epoch)?;
        let (val_loss, val_acc) = evaluate(net, val_set, cfg.loss, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            val_loss,
            train_acc: stats.accuracy,
            val_acc,
        };
        on_epoch(&record);
        history.push(record);
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = Some(epoch);
            best_checkpoint = checkpoint_bytes(net);
        }
    }
    Ok(FitResult {
        history,
        telemetry: telemetry.into_records(),
        best_epoch,
        best_val_loss,
        best_checkpoint,
    })
}

/// Averages `n_samples` stochastic forward passes with dropout active at
/// `rate` (batch norm and everything else in eval mode); returns the mean
/// sigmoid probabilities.
pub fn mc_dropout_predict<F: Real>(
    net: &Network<F>,
    x: &Tensor<F>,
    n_samples: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    if n_samples == 0 {
        return Err(Error::Contract {
            op: "mc_dropout_predict",
            msg: "n_samples must be at least 1".into(),
        });
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "mc dropout rate must be in [0, 1), got {rate}"
        )));
    }
    no_grad(|| {
        let mut mean: Vec<f64> = Vec::new();
        let mut shape = Vec::new();
        for _ in 0..n_samples {
            let pass_seed: u64 = rng.random();
            let mut ctx = ForwardCtx::new(
                Mode::McSample { rate },
                ChaCha8Rng::seed_from_u64(pass_seed),
            );
            let probs = sigmoid(&net.forward(x, &mut ctx)?);
            if mean.is_empty() {
                shape = probs.shape();
                mean = vec![0.0; probs.numel()];
            }
            for (m, &p) in mean.iter_mut().zip(probs.data().iter()) {
                *m += p.to_f64().unwrap();
            }
        }
        let inv = 1.0 / n_samples as f64;
        let data: Vec<F> = mean.into_iter().map(|m| real(m * inv)).collect();
        Tensor::from_vec(data, &shape)
    })
}

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc";

pub fn history_csv_string(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
        ));
    }
    out
}

pub fn export_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    fs::write(path, history_csv_string(history)).map_err(|e| Error::io(path, e))
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_CSV_HEADER => {}
        other => {
            return Err(Error::CsvParse {
                line: 1,
                msg: format!("expected header '{HISTORY_CSV_HEADER}', got {other:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::CsvParse {
                line: i + 1,
                msg: format!("expected 5 fields, got {}", f.len()),
            });
        }
        let err = |msg: String| Error::CsvParse { line: i + 1, msg };
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|e| err(format!("epoch: {e}")))?,
            train_loss: f[1].parse().map_err(|e| err(format!("train_loss: {e}")))?,
            val_loss: f[2].parse().map_err(|e| err(format!("val_loss: {e}")))?,
            train_acc: f[3].parse().map_err(|e| err(format!("train_acc: {e}")))?,
            val_acc: f[4].parse().map_err(|e| err(format!("val_acc: {e}")))?,
        });
    }
    Ok(out)
}
