//! Implementations behind the CLI subcommands: train, eval, ablate,
//! gradcheck, synth, plot. Every run that produces files also writes a
//! `manifest.txt` echoing the fully resolved configuration as `key = value`
//! lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::load_checkpoint;
use crate::data::{
    batch_to_tensors, generate_synthetic_em, load_image_stack, save_image_stack, split_train_val,
    Sample,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SuiteReport};
use crate::metrics::{
    connected_components, export_update_csv, pixel_accuracy, rand_index_foreground,
    soft_dice_coefficient, UpdateRecord,
};
use crate::net::{build_network, Network, NetworkConfig};
use crate::plot::plot_csv;
use crate::rng::derive_rng;
use crate::tensor::no_grad;
use crate::train::{
    evaluate, export_history_csv, fit_with, mc_dropout_predict, EpochRecord, LossKind,
    TrainConfig, DICE_SMOOTH_DEFAULT,
};
use crate::{blocks::ForwardCtx, ops::sigmoid};

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_config(path: &Path) -> Result<(NetworkConfig, TrainConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut net = NetworkConfig::from_toml_str(&text)?;
    let train = TrainConfig::from_toml_str(&text)?;
    if let Some(rate) = train.dropout_rate {
        net.dropout_rate = rate;
    }
    Ok((net, train))
}

pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        let _ = writeln!(text, "{k} = {v}");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn config_entries(net: &NetworkConfig, train: &TrainConfig) -> Vec<(String, String)> {
    let mut e = Vec::new();
    let mut push = |k: &str, v: String| e.push((k.to_string(), v));
    push(
        "network.input_resolution",
        format!("{}x{}", net.input_resolution.0, net.input_resolution.1),
    );
    push("network.input_channels", net.input_channels.to_string());
    push("network.long_skips", net.long_skips.to_string());
    push("network.short_skips", net.short_skips.to_string());
    push("network.batch_norm", net.batch_norm.to_string());
    push("network.dropout_rate", net.dropout_rate.to_string());
    for (i, r) in net.rows.iter().enumerate() {
        push(
            &format!("network.row.{i}"),
            format!(
                "{} {:?} {}x{} width={} repeat={}",
                r.name, r.block, r.resolution.0, r.resolution.1, r.width, r.repeat
            ),
        );
    }
    push("train.loss", format!("{:?}", train.loss));
    push("train.learning_rate", train.learning_rate.to_string());
    push("train.weight_decay", train.weight_decay.to_string());
    push("train.rms_decay", train.rms_decay.to_string());
    push("train.rms_eps", train.rms_eps.to_string());
    push("train.epochs", train.epochs.to_string());
    push("train.batch_size", train.batch_size.to_string());
    push("train.seed", train.seed.to_string());
    push(
        "train.dropout_rate",
        train
            .dropout_rate
            .map_or("network".to_string(), |r| r.to_string()),
    );
    push("train.augment", format!("{:?}", train.augment));
    e
}

/// Where samples come from: a directory in the documented stack layout, or
/// the synthetic generator.
#[derive(Debug, Clone)]
pub enum DataSource {
    Stack(PathBuf),
    Synthetic { count: usize },
}

fn load_data(source: &DataSource, net: &NetworkConfig, seed: u64) -> Result<Vec<Sample>> {
    let samples = match source {
        DataSource::Stack(dir) => load_image_stack(dir, "*.png")?,
        DataSource::Synthetic { count } => {
            let (h, w) = net.input_resolution;
            if h != w {
                return Err(Error::Config(format!(
                    "synthetic data needs a square input resolution, config has {h}x{w}"
                )));
            }
            generate_synthetic_em(seed, *count, h)?
        }
    };
    for s in &samples {
        if (s.image.h, s.image.w) != net.input_resolution {
            return Err(Error::Config(format!(
                "sample resolution {}x{} does not match network input {}x{}",
                s.image.h, s.image.w, net.input_resolution.0, net.input_resolution.1
            )));
        }
    }
    Ok(samples)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: DataSource,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub val_ratio: f64,
    pub out: PathBuf,
    pub quiet: bool,
}

pub struct TrainSummary {
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub param_count: usize,
}

pub fn run_train(args: &TrainArgs) -> Result<TrainSummary> {
    let (netcfg, mut traincfg) = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        traincfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        traincfg.epochs = epochs;
    }
    let samples = load_data(&args.data, &netcfg, traincfg.seed)?;
    let split = split_train_val(samples, args.val_ratio, traincfg.seed)?;
    let net = build_network::<f32>(&netcfg, traincfg.seed)?;
    if !args.quiet {
        println!(
            "training {} parameters on {} train / {} val samples",
            net.param_count(),
            split.train.len(),
            split.val.len()
        );
    }
    let result = fit_with(&net, &split.train, &split.val, &traincfg, &mut |r| {
        if !args.quiet {
            println!(
                "epoch {:>3}  train {:.4}  val {:.4}  acc {:.3}/{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
            );
        }
    })?;

    ensure_dir(&args.out)?;
    export_history_csv(&result.history, &args.out.join("history.csv"))?;
    export_update_csv(&result.telemetry, &args.out.join("telemetry.csv"))?;
    let ckpt = args.out.join("best.ckpt");
    fs::write(&ckpt, &result.best_checkpoint).map_err(|e| Error::io(&ckpt, e))?;

    let mut entries = vec![
        ("command".to_string(), "train".to_string()),
        ("config".to_string(), args.config.display().to_string()),
        ("data".to_string(), format!("{:?}", args.data)),
        ("val_ratio".to_string(), args.val_ratio.to_string()),
        ("param_count".to_string(), net.param_count().to_string()),
        (
            "best_epoch".to_string(),
            result.best_epoch.map_or("none".into(), |e| e.to_string()),
        ),
        ("best_val_loss".to_string(), result.best_val_loss.to_string()),
    ];
    entries.extend(config_entries(&netcfg, &traincfg));
    write_manifest(&args.out.join("manifest.txt"), &entries)?;
    Ok(TrainSummary {
        best_val_loss: result.best_val_loss,
        best_epoch: result.best_epoch,
        history: result.history,
        param_count: net.param_count(),
    })
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub data_seed: u64,
    pub mc_samples: Option<usize>,
    pub mc_rate: f64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub bce_loss: f64,
    pub dice_loss: f64,
    pub pixel_accuracy: f64,
    pub soft_dice: f64,
    pub rand_index: f64,
    pub mc_soft_dice: Option<f64>,
}

fn per_sample_metrics(net: &Network<f32>, samples: &[Sample]) -> Result<(f64, f64, f64)> {
    // (pixel accuracy, soft dice, foreground-restricted rand index)
    let mut acc = 0.0;
    let mut dice = 0.0;
    let mut rand = 0.0;
    let mut rand_n = 0usize;
    for s in samples {
        let (x, _) = batch_to_tensors::<f32>(&[s])?;
        let probs = no_grad(|| -> Result<Vec<f64>> {
            let logits = net.forward(&x, &mut ForwardCtx::eval())?;
            Ok(sigmoid(&logits).data().iter().map(|&v| v as f64).collect())
        })?;
        let truth_bits = s.mask_bools();
        let pred_bits: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
        acc += pixel_accuracy(&pred_bits, &truth_bits)?;
        let truth_f: Vec<f64> = s.mask.data.iter().map(|&v| v as f64).collect();
        dice += soft_dice_coefficient(&probs, &truth_f, DICE_SMOOTH_DEFAULT)?;
        let (h, w) = (s.mask.h, s.mask.w);
        let pred_labels = connected_components(&pred_bits, h, w);
        let true_labels = connected_components(&truth_bits, h, w);
        if let Ok(ri) = rand_index_foreground(&pred_labels, &true_labels) {
            rand += ri;
            rand_n += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((acc / n, dice / n, rand / rand_n.max(1) as f64))
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    let net = load_checkpoint::<f32>(&args.checkpoint)?;
    let samples = load_data(&args.data, net.config(), args.data_seed)?;
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let (bce, _) = evaluate(&net, &samples, LossKind::Bce, 1)?;
    let (dice_l, _) = evaluate(&net, &samples, LossKind::Dice, 1)?;
    let (pix, soft, rand) = per_sample_metrics(&net, &samples)?;

    let mc_soft_dice = match args.mc_samples {
        None => None,
        Some(n) => {
            let mut total = 0.0;
            let mut rng = derive_rng(args.data_seed, "mc-eval", 0);
            for s in &samples {
                let (x, _) = batch_to_tensors::<f32>(&[s])?;
                let probs = mc_dropout_predict(&net, &x, n, args.mc_rate, &mut rng)?;
                let pv: Vec<f64> = probs.data().iter().map(|&v| v as f64).collect();
                let truth_f: Vec<f64> = s.mask.data.iter().map(|&v| v as f64).collect();
                total += soft_dice_coefficient(&pv, &truth_f, DICE_SMOOTH_DEFAULT)?;
            }
            Some(total / samples.len() as f64)
        }
    };

    let report = EvalReport {
        bce_loss: bce,
        dice_loss: dice_l,
        pixel_accuracy: pix,
        soft_dice: soft,
        rand_index: rand,
        mc_soft_dice,
    };
    let mut entries = vec![
        ("command".to_string(), "eval".to_string()),
        (
            "checkpoint".to_string(),
            args.checkpoint.display().to_string(),
        ),
        ("samples".to_string(), samples.len().to_string()),
        ("bce_loss".to_string(), report.bce_loss.to_string()),
        ("dice_loss".to_string(), report.dice_loss.to_string()),
        (
            "pixel_accuracy".to_string(),
            report.pixel_accuracy.to_string(),
        ),
        ("soft_dice".to_string(), report.soft_dice.to_string()),
        ("rand_index".to_string(), report.rand_index.to_string()),
    ];
    if let Some(mc) = report.mc_soft_dice {
        entries.push(("mc_soft_dice".to_string(), mc.to_string()));
        entries.push((
            "mc_samples".to_string(),
            args.mc_samples.unwrap().to_string(),
        ));
        entries.push(("mc_rate".to_string(), args.mc_rate.to_string()));
    }
    for (k, v) in &entries {
        println!("{k} = {v}");
    }
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        write_manifest(&out.join("report.txt"), &entries)?;
    }
    Ok(report)
}

/// Skip-connection ablation variants (long, short).
#[derive(Debug, Clone, Copy)]
pub struct VariantSpec {
    pub name: &'static str,
    pub long_skips: bool,
    pub short_skips: bool,
}

pub const MODEL_1: VariantSpec = VariantSpec {
    name: "model1-long-and-short",
    long_skips: true,
    short_skips: true,
};
pub const MODEL_2: VariantSpec = VariantSpec {
    name: "model2-short-only",
    long_skips: false,
    short_skips: true,
};
pub const MODEL_3: VariantSpec = VariantSpec {
    name: "model3-long-only",
    long_skips: true,
    short_skips: false,
};
pub const MODEL_NONE: VariantSpec = VariantSpec {
    name: "noskip",
    long_skips: false,
    short_skips: false,
};

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: &'static str,
    pub long_skips: bool,
    pub short_skips: bool,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub telemetry: Vec<UpdateRecord>,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
}

impl AblationRun {
    /// First epoch whose validation loss reaches `threshold`, if any.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.history
            .iter()
            .find(|r| r.val_loss <= threshold)
            .map(|r| r.epoch)
    }

    pub fn train_loss_at_best(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e].train_loss)
    }
}

/// Trains every (variant, seed) combination on identical per-seed data and
/// identically initialized shared parameters. Jobs run data-parallel; the
/// result order is the fixed (variant-major, seed-minor) grid order, so
/// output is independent of scheduling.
pub fn run_ablation_grid(
    netcfg: &NetworkConfig,
    traincfg: &TrainConfig,
    variants: &[VariantSpec],
    seeds: &[u64],
    synth_count: usize,
    val_ratio: f64,
) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(VariantSpec, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let cfg = NetworkConfig {
                long_skips: variant.long_skips,
                short_skips: variant.short_skips,
                ..netcfg.clone()
            };
            let tcfg = TrainConfig {
                seed,
                ..traincfg.clone()
            };
            let samples = load_data(&DataSource::Synthetic { count: synth_count }, &cfg, seed)?;
            let split = split_train_val(samples, val_ratio, seed)?;
            let net = build_network::<f32>(&cfg, seed)?;
            let result = fit_with(&net, &split.train, &split.val, &tcfg, &mut |_| {})?;
            Ok(AblationRun {
                variant: variant.name,
                long_skips: variant.long_skips,
                short_skips: variant.short_skips,
                seed,
                history: result.history,
                telemetry: result.telemetry,
                best_val_loss: result.best_val_loss,
                best_epoch: result.best_epoch,
            })
        })
        .collect()
}

pub struct AblateArgs {
    pub config: PathBuf,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub synth_count: usize,
    pub val_ratio: f64,
    pub include_no_skip: bool,
    pub out: PathBuf,
    pub quiet: bool,
}

pub const COMPARISON_CSV_HEADER: &str =
    "model,long_skips,short_skips,seed,best_epoch,train_loss_at_best,best_val_loss";

pub fn comparison_csv_string(runs: &[AblationRun]) -> String {
    let mut out = String::from(COMPARISON_CSV_HEADER);
    out.push('\n');
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.long_skips,
            r.short_skips,
            r.seed,
            r.best_epoch.map_or("none".into(), |e| e.to_string()),
            r.train_loss_at_best()
                .map_or("none".into(), |l| l.to_string()),
            r.best_val_loss
        );
    }
    out
}

/// Runs the three skip-connection models of the ablation study (plus the
/// no-skip variant on request) with a shared seed, then writes per-model
/// history and telemetry CSVs and a comparison table.
pub fn run_ablate(args: &AblateArgs) -> Result<Vec<AblationRun>> {
    let (netcfg, mut traincfg) = read_config(&args.config)?;
    if let Some(epochs) = args.epochs {
        traincfg.epochs = epochs;
    }
    let mut variants = vec![MODEL_1, MODEL_2, MODEL_3];
    if args.include_no_skip {
        variants.push(MODEL_NONE);
    }
    let runs = run_ablation_grid(
        &netcfg,
        &traincfg,
        &variants,
        &[args.seed],
        args.synth_count,
        args.val_ratio,
    )?;

    ensure_dir(&args.out)?;
    for run in &runs {
        let dir = args.out.join(run.variant);
        ensure_dir(&dir)?;
        export_history_csv(&run.history, &dir.join("history.csv"))?;
        export_update_csv(&run.telemetry, &dir.join("telemetry.csv"))?;
    }
    let comparison = comparison_csv_string(&runs);
    let cmp_path = args.out.join("comparison.csv");
    fs::write(&cmp_path, &comparison).map_err(|e| Error::io(&cmp_path, e))?;
    if !args.quiet {
        print!("{comparison}");
    }

    let mut entries = vec![
        ("command".to_string(), "ablate".to_string()),
        ("config".to_string(), args.config.display().to_string()),
        ("seed".to_string(), args.seed.to_string()),
        ("synth_count".to_string(), args.synth_count.to_string()),
        ("val_ratio".to_string(), args.val_ratio.to_string()),
        (
            "variants".to_string(),
            variants
                .iter()
                .map(|v| v.name)
                .collect::<Vec<_>>()
                .join(" "),
        ),
    ];
    entries.extend(config_entries(&netcfg, &traincfg));
    write_manifest(&args.out.join("manifest.txt"), &entries)?;
    Ok(runs)
}

/// Runs the finite-difference suite; prints one line per check.
pub fn run_gradcheck(seeds: usize, out: Option<&Path>) -> Result<SuiteReport> {
    let report = run_suite(seeds)?;
    for o in &report.outcomes {
        println!(
            "{} {:<28} max rel err {:.3e} (tolerance {:.0e})",
            if o.passed() { "PASS" } else { "FAIL" },
            o.name,
            o.max_rel_err,
            o.threshold
        );
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let mut csv = String::from("check,max_rel_err,threshold,passed\n");
        for o in &report.outcomes {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                o.name,
                o.max_rel_err,
                o.threshold,
                o.passed()
            );
        }
        let p = dir.join("gradcheck.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        write_manifest(
            &dir.join("manifest.txt"),
            &[
                ("command".to_string(), "gradcheck".to_string()),
                ("seeds".to_string(), seeds.to_string()),
                ("passed".to_string(), report.passed().to_string()),
            ],
        )?;
    }
    Ok(report)
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let samples = generate_synthetic_em(args.seed, args.count, args.size)?;
    ensure_dir(&args.out)?;
    save_image_stack(&args.out, &samples)?;
    write_manifest(
        &args.out.join("manifest.txt"),
        &[
            ("command".to_string(), "synth".to_string()),
            ("count".to_string(), args.count.to_string()),
            ("size".to_string(), args.size.to_string()),
            ("seed".to_string(), args.seed.to_string()),
        ],
    )
}

pub fn run_plot(input: &Path, output: &Path) -> Result<()> {
    plot_csv(input, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ArchRow, BlockKind};

    fn tiny_config_file(dir: &Path) -> PathBuf {
        let cfg = NetworkConfig {
            input_resolution: (16, 16),
            input_channels: 1,
            long_skips: true,
            short_skips: true,
            batch_norm: true,
            dropout_rate: 0.0,
            rows: vec![
                ArchRow {
                    name: "down1".into(),
                    block: BlockKind::Simple,
                    resolution: (8, 8),
                    width: 4,
                    repeat: 1,
                },
                ArchRow {
                    name: "up1".into(),
                    block: BlockKind::Simple,
                    resolution: (16, 16),
                    width: 4,
                    repeat: 1,
                },
                ArchRow {
                    name: "classifier".into(),
                    block: BlockKind::Conv1x1,
                    resolution: (16, 16),
                    width: 1,
                    repeat: 1,
                },
            ],
        };
        let text = format!(
            "{}\n[train]\nepochs = 2\nbatch_size = 2\nseed = 3\n",
            cfg.to_toml_string()
        );
        let p = dir.join("config.toml");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn train_writes_all_artifacts_and_epochs_zero_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_file(dir.path());
        let out = dir.path().join("run");
        let args = TrainArgs {
            config,
            data: DataSource::Synthetic { count: 6 },
            seed: Some(1),
            epochs: Some(0),
            val_ratio: 25.0 / 30.0,
            out: out.clone(),
            quiet: true,
        };
        let summary = run_train(&args).unwrap();
        assert!(summary.history.is_empty());
        for f in ["history.csv", "telemetry.csv", "best.ckpt", "manifest.txt"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let history = fs::read_to_string(out.join("history.csv")).unwrap();
        assert_eq!(history.trim(), crate::train::HISTORY_CSV_HEADER);
    }

    #[test]
    fn train_then_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_file(dir.path());
        let out = dir.path().join("run");
        run_train(&TrainArgs {
            config,
            data: DataSource::Synthetic { count: 8 },
            seed: Some(2),
            epochs: Some(2),
            val_ratio: 0.75,
            out: out.clone(),
            quiet: true,
        })
        .unwrap();
        let report = run_eval(&EvalArgs {
            checkpoint: out.join("best.ckpt"),
            data: DataSource::Synthetic { count: 2 },
            data_seed: 99,
            mc_samples: Some(2),
            mc_rate: 0.1,
            out: Some(out.join("eval")),
        })
        .unwrap();
        assert!(report.bce_loss.is_finite());
        assert!(report.pixel_accuracy >= 0.0 && report.pixel_accuracy <= 1.0);
        assert!(report.mc_soft_dice.is_some());
        assert!(out.join("eval/report.txt").exists());
    }

    #[test]
    fn ablate_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_file(dir.path());
        let read_all = |out: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = Vec::new();
            for variant in ["model1-long-and-short", "model2-short-only", "model3-long-only"] {
                for f in ["history.csv", "telemetry.csv"] {
                    let p = out.join(variant).join(f);
                    files.push((format!("{variant}/{f}"), fs::read(&p).unwrap()));
                }
            }
            files.push((
                "comparison.csv".into(),
                fs::read(out.join("comparison.csv")).unwrap(),
            ));
            files
        };
        let run = |out: PathBuf| {
            run_ablate(&AblateArgs {
                config: config.clone(),
                seed: 7,
                epochs: Some(1),
                synth_count: 4,
                val_ratio: 0.75,
                include_no_skip: false,
                out,
                quiet: true,
            })
            .unwrap()
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run(out_a.clone());
        run(out_b.clone());
        assert_eq!(read_all(&out_a), read_all(&out_b));
    }

    #[test]
    fn synth_writes_a_loadable_stack() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        run_synth(&SynthArgs {
            out: out.clone(),
            count: 3,
            size: 16,
            seed: 5,
        })
        .unwrap();
        let loaded = load_image_stack(&out, "*.png").unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(out.join("manifest.txt").exists());
    }
}
