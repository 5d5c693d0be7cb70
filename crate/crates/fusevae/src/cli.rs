//! Command-line surface: config to data to training to evaluation.
//!
//! Every command is a pure function of its config, input files and seed at
//! the level of output bytes. Wall-clock information never lands in data
//! files; each command writes it to a `run_meta.json` sidecar instead, so
//! reruns can be compared with a plain directory diff that skips that one
//! file. Exit codes: 0 success, 2 usage or config errors, 3 numeric failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EvalOptions, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{alignment_score, latent_pca, run_grid, spectral_energy, EvalGrid};
use crate::missingness::Indicator;
use crate::model::{HierSpec, Model, ModelConfig};
use crate::objective::{StepReport, TrainConfig, Trainer};
use crate::synthdata::{export, import, make_dataset, pgm, Dataset, Sample, Split};
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(name = "fusevae", version, about = "Multimodal image synthesis from incomplete data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic co-registered multimodal dataset.
    GenerateData(GenerateDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Synthesize every modality from an observed subset of images.
    Synthesize(SynthesizeArgs),
    /// Score a checkpoint over the test split.
    Evaluate(EvaluateArgs),
    /// Train and compare ablation variants along one axis.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenerateDataArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `<output_dir>/data` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory written by generate-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory to continue from; step numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthesizeArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Observed images, either `<modality>=<file.pgm>` or a dataset file
    /// whose name ends in `_<modality>.pgm`.
    #[arg(long = "inputs", required = true, num_args = 1..)]
    pub inputs: Vec<String>,
    /// Sampling temperatures; each writes its own outputs and panel.
    #[arg(long = "temperature", num_args = 1.., default_values_t = [0.0])]
    pub temperatures: Vec<f64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed for temperatures above zero.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by generate-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the grid, summary and montages.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration supplying evaluation options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured grid temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationAxis {
    /// Latent hierarchy depth 1, 2 and 3.
    Levels,
    /// Expert fusion: product, average, concatenation with zeros.
    Fusion,
    /// Adversarial term on and off.
    Gan,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Which axis to vary; everything else comes from the config.
    #[arg(long, value_enum)]
    pub axis: AblationAxis,
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory written by generate-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; defaults to `<output_dir>/ablate-<axis>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses, runs and maps errors to the documented exit codes.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}{e}", error_prefix());
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerics(_) => 3,
        _ => 2,
    }
}

/// ANSI-red `error: ` unless `NO_COLOR` is set or stderr is not a terminal.
fn error_prefix() -> &'static str {
    use std::io::IsTerminal;
    if std::env::var_os("NO_COLOR").is_some() || !std::io::stderr().is_terminal() {
        "error: "
    } else {
        "\x1b[31merror:\x1b[0m "
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => cmd_generate_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Synthesize(args) => cmd_synthesize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

/// The only file that may contain wall-clock information.
#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    started_unix_ms: u128,
    duration_ms: u128,
}

struct MetaClock {
    command: &'static str,
    started: SystemTime,
    timer: Instant,
}

impl MetaClock {
    fn start(command: &'static str) -> Self {
        MetaClock { command, started: SystemTime::now(), timer: Instant::now() }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let meta = RunMeta {
            command: self.command,
            started_unix_ms: self
                .started
                .duration_since(UNIX_EPOCH)
                .unwrap_or_default()
                .as_millis(),
            duration_ms: self.timer.elapsed().as_millis(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::parse(e.to_string()))?;
        std::fs::write(dir.join("run_meta.json"), json)?;
        Ok(())
    }
}

fn cmd_generate_data(args: GenerateDataArgs) -> Result<()> {
    let clock = MetaClock::start("generate-data");
    let cfg = RunConfig::load(&args.config)?;
    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("data"));
    let dataset = make_dataset(&cfg.dataset)?;
    export(&dataset, &out)?;
    let d = &cfg.dataset;
    println!(
        "dataset: {} modalities at {}x{}, {} train / {} val / {} test (seed {})",
        d.modalities, d.side, d.side, d.train, d.val, d.test, d.seed
    );
    println!("wrote {}", out.display());
    clock.write(&out)
}

/// Shared by train and ablate: epochs with periodic checkpoints, a CSV log
/// and epoch summaries on stdout. Returns the trainer with final weights.
fn train_loop(
    mut trainer: Trainer,
    samples: &[Sample],
    start_epoch: usize,
    checkpoint_every: usize,
    out: &Path,
    quiet: bool,
) -> Result<Trainer> {
    std::fs::create_dir_all(out)?;
    let log_path = out.join("train_log.csv");
    let append = start_epoch > 0 && log_path.exists();
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&log_path)?,
    );
    if !append {
        writeln!(log, "{}", StepReport::CSV_HEADER)?;
    }
    let epochs = trainer.config().epochs;
    let total = trainer.total_steps(samples.len());
    for epoch in start_epoch..epochs {
        let mut count = 0usize;
        let (mut loss, mut recon, mut kl) = (0.0, 0.0, 0.0);
        let mut gan_on = false;
        let step_result = trainer.run_epoch(samples, epoch, total, &mut |r: &StepReport| {
            writeln!(log, "{}", r.csv_row())?;
            count += 1;
            loss += r.loss;
            recon += r.recon;
            kl += r.kl;
            gan_on |= r.gan_active;
            Ok(())
        });
        // A numeric abort still leaves the log and earlier checkpoints on
        // disk; nothing written so far is rolled back.
        log.flush()?;
        step_result?;
        if !quiet {
            let n = count.max(1) as f64;
            println!(
                "epoch {}/{} loss {:.6} recon {:.6} kl {:.6} gan {}",
                epoch + 1,
                epochs,
                loss / n,
                recon / n,
                kl / n,
                if gan_on { "on" } else { "off" }
            );
        }
        let last = epoch + 1 == epochs;
        if !last && (epoch + 1) % checkpoint_every == 0 {
            let dir = out.join(format!("checkpoints/epoch-{:04}", epoch + 1));
            trainer.save_checkpoint(&dir, epoch as u64)?;
            if !quiet {
                println!("checkpoint {}", dir.display());
            }
        }
    }
    let final_dir = out.join("checkpoint-final");
    trainer.save_checkpoint(&final_dir, epochs.saturating_sub(1) as u64)?;
    if !quiet {
        println!(
            "trained {} steps, final checkpoint {}",
            trainer.steps_done(),
            final_dir.display()
        );
    }
    Ok(trainer)
}

fn check_model_fits_dataset(model_cfg: &ModelConfig, dataset: &Dataset) -> Result<()> {
    if model_cfg.modalities != dataset.config.modalities {
        return Err(Error::config(format!(
            "model: covers {} modalities but the dataset has {}",
            model_cfg.modalities, dataset.config.modalities
        )));
    }
    if model_cfg.hier.side != dataset.config.side {
        return Err(Error::config(format!(
            "model: image side {} does not match the dataset side {}",
            model_cfg.hier.side, dataset.config.side
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let clock = MetaClock::start("train");
    let cfg = RunConfig::load(&args.config)?;
    let dataset = import(&args.data)?;
    check_model_fits_dataset(&cfg.model, &dataset)?;
    let out = args.out.unwrap_or_else(|| cfg.output_dir.clone());
    let train: Vec<Sample> = dataset.split_samples(Split::Train).cloned().collect();

    let (trainer, start_epoch) = match &args.resume {
        Some(dir) => {
            let (trainer, meta) = Trainer::resume(dir, cfg.train.clone())?;
            if trainer.model().config() != &cfg.model {
                return Err(Error::config(
                    "model: checkpoint architecture differs from the config".to_string(),
                ));
            }
            let next_epoch = meta.epoch as usize + 1;
            println!(
                "resuming from step {}, starting epoch {}/{}",
                meta.step,
                next_epoch + 1,
                cfg.train.epochs
            );
            (trainer, next_epoch)
        }
        None => (Trainer::new(Model::new(cfg.model.clone())?, cfg.train.clone())?, 0),
    };
    train_loop(trainer, &train, start_epoch, cfg.checkpoint_every, &out, false)?;
    clock.write(&out)
}

/// `(modality, path)` from `2=img.pgm` or a dataset file like `00017_2.pgm`.
fn parse_input_spec(spec: &str) -> Result<(usize, PathBuf)> {
    if let Some((idx, path)) = spec.split_once('=') {
        let m: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("inputs: bad modality index in {spec:?}")))?;
        return Ok((m, PathBuf::from(path)));
    }
    let path = PathBuf::from(spec);
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(".pgm"));
    if let Some(stem) = stem {
        if let Some((_, idx)) = stem.rsplit_once('_') {
            if let Ok(m) = idx.parse::<usize>() {
                return Ok((m, path));
            }
        }
    }
    Err(Error::config(format!(
        "inputs: cannot tell which modality {spec:?} is; use <modality>=<file.pgm>"
    )))
}

fn read_image(path: &Path, side: usize) -> Result<Tensor> {
    let (w, h, data) = pgm::read(path)?;
    if w != side || h != side {
        return Err(Error::config(format!(
            "{}: {w}x{h} does not match the model side {side}",
            path.display()
        )));
    }
    pgm::dequantize(w, h, &data)
}

/// Lays out same-sized grayscale images on a grid and quantizes to 8 bits.
fn montage(rows: &[Vec<Tensor>]) -> Result<(usize, usize, Vec<u8>)> {
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::contract("montage needs a non-empty rectangular grid"));
    }
    let side = match *rows[0][0].shape() {
        [1, h, w] if h == w => h,
        ref s => return Err(Error::shape(format!("montage tiles must be square planes, got {s:?}"))),
    };
    let (width, height) = (cols * side, rows.len() * side);
    let mut out = vec![0u8; width * height];
    for (ry, row) in rows.iter().enumerate() {
        for (cx, tile) in row.iter().enumerate() {
            if tile.shape() != [1, side, side] {
                return Err(Error::shape("montage tiles differ in size".to_string()));
            }
            let q = pgm::quantize(tile);
            for y in 0..side {
                let dst = (ry * side + y) * width + cx * side;
                out[dst..dst + side].copy_from_slice(&q[y * side..(y + 1) * side]);
            }
        }
    }
    Ok((width, height, out))
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<()> {
    let clock = MetaClock::start("synthesize");
    let (model, _) = Model::load(&args.checkpoint)?;
    let m = model.config().modalities;
    let side = model.config().hier.side;

    let mut images: Vec<Option<Tensor>> = vec![None; m];
    let mut bits = vec![false; m];
    for spec in &args.inputs {
        let (modality, path) = parse_input_spec(spec)?;
        if modality >= m {
            return Err(Error::config(format!(
                "inputs: modality {modality} out of range, model has {m}"
            )));
        }
        if bits[modality] {
            return Err(Error::config(format!("inputs: modality {modality} given twice")));
        }
        images[modality] = Some(read_image(&path, side)?);
        bits[modality] = true;
    }
    let subset = Indicator::new(&bits)?;

    std::fs::create_dir_all(&args.out)?;
    for &t in &args.temperatures {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::config(format!(
                "temperature must be finite and non-negative, got {t}"
            )));
        }
        // A fresh stream per temperature keeps each panel a pure function
        // of (checkpoint, inputs, seed, t), independent of sweep order.
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let outputs = model.synthesize(&images, &subset, t, &mut rng)?;
        for (j, img) in outputs.iter().enumerate() {
            let path = args.out.join(format!("synth-t{t:.2}-m{j}.pgm"));
            pgm::write(&path, side, side, &pgm::quantize(img))?;
            println!("wrote {}", path.display());
        }
        let (w, h, data) = montage(&[outputs])?;
        let panel = args.out.join(format!("panel-t{t:.2}.pgm"));
        pgm::write(&panel, w, h, &data)?;
        println!("wrote {}", panel.display());
    }
    clock.write(&args.out)
}

/// Mean spectral energy per modality over real test images and over
/// images synthesized from every other modality. `None` for a single
/// modality, where no complement exists.
fn spectral_pair(
    model: &Model,
    dataset: &Dataset,
    cutoff: f64,
    temperature: f64,
) -> Result<Vec<Option<(f64, f64)>>> {
    let m = model.config().modalities;
    let samples: Vec<&Sample> = dataset.split_samples(Split::Test).collect();
    if samples.is_empty() {
        return Err(Error::contract("spectral summary needs a test split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x7370_6563);
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let others: Vec<bool> = (0..m).map(|k| k != j).collect();
        let complement = Indicator::new(&others);
        let complement = match complement {
            Ok(c) if !c.is_empty() => c,
            _ => {
                out.push(None);
                continue;
            }
        };
        let (mut real, mut synth) = (0.0, 0.0);
        for sample in &samples {
            let target = sample.images[j]
                .as_ref()
                .ok_or_else(|| Error::contract("test split must be complete"))?;
            real += spectral_energy(target, cutoff)?;
            let masked: Vec<Option<Tensor>> = (0..m)
                .map(|k| if k == j { None } else { sample.images[k].clone() })
                .collect();
            let outputs = model.synthesize(&masked, &complement, temperature, &mut rng)?;
            synth += spectral_energy(&outputs[j], cutoff)?;
        }
        let n = samples.len() as f64;
        out.push(Some((real / n, synth / n)));
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalSummary {
    temperature: f64,
    sample_count: usize,
    cross_modal_psnr: f64,
    cross_modal_baseline: f64,
    alignment: f64,
    /// Per modality: mean spectral energy of real test images and of
    /// images synthesized from the complementary subset.
    spectral: Vec<Option<SpectralPair>>,
}

#[derive(Serialize)]
struct SpectralPair {
    real: f64,
    synthesized: f64,
}

/// Grid, summary, latent diagnostics and montages for one checkpoint.
fn evaluate_into(
    model: &Model,
    dataset: &Dataset,
    opts: &EvalOptions,
    out: &Path,
    quiet: bool,
) -> Result<EvalGrid> {
    std::fs::create_dir_all(out)?;
    let grid = run_grid(model, dataset, Split::Test, opts.temperature)?;
    std::fs::write(out.join("grid.csv"), grid.to_csv())?;
    std::fs::write(out.join("grid.json"), grid.to_json()?)?;

    let m = model.config().modalities;
    let test: Vec<Sample> = dataset.split_samples(Split::Test).cloned().collect();
    let diag: Vec<Sample> = test.iter().take(opts.pca_samples).cloned().collect();
    let alignment = if m >= 2 { alignment_score(model, &diag)? } else { f64::NAN };
    // The scatter needs at least three latent channels to be worth plotting.
    if m >= 2 && model.config().hier.levels[0].channels >= 3 {
        let combos: Vec<Indicator> =
            (0..m).map(|j| Indicator::single(j, m)).collect::<Result<_>>()?;
        let report = latent_pca(model, &diag, &combos)?;
        let mut csv = String::from("combination,point,c1,c2\n");
        for proj in &report.projections {
            for (i, p) in proj.points.iter().enumerate() {
                let c1 = p.first().copied().unwrap_or(0.0);
                let c2 = p.get(1).copied().unwrap_or(0.0);
                csv.push_str(&format!("{},{},{:.6},{:.6}\n", proj.combination, i, c1, c2));
            }
        }
        std::fs::write(out.join("pca.csv"), csv)?;
    }

    let spectral = spectral_pair(model, dataset, opts.spectral_cutoff, opts.temperature)?;
    let summary = EvalSummary {
        temperature: opts.temperature,
        sample_count: grid.sample_count,
        cross_modal_psnr: grid.cross_modal_psnr(),
        cross_modal_baseline: grid.cross_modal_baseline(),
        alignment,
        spectral: spectral
            .iter()
            .map(|p| p.map(|(real, synthesized)| SpectralPair { real, synthesized }))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(out.join("summary.json"), json)?;

    // Qualitative panels: top row the real targets, then one row of all-M
    // outputs per single-modality input.
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f_6e74);
    for sample in test.iter().take(opts.montage_samples) {
        let targets: Vec<Tensor> = (0..m)
            .map(|j| sample.images[j].clone().expect("test split is complete"))
            .collect();
        let mut rows = vec![targets];
        for j in 0..m {
            let single = Indicator::single(j, m)?;
            let masked: Vec<Option<Tensor>> = (0..m)
                .map(|k| if k == j { sample.images[k].clone() } else { None })
                .collect();
            rows.push(model.synthesize(&masked, &single, opts.temperature, &mut rng)?);
        }
        let (w, h, data) = montage(&rows)?;
        pgm::write(&out.join(format!("montage-{:05}.pgm", sample.id)), w, h, &data)?;
    }

    if !quiet {
        println!(
            "cross-modal psnr {:.3} dB (mean-image baseline {:.3} dB)",
            summary.cross_modal_psnr, summary.cross_modal_baseline
        );
        if alignment.is_finite() {
            println!("latent alignment {:.4}", alignment);
        }
        println!("wrote {}", out.display());
    }
    Ok(grid)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let clock = MetaClock::start("evaluate");
    let (model, _) = Model::load(&args.checkpoint)?;
    let dataset = import(&args.data)?;
    check_model_fits_dataset(model.config(), &dataset)?;
    let mut opts = match &args.config {
        Some(path) => RunConfig::load(path)?.eval,
        None => EvalOptions::default(),
    };
    if let Some(t) = args.temperature {
        opts.temperature = t;
    }
    opts.validate()?;
    evaluate_into(&model, &dataset, &opts, &args.out, false)?;
    clock.write(&args.out)
}

/// One ablation variant: a label and the model/training overrides.
struct Variant {
    label: String,
    model: ModelConfig,
    train: TrainConfig,
}

/// Hierarchy with `depth` levels: the finest `depth - 1` plus the global
/// level, so depth 1 keeps only the global vector.
fn truncate_hier(hier: &HierSpec, depth: usize) -> HierSpec {
    let mut levels: Vec<_> = hier.levels[..depth - 1].to_vec();
    levels.push(*hier.levels.last().expect("hierarchy is never empty"));
    HierSpec { side: hier.side, levels }
}

fn ablation_variants(axis: AblationAxis, cfg: &RunConfig) -> Result<Vec<Variant>> {
    use crate::model::FusionMode;
    let base_model = cfg.model.clone();
    let base_train = cfg.train.clone();
    let variants = match axis {
        AblationAxis::Levels => {
            if base_model.hier.depth() < 3 {
                return Err(Error::config(
                    "model: the levels axis needs a hierarchy at least three levels deep"
                        .to_string(),
                ));
            }
            (1..=3usize)
                .map(|depth| Variant {
                    label: format!("levels-{depth}"),
                    model: ModelConfig {
                        hier: truncate_hier(&base_model.hier, depth),
                        ..base_model.clone()
                    },
                    train: base_train.clone(),
                })
                .collect()
        }
        AblationAxis::Fusion => [
            ("poe", FusionMode::ProductOfExperts),
            ("average", FusionMode::AverageExperts),
            ("concat-zeros", FusionMode::ConcatZeros),
        ]
        .into_iter()
        .map(|(label, fusion)| Variant {
            label: label.to_string(),
            model: ModelConfig { fusion, ..base_model.clone() },
            train: base_train.clone(),
        })
        .collect(),
        AblationAxis::Gan => {
            let weight = if base_train.gan_weight > 0.0 {
                base_train.gan_weight
            } else {
                TrainConfig::default().gan_weight
            };
            vec![
                Variant {
                    label: "with-gan".to_string(),
                    model: base_model.clone(),
                    train: TrainConfig { gan_weight: weight, ..base_train.clone() },
                },
                Variant {
                    label: "without-gan".to_string(),
                    model: base_model,
                    train: TrainConfig { gan_weight: 0.0, ..base_train },
                },
            ]
        }
    };
    Ok(variants)
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Levels => "levels",
        AblationAxis::Fusion => "fusion",
        AblationAxis::Gan => "gan",
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let clock = MetaClock::start("ablate");
    let cfg = RunConfig::load(&args.config)?;
    let dataset = import(&args.data)?;
    let out = args
        .out
        .unwrap_or_else(|| cfg.output_dir.join(format!("ablate-{}", axis_name(args.axis))));
    std::fs::create_dir_all(&out)?;
    let train: Vec<Sample> = dataset.split_samples(Split::Train).cloned().collect();

    let mut table = String::from(
        "variant,cross_modal_psnr,cross_modal_baseline,spectral_real_m0,spectral_synth_m0\n",
    );
    for variant in ablation_variants(args.axis, &cfg)? {
        check_model_fits_dataset(&variant.model, &dataset)?;
        println!("variant {}", variant.label);
        let vdir = out.join(&variant.label);
        let model = Model::new(variant.model)?;
        let trainer = Trainer::new(model, variant.train)?;
        let trainer = train_loop(trainer, &train, 0, cfg.checkpoint_every, &vdir, true)?;
        let grid = evaluate_into(trainer.model(), &dataset, &cfg.eval, &vdir, true)?;
        let spectral = spectral_pair(
            trainer.model(),
            &dataset,
            cfg.eval.spectral_cutoff,
            cfg.eval.temperature,
        )?;
        let (real0, synth0) = spectral[0].unwrap_or((f64::NAN, f64::NAN));
        let row = format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            variant.label,
            grid.cross_modal_psnr(),
            grid.cross_modal_baseline(),
            real0,
            synth0,
        );
        println!("  {row}");
        table.push_str(&row);
        table.push('\n');
    }
    let table_path = out.join("comparison.csv");
    std::fs::write(&table_path, table)?;
    println!("wrote {}", table_path.display());
    clock.write(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_specs_parse_both_forms() {
        let (m, p) = parse_input_spec("2=scan.pgm").unwrap();
        assert_eq!((m, p.to_str().unwrap()), (2, "scan.pgm"));
        let (m, p) = parse_input_spec("data/images/00017_3.pgm").unwrap();
        assert_eq!((m, p.to_str().unwrap()), (3, "data/images/00017_3.pgm"));
        assert!(parse_input_spec("scan.pgm").is_err());
        assert!(parse_input_spec("x=scan.pgm").is_err());
    }

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::contract("x")), 2);
        assert_eq!(exit_code(&Error::parse("x")), 2);
        assert_eq!(exit_code(&Error::numerics("x")), 3);
    }

    #[test]
    fn montage_tiles_land_on_the_grid() {
        let a = Tensor::filled(&[1, 2, 2], 0.0);
        let b = Tensor::filled(&[1, 2, 2], 1.0);
        let (w, h, data) = montage(&[vec![a.clone(), b.clone()], vec![b, a]]).unwrap();
        assert_eq!((w, h), (4, 4));
        // Top-left tile dark, top-right bright, and the bottom row swapped.
        assert_eq!(data[0], 0);
        assert_eq!(data[2], 255);
        assert_eq!(data[2 * 4], 255);
        assert_eq!(data[2 * 4 + 2], 0);
    }

    #[test]
    fn hierarchy_truncation_keeps_the_global_level() {
        let hier = ModelConfig::desk(4).hier;
        let one = truncate_hier(&hier, 1);
        assert_eq!(one.levels.len(), 1);
        assert_eq!(one.levels[0].spatial, 1);
        let two = truncate_hier(&hier, 2);
        assert_eq!(two.levels.len(), 2);
        assert_eq!(two.levels[0].spatial, hier.side);
        assert_eq!(two.levels[1].spatial, 1);
        one.validate().unwrap();
        two.validate().unwrap();
    }

    #[test]
    fn ablation_axes_produce_the_documented_variants() {
        let cfg = RunConfig::desk(1);
        let levels = ablation_variants(AblationAxis::Levels, &cfg).unwrap();
        assert_eq!(
            levels.iter().map(|v| v.label.as_str()).collect::<Vec<_>>(),
            ["levels-1", "levels-2", "levels-3"]
        );
        let fusion = ablation_variants(AblationAxis::Fusion, &cfg).unwrap();
        assert_eq!(
            fusion.iter().map(|v| v.label.as_str()).collect::<Vec<_>>(),
            ["poe", "average", "concat-zeros"]
        );
        let gan = ablation_variants(AblationAxis::Gan, &cfg).unwrap();
        assert_eq!(
            gan.iter().map(|v| v.label.as_str()).collect::<Vec<_>>(),
            ["with-gan", "without-gan"]
        );
        assert!(gan[0].train.gan_weight > 0.0);
        assert_eq!(gan[1].train.gan_weight, 0.0);
    }
}
