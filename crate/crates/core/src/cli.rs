//! The `otsnet` command surface.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
//! failure during training, 4 checkpoint mismatch.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::export::{expected_map_count, export_features, write_attention};
use crate::gradcheck::{suite::block_suite, GradcheckOptions};
use crate::model::OtsNet;
use crate::pgm::GrayImage;
use crate::train::ablation::{run_ablation, Suite};
use crate::train::synth::synth_sample;
use crate::train::{
    evaluate, recognize_all, render_plain, stack_images, synth_generate, worker_count, StepLog, SyntheticSample, Trainer,
};

/// Config copy stored next to every checkpoint.
pub const RUN_CONFIG: &str = "run.cfg";

#[derive(Debug, Parser)]
#[command(name = "otsnet", version, about = "Scene text recognition: train, evaluate, inspect")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured synthetic corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a split of the configured corpus.
    Eval(EvalArgs),
    /// Recognize graymap images, one output line per file.
    Infer(InferArgs),
    /// Write every attention map produced while reading one image.
    DumpAttention(DumpArgs),
    /// Write slot features of a corpus split as CSV.
    ExportFeatures(ExportArgs),
    /// Finite-difference check of every block and of the full loss.
    Gradcheck(GradcheckArgs),
    /// Train and compare the variants of an ablation suite.
    Ablate(AblateArgs),
    /// Render a string or a corpus sample to a graymap.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; relative checkpoint and log paths resolve inside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Holdout,
    All,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the config saved with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "holdout")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Image files or directories of images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[arg(long, value_enum, default_value = "holdout")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// dame, modules, sq_variants, alpha (alpha_sweep) or lambda (lambda_sweep).
    #[arg(long)]
    pub suite: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Table path; defaults to `ablation_<suite>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Text to draw without augmentation.
    #[arg(required_unless_present = "index", conflicts_with = "index")]
    pub text: Option<String>,
    /// Corpus sample to re-render instead, augmentation included.
    #[arg(long)]
    pub index: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigKey { .. } => 2,
        Error::Diverged { .. } | Error::NonFinite { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Infer(a) => cmd_infer(a, out, err),
        Command::DumpAttention(a) => cmd_dump_attention(a, out),
        Command::ExportFeatures(a) => cmd_export_features(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Render(a) => cmd_render(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Model and config for a checkpoint directory.
pub fn load_checkpoint(source: &CheckpointArgs) -> Result<(RunConfig, OtsNet)> {
    let cfg = match &source.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let p = source.checkpoint.join(RUN_CONFIG);
            let text = fs::read_to_string(&p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
    };
    let mut net = OtsNet::uninitialized(cfg.model.clone())?;
    checkpoint::load(&mut net.store, &source.checkpoint)?;
    Ok((cfg, net))
}

/// Writes weights plus the config that produced them.
pub fn save_checkpoint(net: &OtsNet, cfg: &RunConfig, dir: &Path) -> Result<()> {
    checkpoint::save(&net.store, dir)?;
    fs::write(dir.join(RUN_CONFIG), cfg.render())?;
    Ok(())
}

fn corpus_split(cfg: &RunConfig, split: Split) -> Result<Vec<SyntheticSample>> {
    let mut all = synth_generate(cfg.data.samples, cfg.data.seed, &cfg.data.spec)?;
    let cut = cfg.data.split_point();
    let part = match split {
        Split::Train => {
            all.truncate(cut);
            all
        }
        Split::Holdout => all.split_off(cut),
        Split::All => all,
    };
    if part.is_empty() {
        return Err(Error::ConfigKey { key: "data.samples".into(), reason: format!("the {split:?} split is empty") });
    }
    Ok(part)
}

fn rebase(dir: Option<&Path>, p: &Path) -> PathBuf {
    match dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    }
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    // The header and the saved run.cfg keep paths as configured, so runs
    // that differ only in their run directory produce identical files.
    let header: String = cfg.render().lines().map(|l| format!("# {l}\n")).collect();
    let run_dir = args.out.as_deref();
    let ckpt_dir = rebase(run_dir, &cfg.paths.checkpoint_dir);
    let log_file = rebase(run_dir, &cfg.paths.log_file);
    if let Some(d) = run_dir {
        fs::create_dir_all(d)?;
    }

    write!(out, "{header}")?;
    let corpus = synth_generate(cfg.data.samples, cfg.data.seed, &cfg.data.spec)?;
    let (train_set, held_out) = corpus.split_at(cfg.data.split_point());
    if train_set.is_empty() {
        return Err(Error::ConfigKey { key: "data.samples".into(), reason: "training split is empty".into() });
    }

    if let Some(parent) = log_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut log = BufWriter::new(fs::File::create(&log_file)?);
    write!(log, "{header}")?;
    writeln!(log, "{}", StepLog::HEADER)?;

    let mut net = OtsNet::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(&net, cfg.train.clone(), train_set.len())?;
    let per_epoch = cfg.train.steps_per_epoch(train_set.len());
    writeln!(
        out,
        "parameters={} train={} holdout={} steps={}",
        net.store.num_elements(),
        train_set.len(),
        held_out.len(),
        trainer.total_steps()
    )?;
    let every = cfg.paths.checkpoint_every;
    trainer.fit(&mut net, train_set, |step, net| {
        writeln!(log, "{step}")?;
        if (step.step + 1) % per_epoch == 0 {
            writeln!(out, "epoch={} loss={:.6} lr={:.3e} tau={:.4}", step.epoch, step.loss.total, step.lr, step.tau)?;
            if every > 0 && (step.epoch + 1) % every == 0 {
                save_checkpoint(net, &cfg, &ckpt_dir.join(format!("epoch_{:03}", step.epoch + 1)))?;
            }
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&net, &cfg, &ckpt_dir)?;

    let workers = worker_count();
    let (m, _) = evaluate(&net, train_set, workers)?;
    writeln!(out, "train {m}")?;
    if !held_out.is_empty() {
        let (m, _) = evaluate(&net, held_out, workers)?;
        writeln!(out, "holdout {m}")?;
    }
    writeln!(out, "checkpoint {}", ckpt_dir.display())?;
    Ok(0)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (mut cfg, net) = load_checkpoint(&args.source)?;
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    let data = corpus_split(&cfg, args.split)?;
    let (m, _) = evaluate(&net, &data, worker_count())?;
    write!(out, "{m}")?;
    Ok(0)
}

fn image_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> =
                fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// Reads and resizes one image for the model geometry.
pub fn load_image(path: &Path, cfg: &RunConfig) -> Result<crate::tensor::Tensor> {
    let img = GrayImage::read(path)?;
    Ok(img.resize(cfg.model.image_height, cfg.model.image_width).to_tensor())
}

pub fn cmd_infer(args: &InferArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let (cfg, net) = load_checkpoint(&args.source)?;
    let files = image_inputs(&args.inputs)?;
    let mut ok = Vec::new();
    let mut images = Vec::new();
    for f in &files {
        match load_image(f, &cfg) {
            Ok(t) => {
                ok.push(f);
                images.push(t);
            }
            Err(e) => writeln!(err, "warning: skipping {}: {e}", f.display())?,
        }
    }
    if images.is_empty() {
        return Err(Error::Image { path: args.inputs[0].clone(), reason: "no readable image".into() });
    }
    let refs: Vec<_> = images.iter().collect();
    for (f, r) in ok.iter().zip(recognize_all(&net, &refs, worker_count())?) {
        writeln!(out, "{}\t{}\t{:.4}\t{}", f.display(), r.text(), r.mean_confidence(), r.stop)?;
    }
    Ok(0)
}

pub fn cmd_dump_attention(args: &DumpArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, net) = load_checkpoint(&args.source)?;
    let image = load_image(&args.image, &cfg)?;
    let (recs, sink) = net.recognize_recorded(&stack_images([&image])?)?;
    let written = write_attention(&sink.records, &args.out)?;
    writeln!(out, "text={}", recs[0].text())?;
    writeln!(out, "maps={} expected={}", written.len(), expected_map_count(&cfg.model)?)?;
    writeln!(out, "out {}", args.out.display())?;
    Ok(0)
}

pub fn cmd_export_features(args: &ExportArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, net) = load_checkpoint(&args.source)?;
    let data = corpus_split(&cfg, args.split)?;
    let mut text = String::from("char_id");
    for i in 0..cfg.model.model_dim {
        text.push_str(&format!(",d{i}"));
    }
    text.push('\n');
    for chunk in data.chunks(32) {
        let images = stack_images(chunk.iter().map(|s| &s.image))?;
        let labels: Vec<_> = chunk.iter().map(SyntheticSample::label).collect();
        match export_features(&net, &images, &labels)? {
            Some(rows) => text.push_str(&rows),
            None => return Err(Error::Config("model has no slot alignment (model.use_pam = false)".into())),
        }
    }
    fs::write(&args.out, &text)?;
    writeln!(out, "rows={} out {}", text.lines().count() - 1, args.out.display())?;
    Ok(0)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let mut all = true;
    for c in block_suite(seed, GradcheckOptions::default())? {
        let verdict = if c.report.passed() { "PASS" } else { "FAIL" };
        writeln!(out, "{verdict} {} max_rel_err={:.3e}", c.block, c.report.max_rel_err())?;
        for p in c.report.failures() {
            writeln!(out, "  {} max_rel_err={:.3e} at {}", p.name, p.max_rel_err, p.worst_index)?;
        }
        all &= c.report.passed();
    }
    Ok(if all { 0 } else { 1 })
}

pub fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let suite: Suite = args.suite.parse()?;
    let cfg = load_config(args.config.as_deref())?;
    let mut lines = Vec::new();
    let table = run_ablation(suite, &cfg, &args.seeds, worker_count(), |l| lines.push(l.to_string()))?;
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    let path = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("ablation_{suite}.csv")));
    fs::write(&path, table.to_string())?;
    write!(out, "{table}")?;
    for v in table.verdicts() {
        writeln!(out, "{} {}", if v.passed { "PASS" } else { "FAIL" }, v.claim)?;
    }
    writeln!(out, "table {}", path.display())?;
    Ok(0)
}

pub fn cmd_render(args: &RenderArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(args.config.as_deref())?;
    let (image, text) = match (&args.text, args.index) {
        (_, Some(i)) => {
            let s = synth_sample(&cfg.data.spec, cfg.data.seed, i)?;
            (s.image, s.text)
        }
        (Some(t), None) => (render_plain(t, &cfg.data.spec)?, t.clone()),
        (None, None) => return Err(Error::Config("nothing to render".into())),
    };
    GrayImage::from_tensor(&image)?.write(&args.out)?;
    writeln!(out, "{}\t{text}", args.out.display())?;
    Ok(0)
}
