use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dynframe::crystal::CrystalStructure;
use dynframe::data::{gen_synthetic, load_dataset, split, write_dataset, Entry};
use dynframe::model::{Checkpoint, ForwardOptions, Model};
use dynframe::train::train;
use nalgebra::Vector3;

use crate::check::{run_suites, Status, Suite, REPORT_HEADER};
use crate::config::{first_mismatch, RunConfig};
use crate::error::CliError;

pub const PREDICT_HEADER: &str = "id,prediction";
pub const FRAMES_HEADER: &str =
    "checkpoint,layer,head,atom,kind,degenerate,fallback,sigma,e1_x,e1_y,e1_z,e2_x,e2_y,e2_z,e3_x,e3_y,e3_z";
pub const PERTURB_HEADER: &str = "step,displacement,prediction";

pub const FINAL_CHECKPOINT: &str = "checkpoint.json";
pub const SWA_CHECKPOINT: &str = "checkpoint_swa.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SPLIT_MANIFEST: &str = "split.json";

#[derive(Debug, Parser)]
#[command(name = "dynframe", version, about = "Train, evaluate and check dynamic-frame crystal encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, a CSV log and the split manifest.
    Train(TrainArgs),
    /// Write `id,prediction` rows for every record of a dataset.
    Predict(PredictArgs),
    /// Run invariance suites and exit with status 4 on any violation.
    Check(CheckArgs),
    /// Dump per layer, head and atom frames for one structure.
    Frames(FramesArgs),
    /// Sweep one atom along a direction and record predictions.
    Perturb(PerturbArgs),
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Sets both `train.seed` and `split.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.overrides {
            cfg.apply_override(pair)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.split.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// When given, the model keys must match the checkpoint.
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Checkpoint to check; a fresh model from the configuration otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Structures to use; synthetic ones otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of synthetic structures.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Comma-separated subset of suites.
    #[arg(long, value_delimiter = ',')]
    pub suites: Vec<String>,
    /// Report CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub corrupt_frames: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FramesArgs {
    /// One or more checkpoints; records are tagged with the file name.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Record index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Atom to move.
    #[arg(long)]
    pub atom: usize,
    /// `a`, `b` or `c` for a lattice vector, or `x,y,z` Cartesian.
    #[arg(long, default_value = "a")]
    pub direction: String,
    /// Displacements run evenly from `-range` to `range` Å.
    #[arg(long)]
    pub range: f64,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses a full argument list (program name first) and runs it.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Check(a) => cmd_check(&a),
        Command::Frames(a) => cmd_frames(&a),
        Command::Perturb(a) => cmd_perturb(&a),
        Command::Generate(a) => cmd_generate(&a),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load(path: &Path) -> Result<Vec<Entry>, CliError> {
    load_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    ck.into_model()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn structure_at(entries: &[Entry], index: usize) -> Result<&CrystalStructure, CliError> {
    entries
        .get(index)
        .map(|e| &e.structure)
        .ok_or_else(|| CliError::Usage(format!("record index {index} out of range for {} records", entries.len())))
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = a.cfg.resolve()?;
    let entries = load(&a.data)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("{}: no records", a.data.display())));
    }
    let parts = split(entries.len(), &cfg.split)?;
    if parts.train.is_empty() {
        return Err(CliError::Data("the training split is empty".into()));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&k| entries[k].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&parts.train), pick(&parts.val));

    fs::create_dir_all(&a.out)?;
    let ids = |idx: &[usize]| idx.iter().map(|&k| entries[k].record.id.clone()).collect::<Vec<_>>();
    let manifest = serde_json::json!({
        "train": ids(&parts.train),
        "val": ids(&parts.val),
        "test": ids(&parts.test),
    });
    fs::write(a.out.join(SPLIT_MANIFEST), serde_json::to_string_pretty(&manifest).expect("plain JSON"))?;

    let mut log = BufWriter::new(File::create(a.out.join(TRAIN_LOG))?);
    let outcome = train(&train_set, &val_set, &cfg.model, &cfg.train, Some(&mut log))?;
    log.flush()?;
    let steps = outcome.report.steps;
    Checkpoint::from_model(&outcome.model, steps).save(&a.out.join(FINAL_CHECKPOINT))?;
    if let Some(swa) = &outcome.swa_model {
        Checkpoint::from_model(swa, steps).save(&a.out.join(SWA_CHECKPOINT))?;
    }
    if let Some(last) = outcome.report.epochs.last() {
        eprintln!(
            "trained {} epochs, {steps} steps; train MAE {}{}",
            outcome.report.epochs.len(),
            last.train_mae,
            last.val_mae.map(|v| format!(", validation MAE {v}")).unwrap_or_default()
        );
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let expected = if a.cfg.given() { Some(a.cfg.resolve()?.model) } else { None };
    let model = load_model(&a.checkpoint)?;
    if let Some(expected) = expected {
        if let Some((key, want, found)) = first_mismatch(&expected, &model.config) {
            return Err(CliError::Data(format!(
                "checkpoint does not match the configuration: `{key}` is {found} in the checkpoint but {want} in the configuration"
            )));
        }
    }
    let entries = load(&a.data)?;
    let mut w = output(&a.out)?;
    writeln!(w, "{PREDICT_HEADER}")?;
    let opts = ForwardOptions::default();
    for e in &entries {
        writeln!(w, "{},{}", e.record.id, model.predict(&e.structure, &opts)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_check(a: &CheckArgs) -> Result<(), CliError> {
    let cfg = a.cfg.resolve()?;
    let suites = if a.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suites.iter().map(|s| s.parse()).collect::<Result<Vec<_>, _>>()?
    };
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => Model::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let structures: Vec<(String, CrystalStructure)> = match &a.data {
        Some(p) => load(p)?.into_iter().map(|e| (e.record.id, e.structure)).collect(),
        None => gen_synthetic(a.count, cfg.split.seed)?
            .into_iter()
            .map(|r| Ok((r.id.clone(), r.to_structure()?)))
            .collect::<dynframe::Result<_>>()?,
    };
    let results = run_suites(&model, &structures, &suites, cfg.train.seed, a.corrupt_frames)?;
    let mut w = output(&a.out)?;
    writeln!(w, "{REPORT_HEADER}")?;
    for r in &results {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| r.status == Status::Fail)
        .map(|r| {
            format!(
                "{} deviation {} exceeds {} (structure {})",
                r.suite.name(),
                r.max_deviation,
                r.suite.tolerance(),
                r.worst.as_deref().unwrap_or("?")
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violation(failed.join("; ")))
    }
}

pub fn cmd_frames(a: &FramesArgs) -> Result<(), CliError> {
    let entries = load(&a.data)?;
    let s = structure_at(&entries, a.index)?;
    let mut w = output(&a.out)?;
    writeln!(w, "{FRAMES_HEADER}")?;
    for path in &a.checkpoint {
        let model = load_model(path)?;
        let tag = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for rec in model.dump_trace(s, &ForwardOptions::default())? {
            let (kind, flags, axes) = match &rec.frame {
                Some(f) => (
                    f.kind.to_string(),
                    format!("{},{}", f.degenerate, f.fallback),
                    f.axes
                        .iter()
                        .flat_map(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>())
                        .collect::<Vec<_>>()
                        .join(","),
                ),
                None => ("none".to_string(), "false,false".to_string(), ",,,,,,,,".to_string()),
            };
            writeln!(w, "{tag},{},{},{},{kind},{flags},{},{axes}", rec.layer, rec.head, rec.atom, rec.sigma)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_direction(spec: &str, s: &CrystalStructure) -> Result<Vector3<f64>, CliError> {
    let v = match spec {
        "a" => s.lattice().vector(0),
        "b" => s.lattice().vector(1),
        "c" => s.lattice().vector(2),
        _ => {
            let parts: Vec<f64> = spec
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("direction `{spec}` is not a, b, c or x,y,z")))?;
            if parts.len() != 3 {
                return Err(CliError::Usage(format!("direction `{spec}` needs three components")));
            }
            Vector3::new(parts[0], parts[1], parts[2])
        }
    };
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(CliError::Usage(format!("direction `{spec}` has no length")));
    }
    Ok(v / n)
}

pub fn cmd_perturb(a: &PerturbArgs) -> Result<(), CliError> {
    if a.steps < 2 {
        return Err(CliError::Usage(format!("--steps must be at least 2, got {}", a.steps)));
    }
    if !(a.range >= 0.0 && a.range.is_finite()) {
        return Err(CliError::Usage(format!("--range must be a nonnegative number, got {}", a.range)));
    }
    let model = load_model(&a.checkpoint)?;
    let entries = load(&a.data)?;
    let s = structure_at(&entries, a.index)?;
    if a.atom >= s.len() {
        return Err(CliError::Usage(format!("atom index {} out of range for {} atoms", a.atom, s.len())));
    }
    let dir = parse_direction(&a.direction, s)?;
    let mut w = output(&a.out)?;
    writeln!(w, "{PERTURB_HEADER}")?;
    let opts = ForwardOptions::default();
    for k in 0..a.steps {
        let t = -a.range + 2.0 * a.range * k as f64 / (a.steps - 1) as f64;
        let moved = s.displaced(a.atom, &(dir * t))?;
        let y = model.predict(&moved, &opts)?;
        if !y.is_finite() {
            return Err(CliError::Numeric(format!("prediction at displacement {t} is {y}")));
        }
        writeln!(w, "{k},{t},{y}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    write_dataset(&a.out, &gen_synthetic(a.count, a.seed)?)?;
    Ok(())
}
