//! `letkd`: data generation, teacher and student training, labeler fitting,
//! evaluation, probes, the α ablation, assignment export and self-checks.
//!
//! Exit status: 0 on success, 1 on usage or validation errors, 2 when a
//! numerical failure stops the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use letkd::checkpoint::{Checkpoint, TeacherLabelers};
use letkd::config::ExperimentConfig;
use letkd::container::write_atomic;
use letkd::data::{load_dataset, write_pattern_blobs, Dataset};
use letkd::export::{export_assignments, to_table};
use letkd::metrics::MetricsWriter;
use letkd::model::{KdSite, ModelSpec};
use letkd::train::{
    ablate_alpha, build_labelers, evaluate, linear_probe, train_student, train_teacher,
    TrainReport, Variant,
};
use letkd::{selftest, Error};

const CHECKPOINT: &str = "checkpoint";
const METRICS: &str = "metrics.csv";

#[derive(Parser, Debug)]
#[command(
    name = "letkd",
    version,
    about = "Knowledge distillation with KD layers"
)]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[io] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `[io] out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `[kd] variant`.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Site {
    Inter,
    Penult,
}

impl From<Site> for KdSite {
    fn from(s: Site) -> Self {
        match s {
            Site::Inter => KdSite::Intermediate,
            Site::Penult => KdSite::Penultimate,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic pattern-blobs dataset.
    GenData,
    /// Train the teacher with cross-entropy.
    TrainTeacher,
    /// Fit the teacher labelers (penultimate centers, LDA, sub-class table).
    GenLabels,
    /// Train a student under the configured variant.
    TrainStudent,
    /// Report top-1 accuracy of a checkpoint.
    Eval {
        /// Evaluate the teacher instead of the student.
        #[arg(long)]
        teacher: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Linear probe on pooled features before and after a KD layer.
    Probe {
        #[arg(long, value_enum, default_value = "inter")]
        site: Site,
    },
    /// Train letKD-2 students over α ∈ {0, 1}² at both sites.
    AblateAlpha {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Dump per-pixel teacher and student assignment IDs for a test batch.
    ExportAssignments {
        #[arg(long, value_enum, default_value = "penult")]
        site: Site,
        /// First test image of the batch.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Write the table here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Skip the student column.
        #[arg(long)]
        teacher_only: bool,
    },
    /// Run the oracle and gradient checks.
    Selftest,
}

enum Failure {
    Usage(String),
    /// A self-check exceeded its tolerance.
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.io.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.io.out = o.clone();
    }
    if let Some(v) = &cli.variant {
        cfg.kd.variant = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    Ok(load_dataset(
        &cfg.data_dir(),
        cfg.data.num_classes,
        cfg.input_shape(),
    )?)
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(
        &cfg.teacher_dir().join(CHECKPOINT),
        &cfg.teacher_spec()?,
    )?)
}

fn load_labelers(cfg: &ExperimentConfig) -> Result<TeacherLabelers, Failure> {
    Ok(TeacherLabelers::load(&cfg.labeler_dir())?)
}

fn load_student(cfg: &ExperimentConfig) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(
        &cfg.student_dir().join(CHECKPOINT),
        &cfg.student_spec()?,
    )?)
}

fn finish(dir: &Path, report: &TrainReport, what: &str) -> Outcome {
    report.checkpoint.save(&dir.join(CHECKPOINT))?;
    let top1 = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:?}"));
    println!(
        "{what}: train_top1 {} test_top1 {} -> {}",
        top1(report.train_top1),
        top1(report.test_top1),
        dir.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    if let Command::Selftest = cli.command {
        let checks = selftest::run_all(cli.seed.unwrap_or(0))?;
        for c in &checks {
            println!("{c}");
        }
        return if checks.iter().all(|c| c.passed) {
            Ok(())
        } else {
            Err(Failure::Check("selftest failed".into()))
        };
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Selftest => unreachable!("handled above"),
        Command::GenData => {
            let dir = cfg.data_dir();
            write_pattern_blobs(&cfg.blobs()?, cfg.io.data_seed, &dir)?;
            dataset(&cfg)?;
            println!("dataset -> {}", dir.display());
        }
        Command::TrainTeacher => {
            let ds = dataset(&cfg)?;
            let dir = cfg.teacher_dir();
            let mut metrics = MetricsWriter::create(&dir.join(METRICS))?;
            let report = train_teacher(
                &cfg.teacher_spec()?,
                &cfg.teacher_plan()?,
                &ds,
                Some(&mut metrics),
            )?;
            finish(&dir, &report, "teacher")?;
        }
        Command::GenLabels => {
            let ds = dataset(&cfg)?;
            let mut teacher = load_teacher(&cfg)?.network;
            let labelers = build_labelers(
                &mut teacher,
                &ds,
                &cfg.student_spec()?,
                &cfg.plan()?,
                cfg.io.seed,
            )?;
            labelers.save(&cfg.labeler_dir())?;
            println!("labelers -> {}", cfg.labeler_dir().display());
        }
        Command::TrainStudent => {
            let ds = dataset(&cfg)?;
            let plan = cfg.plan()?;
            let teacher = if plan.variant.needs_teacher() {
                Some(load_teacher(&cfg)?.network)
            } else {
                None
            };
            let labelers = if plan.variant.penultimate_kd() {
                Some(load_labelers(&cfg)?)
            } else {
                None
            };
            let dir = cfg.student_dir();
            let mut metrics = MetricsWriter::create(&dir.join(METRICS))?;
            let report = train_student(
                &cfg.student_spec()?,
                &plan,
                teacher.as_ref(),
                labelers.as_ref(),
                &ds,
                Some(&mut metrics),
            )?;
            finish(&dir, &report, plan.variant.name())?;
        }
        Command::Eval { teacher, split } => {
            let ds = dataset(&cfg)?;
            let mut ckpt = if *teacher {
                load_teacher(&cfg)?
            } else {
                load_student(&cfg)?
            };
            let (split, key) = match split {
                SplitArg::Train => (&ds.train, "train_top1"),
                SplitArg::Test => (&ds.test, "test_top1"),
            };
            let top1 = evaluate(&mut ckpt.network, split)?;
            let stored = ckpt.meta.get(key).map_or("n/a", String::as_str);
            println!("{key} {top1:?} (stored {stored})");
        }
        Command::Probe { site } => {
            let ds = dataset(&cfg)?;
            let mut net = load_student(&cfg)?.network;
            let site = KdSite::from(*site);
            let before = linear_probe(&mut net, site, &ds, false)?;
            let after = linear_probe(&mut net, site, &ds, true)?;
            println!("probe {site:?}: x {before:?} x_hat {after:?}");
        }
        Command::AblateAlpha { seeds } => {
            if seeds.is_empty() {
                return Err(Failure::Usage("--seeds needs at least one seed".into()));
            }
            let ds = dataset(&cfg)?;
            let teacher = load_teacher(&cfg)?.network;
            let labelers = load_labelers(&cfg)?;
            let mut plan = cfg.plan()?;
            plan.variant = Variant::LetKd2;
            let report =
                ablate_alpha(&cfg.student_spec()?, &plan, &teacher, &labelers, &ds, seeds)?;
            let table = report.to_table();
            let path = cfg.io.out.join("alpha_ablation.csv");
            fs::create_dir_all(&cfg.io.out).map_err(|e| Error::Io {
                path: cfg.io.out.display().to_string(),
                source: e,
            })?;
            write_atomic(&path, table.as_bytes())?;
            print!("{table}");
        }
        Command::ExportAssignments {
            site,
            start,
            batch,
            output,
            teacher_only,
        } => {
            let ds = dataset(&cfg)?;
            let end = start + batch;
            if *batch == 0 || end > ds.test.len() {
                return Err(Failure::Usage(format!(
                    "batch {start}..{end} is empty or exceeds the {} test images",
                    ds.test.len()
                )));
            }
            let mut teacher = load_teacher(&cfg)?.network;
            let labelers = load_labelers(&cfg)?;
            let mut student = if *teacher_only {
                None
            } else {
                Some(load_student(&cfg)?.network)
            };
            let images: Vec<usize> = (*start..end).collect();
            let (x, y) = ds.test.batch(&images, None);
            let spec: ModelSpec = cfg.student_spec()?;
            let rows = export_assignments(
                &mut teacher,
                &labelers,
                &spec,
                student.as_mut(),
                KdSite::from(*site),
                &x,
                &y,
                &images,
            )?;
            let table = to_table(&rows);
            match output {
                Some(p) => write_atomic(p, table.as_bytes())?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
