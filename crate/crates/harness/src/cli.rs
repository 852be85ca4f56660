//! The `tofe` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tofe_core::infer::InferenceMode;
use tofe_core::train::{train_backbone, train_tofe};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::{self, Split};
use crate::error::{HarnessError, Result};
use crate::eval;
use crate::fsutil::write_atomic;
use crate::report::RunReport;

#[derive(Debug, Parser)]
#[command(name = "tofe", version, about = "Token freezing and reusing for vision transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file to append to; defaults to reports.jsonl beside the output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Instance,
    Batch,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic shapes dataset into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the plain ViT backbone.
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train selectors and approximators on top of a pretrained backbone.
    TrainTofe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained backbone checkpoint; the teacher is a frozen copy.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        target_gflops: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, keep ratios, FLOPs and reuse statistics on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "instance")]
        mode: Mode,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Analytic FLOPs table and indicative wall-clock per image.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        forwards: usize,
    },
    /// Per-instance masks as CSV and the token usage map as CSV and PGM.
    ExportMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-to-block token cosine similarity as an L x L CSV.
    DiagSimilarity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A checkpoint whose model must agree with an explicit `--config`.
fn load_checkpoint(path: &Path, common: &Common, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if common.config.is_some() {
        ck.check_config(&cfg.model)?;
    }
    Ok(ck)
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn finish(mut report: RunReport, common: &Common, default_dir: &Path, start: Instant) -> Result<()> {
    if report.wall_clock.total_ms == 0.0 {
        report.wall_clock.total_ms = start.elapsed().as_secs_f64() * 1e3;
        report.wall_clock.note = "indicative only".into();
    }
    let path = common.report.clone().unwrap_or_else(|| default_dir.join("reports.jsonl"));
    report.append_to(&path)?;
    println!("{}", report.to_line());
    Ok(())
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn jsonl<T: serde::Serialize>(records: &[T]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

fn dispatch(cmd: Cmd) -> Result<()> {
    let start = Instant::now();
    match cmd {
        Cmd::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let (train, ev) = dataset::write_dataset(&cfg.data, &out)?;
            let mut r = RunReport::new("gen-data", cfg.data.seed);
            r.samples = train.len() + ev.len();
            r.details = serde_json::json!({ "spec": cfg.data, "train": train.len(), "eval": ev.len() });
            r.artifacts = ["train.tofd", "eval.tofd", "labels.csv", "spec.json"].map(String::from).to_vec();
            finish(r, &common, &out, start)
        }
        Cmd::TrainBackbone { common, data, out } => {
            let cfg = load_config(&common)?;
            let ds = dataset::open(&data, Split::Train)?;
            ds.check(&cfg.model)?;
            let (bb, log) = train_backbone(&ds.samples, &cfg.model, &cfg.backbone_train(), |r| {
                eprintln!(
                    "epoch {} step {} loss {:.4} train acc {:.2}% lr {:.2e}",
                    r.epoch, r.step, r.loss, r.train_accuracy, r.lr
                );
            })?;
            let ck = Checkpoint::backbone_only(cfg.model, bb, cfg.seed);
            ck.save(&out)?;
            write_atomic(&log_path(&out), jsonl(&log).as_bytes())?;
            let mut r = RunReport::new("train-backbone", cfg.seed);
            r.samples = ds.len();
            r.details = serde_json::json!({ "final_epoch": log.last() });
            r.artifacts = vec![file_name(&out), file_name(&log_path(&out))];
            finish(r, &common, &dir_of(&out), start)
        }
        Cmd::TrainTofe {
            common,
            data,
            backbone,
            target_gflops,
            out,
        } => {
            let backbone = backbone.ok_or_else(|| {
                HarnessError::Config(
                    "train-tofe needs --backbone <checkpoint>: the teacher is a frozen copy of a pretrained backbone; run train-backbone first".into(),
                )
            })?;
            let mut cfg = load_config(&common)?;
            let teacher = load_checkpoint(&backbone, &common, &cfg)?;
            if common.config.is_none() {
                cfg.model = teacher.meta.model;
                cfg.data.image_size = cfg.model.image_size;
            }
            if target_gflops.is_some() {
                cfg.target_gflops = target_gflops;
            }
            cfg.validate()?;
            let plan = cfg.plan()?;
            let ds = dataset::open(&data, Split::Train)?;
            ds.check(&cfg.model)?;
            let tc = cfg.tofe_train();
            let trained = train_tofe(&teacher.backbone, &ds.samples, &cfg.model, &plan, &tc, &cfg.weights, |r| {
                eprintln!(
                    "epoch {} cls {:.4} apr {:.4} flops {:.4} gflops {:.6} (target {:.6}) keep {:?} acc {:.2}%",
                    r.epoch,
                    r.cls_loss,
                    r.apr_loss,
                    r.flops_loss,
                    r.mean_gflops,
                    r.target_gflops,
                    r.keep_counts.iter().map(|k| (k * 10.0).round() / 10.0).collect::<Vec<_>>(),
                    r.train_accuracy
                );
            })?;
            let ck = Checkpoint {
                meta: CheckpointMeta {
                    model: cfg.model,
                    plan: Some(plan),
                    avg_counts: Some(trained.avg_counts),
                    target_flops: Some(tc.target_flops),
                    seed: cfg.seed,
                },
                backbone: trained.backbone,
                tofe: Some(trained.tofe),
            };
            ck.save(&out)?;
            write_atomic(&log_path(&out), jsonl(&trained.log).as_bytes())?;
            let mut r = RunReport::new("train-tofe", cfg.seed);
            r.samples = ds.len();
            r.details = serde_json::json!({
                "final_epoch": trained.log.last(),
                "keep_counts": ck.keep_counts(),
                "target_gflops": tc.target_flops / 1e9,
            });
            r.artifacts = vec![file_name(&out), file_name(&log_path(&out))];
            finish(r, &common, &dir_of(&out), start)
        }
        Cmd::Eval {
            common,
            data,
            checkpoint,
            mode,
            batch_size,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint, &common, &cfg)?;
            let mode = match mode {
                Mode::Instance => InferenceMode::InstanceAdaptive,
                Mode::Batch => InferenceMode::BatchAdaptive,
            };
            if mode == InferenceMode::BatchAdaptive && ck.keep_counts().is_none() {
                return Err(HarnessError::Config(
                    "--mode batch needs average keep counts recorded by train-tofe; this checkpoint has none".into(),
                ));
            }
            let ds = dataset::open(&data, Split::Eval)?;
            let r = eval::evaluate(&ck, &ds, mode, batch_size.unwrap_or(cfg.eval_batch_size))?;
            finish(r, &common, &dir_of(&checkpoint), start)
        }
        Cmd::Bench {
            common,
            data,
            checkpoint,
            forwards,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint, &common, &cfg)?;
            let ds = dataset::open(&data, Split::Eval)?;
            let r = eval::bench(&ck, &ds, forwards)?;
            finish(r, &common, &dir_of(&checkpoint), start)
        }
        Cmd::ExportMasks {
            common,
            data,
            checkpoint,
            count,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint, &common, &cfg)?;
            let ds = dataset::open(&data, Split::Eval)?.head(count);
            ds.check(&ck.meta.model)?;
            let files = eval::export_masks(&ck, &ds.samples, &out)?;
            let mut r = RunReport::new("export-masks", ck.meta.seed);
            r.samples = ds.len();
            r.details = serde_json::json!({ "grid": ck.meta.model.grid() });
            r.artifacts = files.iter().map(|p| file_name(p)).collect();
            finish(r, &common, &out, start)
        }
        Cmd::DiagSimilarity {
            common,
            data,
            checkpoint,
            samples,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&checkpoint, &common, &cfg)?;
            let ds = dataset::open(&data, Split::Eval)?.head(samples);
            ds.check(&ck.meta.model)?;
            let m = eval::similarity_matrix(&ck, &ds.samples)?;
            write_atomic(&out, eval::matrix_csv(&m).as_bytes())?;
            let (near, far) = eval::band_means(&m, 1);
            let mut r = RunReport::new("diag-similarity", ck.meta.seed);
            r.samples = ds.len();
            r.details = serde_json::json!({ "adjacent_mean": near, "distant_mean": far });
            r.artifacts = vec![file_name(&out)];
            finish(r, &common, &dir_of(&out), start)
        }
    }
}
