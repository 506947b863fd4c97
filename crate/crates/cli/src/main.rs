//! `moebert` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moebert::distill::LayerSet;
use moebert::moe::{AdaptStrategy, RoutingStrategy};
use moebert::pipeline::{self, RunConfig, STUDENT_CKPT};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "moebert", version, about = "Mixture-of-Experts adaptation and layer-wise distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense teacher (writes vocab.json, teacher.ckpt, teacher_metrics.jsonl).
    TrainTeacher(Common),
    /// Score FFN neurons of teacher.ckpt (writes importance.json).
    Importance(Common),
    /// Split the teacher's FFNs into experts (writes student_init.ckpt).
    Adapt(Common),
    /// Train the student with layer-wise distillation (writes student.ckpt, student_metrics.jsonl).
    Distill(Common),
    /// Accuracy of a checkpoint on the eval split (writes eval.json).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file name inside the output directory.
        #[arg(long, default_value = STUDENT_CKPT)]
        checkpoint: String,
    },
    /// Time teacher.ckpt against student.ckpt (writes bench.json).
    Bench(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    routing: Option<RoutingStrategy>,
    #[arg(long)]
    adaptation: Option<AdaptStrategy>,
    #[arg(long)]
    layer_set: Option<LayerSet>,
    #[arg(long)]
    lambda_distill: Option<f64>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    shared_dim: Option<usize>,
    #[arg(long)]
    expert_dim: Option<usize>,
}

impl Common {
    fn load(&self) -> moebert::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(r) = self.routing {
            cfg.moe.routing = r;
        }
        if let Some(a) = self.adaptation {
            cfg.moe.adaptation = a;
        }
        if let Some(l) = self.layer_set {
            cfg.distill.layer_set = l;
        }
        if let Some(l) = self.lambda_distill {
            cfg.distill.lambda_distill = l;
        }
        if let Some(n) = self.experts {
            cfg.moe.experts = n;
        }
        if let Some(s) = self.shared_dim {
            cfg.moe.shared_dim = s;
        }
        if self.expert_dim.is_some() {
            cfg.moe.expert_dim = self.expert_dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> moebert::Result<Value> {
    Ok(match command {
        Command::TrainTeacher(c) => {
            let records = pipeline::stage_train_teacher(&c.load()?)?;
            json!({ "stage": "train-teacher", "final": records.last() })
        }
        Command::Importance(c) => {
            let table = pipeline::stage_importance(&c.load()?)?;
            json!({ "stage": "importance", "layers": table.layers(), "digest": table.digest() })
        }
        Command::Adapt(c) => {
            let cfg = c.load()?;
            let student = pipeline::stage_adapt(&cfg)?;
            json!({ "stage": "adapt", "moe": student.config().moe })
        }
        Command::Distill(c) => {
            let records = pipeline::stage_distill(&c.load()?)?;
            json!({ "stage": "distill", "final": records.last() })
        }
        Command::Eval { common, checkpoint } => serde_json::to_value(pipeline::stage_eval(&common.load()?, &checkpoint)?)?,
        Command::Bench(c) => serde_json::to_value(pipeline::stage_bench(&c.load()?)?)?,
        Command::Pipeline(c) => serde_json::to_value(pipeline::run_pipeline(&c.load()?)?)?,
    })
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim().to_string(), 2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}
