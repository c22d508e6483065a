use std::cell::OnceCell;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use slenderexit::model::checkpoint;
use slenderexit::pipeline::{
    read_slender_report, AblationMode, EvalReport, Pipeline, PipelineConfig, SeedData,
};

#[derive(Parser, Debug)]
#[command(name = "slenderexit", version, about = "Slenderize and early-exit a multi-exit encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML pipeline config; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ablation mode (full, two-stage, no-exit-calibration, no-pred, no-feat).
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the single-exit teacher on ground-truth labels.
    TrainTeacher,
    /// Distill the teacher into the multi-exit TA.
    DistillTa,
    /// Prune, factorize and recover the TA into the goal shape.
    Slenderize,
    /// Static, dynamic and accounting evaluation of a checkpoint.
    Eval {
        /// Checkpoint directory; defaults to the stage named by --stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// teacher, ta, or an ablation mode (defaults to --ablation, then full).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Every stage for every seed, then the across-seed summary.
    RunAll,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn build_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = &c.ablation {
        cfg.ablations = vec![m.parse()?];
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if c.deterministic {
        cfg.threads = 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_stage(dir: &Path, stage: &str, producer: &str) -> Result<()> {
    if !checkpoint::is_checkpoint(dir) {
        bail!("no {stage} checkpoint at {}; run `{producer}` first", dir.display());
    }
    Ok(())
}

fn fmt_accs(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")
}

fn print_eval(r: &EvalReport) {
    println!("{} seed {}: final {:.4}, mean over exits {:.4}", r.label, r.seed, r.final_accuracy, r.mean_exit_accuracy);
    println!("  per exit  {}", fmt_accs(&r.exit_accuracy));
    for (k, v) in &r.task_exit_accuracy {
        println!("  {k:<9} {}", fmt_accs(v));
    }
    println!(
        "  threshold {}: accuracy {:.4}, mean exit layer {:.3} (simple {:.3}, rest {:.3})",
        r.probe.threshold,
        r.probe.accuracy,
        r.probe.mean_exit_layer,
        r.probe.simple_mean_exit_layer,
        r.probe.rest_mean_exit_layer
    );
    println!(
        "  params {} ({:.2}x), static FLOPs {} ({:.2}x), dynamic FLOPs reduction {:.2}x",
        r.params.total, r.params_reduction, r.static_flops, r.static_flops_reduction, r.dynamic_flops_reduction
    );
}

fn stage_name(stage: Option<&str>, ablation: Option<&str>) -> Result<String> {
    let s = stage.or(ablation).unwrap_or("full");
    if s != "teacher" && s != "ta" {
        s.parse::<AblationMode>()?;
    }
    Ok(s.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    let p = Pipeline::new(cfg)?;
    let seeds = p.cfg.seeds.clone();
    let data = |seed: u64| -> Result<SeedData> { Ok(p.data(seed)?) };
    match cli.command {
        Command::ShowConfig => print!("{}", p.cfg.to_toml()?),
        Command::TrainTeacher => {
            for seed in seeds {
                let d = data(seed)?;
                let teacher = p.teacher(seed, &d)?;
                let r = p.eval("teacher", seed, &d, &teacher, &p.stage_dir(seed, "teacher"))?;
                print_eval(&r);
            }
        }
        Command::DistillTa => {
            for seed in seeds {
                require_stage(&p.stage_dir(seed, "teacher"), "teacher", "train-teacher")?;
                let d = data(seed)?;
                let teacher = p.teacher(seed, &d)?;
                let ta = p.ta(seed, &d, &teacher)?;
                print_eval(&p.eval("ta", seed, &d, &ta, &p.stage_dir(seed, "ta"))?);
            }
        }
        Command::Slenderize => {
            for seed in seeds {
                require_stage(&p.stage_dir(seed, "ta"), "TA", "distill-ta")?;
                let d = data(seed)?;
                let teacher = p.teacher(seed, &d)?;
                let ta = p.ta(seed, &d, &teacher)?;
                let targets = OnceCell::new();
                for &mode in &p.cfg.ablations {
                    p.slender(seed, mode, &d, &ta, &targets)?;
                    let dir = p.stage_dir(seed, mode.name());
                    let report = read_slender_report(&dir)?;
                    for it in &report.iterations {
                        println!(
                            "{mode} seed {seed} iteration {}: {} structures dropped, params {} -> {}",
                            it.iteration,
                            it.dropped.len(),
                            it.params_before,
                            it.params_after
                        );
                    }
                    println!("{mode} seed {seed}: checkpoint {}", dir.display());
                }
            }
        }
        Command::Eval { checkpoint: ckpt, stage } => {
            for seed in seeds {
                let d = data(seed)?;
                let (dir, label) = match &ckpt {
                    Some(c) => (c.clone(), c.file_name().map_or("checkpoint".into(), |n| n.to_string_lossy().into_owned())),
                    None => {
                        let s = stage_name(stage.as_deref(), cli.common.ablation.as_deref())?;
                        (p.stage_dir(seed, &s), s)
                    }
                };
                require_stage(&dir, &label, "run-all")?;
                let (model, _) = checkpoint::load(&dir)?;
                print_eval(&p.eval(&label, seed, &d, &model, &dir)?);
            }
        }
        Command::RunAll => {
            let summary = p.run_all()?;
            print!("{}", summary.to_text());
            println!("summary written to {}", p.cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
