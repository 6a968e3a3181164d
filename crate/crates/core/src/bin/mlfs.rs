use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mlfs::checkpoint::{self, LoadedSupernet};
use mlfs::config::RunConfig;
use mlfs::experiments;
use mlfs::gradcheck::{self, GradCheckConfig, GradCheckReport};
use mlfs::metrics::{self, ConfigEvalRow, CurveRow, EvalRow};
use mlfs::model::{self, ArchConfig, ConfigSpace};
use mlfs::rng;
use mlfs::trainer::{self, AdamConfig, FullPlan, StudentPlan};

#[derive(Parser)]
#[command(name = "mlfs", version, about = "Multistage low-rank fine-tuning of elastic transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a base, then run the three adapter stages over the whole configuration space.
    TrainSupernet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch maxnet/minnet validation CSV.
        #[arg(long)]
        eval_out: Option<PathBuf>,
        /// Directory receiving the trained supernet.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Distil the composed maxnet of a trained supernet into a sliced student through one adapter pair.
    DistillStudent {
        #[arg(long)]
        config: PathBuf,
        /// Trained supernet directory; the teacher is its maxnet.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        depth: usize,
        #[command(flatten)]
        distill: DistillFlags,
        /// Full-parameter steps applied to the teacher before distillation.
        #[arg(long, default_value_t = 0)]
        teacher_steps: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Validation-loss curve CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory receiving the student with its merged adapter.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Materialize one configuration as a standalone model directory.
    SliceExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report loss and accuracy of configurations of a saved model.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Supplies the task; the data seed follows the config seed.
        #[arg(long)]
        config: PathBuf,
        /// Hidden widths to evaluate, paired in order with `--depth`. Defaults to every configuration.
        #[arg(long)]
        width: Vec<usize>,
        #[arg(long)]
        depth: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and every trainable parameter class.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Minnet losses with gradient scaling on and off, per seed.
    AblateGamma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation curves of a subnet trained from its slice and from random weights.
    AblateInit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct DistillFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    d_low: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.plan.seed = seed;
    }
    Ok(cfg)
}

fn write_or_print<T: serde::Serialize>(out: Option<&Path>, rows: &[T]) -> Result<()> {
    match out {
        Some(path) => metrics::write_csv(path, rows).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{}", String::from_utf8(metrics::to_csv(rows)?)?);
            Ok(())
        }
    }
}

fn last_stage(loaded: &LoadedSupernet) -> usize {
    loaded.net.adapters.num_stages().saturating_sub(1)
}

fn train_supernet(config: &Path, seed: Option<u64>, out: Option<&Path>, eval_out: Option<&Path>, dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let run = experiments::run_mlfs(&cfg)?;
    if let Some(dir) = dir {
        checkpoint::save_supernet(dir, &run.net, &cfg.space, Some(&run.bank))?;
    }
    let evals: Vec<EvalRow> = run.report.evals.iter().map(EvalRow::from).collect();
    if let Some(path) = eval_out {
        metrics::write_csv(path, &evals)?;
    }
    if let Some(last) = evals.iter().rev().find(|e| e.config == cfg.space.minnet().to_string()) {
        eprintln!("minnet {} val loss {:.4} accuracy {:.3}", last.config, last.loss, last.accuracy);
    }
    match out {
        Some(path) => metrics::write_csv(path, &metrics::step_rows(&run.report.steps))?,
        None => eprintln!("{} steps (pass --out to keep per-step metrics)", run.report.steps.len()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill_student(
    config: &Path,
    dir: &Path,
    width: usize,
    depth: usize,
    flags: &DistillFlags,
    teacher_steps: usize,
    steps: usize,
    seed: Option<u64>,
    out: Option<&Path>,
    save: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    let d = &mut cfg.plan.distill;
    d.alpha = flags.alpha.unwrap_or(d.alpha);
    d.temperature = flags.temperature.unwrap_or(d.temperature);
    if let Some(beta) = flags.beta {
        d.betas = vec![beta];
    }
    d.validate()?;
    let loaded = checkpoint::load_supernet(dir)?;
    let student = loaded.space.find(width, depth)?;
    let plan = StudentPlan {
        steps,
        batch: cfg.plan.batch,
        optimizer: cfg.plan.optimizer.clone(),
        seed: rng::derive(cfg.plan.seed, 30),
        rank: cfg.rank,
        d_low: flags.d_low.unwrap_or(cfg.plan.d_low),
        eval_every: (steps / 10).max(1),
    };
    let data = experiments::task_data(&cfg)?;
    let teacher_plan = FullPlan {
        steps: teacher_steps,
        batch: cfg.plan.batch,
        optimizer: AdamConfig {
            lr: experiments::PRETRAIN_LR,
            ..AdamConfig::default()
        },
        seed: rng::derive(cfg.plan.seed, 31),
        eval_every: teacher_steps.max(1),
    };
    let teacher = experiments::finetuned_teacher(&loaded.net, &loaded.space, &data, &teacher_plan)?;
    let base = experiments::student_base(&loaded.net, &loaded.space, &student)?;
    let alpha = cfg.plan.distill.alpha;
    let run = experiments::student_runs(&teacher, &base, &data, &cfg.plan.distill, &[alpha], &plan)?
        .pop()
        .context("no student run")?;
    if let Some(save) = save {
        let space = ConfigSpace::new(vec![student.width()], vec![student.layers])?;
        let merged = model::export(&run.student, &space, &student, 0)?;
        checkpoint::save_supernet(save, &merged, &space, None)?;
    }
    let rows: Vec<CurveRow> = run
        .curves
        .val
        .iter()
        .map(|&(step, val_loss)| CurveRow {
            run: format!("alpha={alpha}"),
            seed: cfg.plan.seed,
            step,
            val_loss,
        })
        .collect();
    write_or_print(out, &rows)
}

fn slice_export(dir: &Path, width: usize, depth: usize, out: &Path) -> Result<()> {
    let loaded = checkpoint::load_supernet(dir)?;
    let c = loaded.space.find(width, depth)?;
    let exported = model::export(&loaded.net, &loaded.space, &c, last_stage(&loaded))?;
    let space = ConfigSpace::new(vec![c.width()], vec![c.layers])?;
    checkpoint::save_supernet(out, &exported, &space, None)?;
    eprintln!("exported {c} to {}", out.display());
    Ok(())
}

fn eval(dir: &Path, config: &Path, widths: &[usize], depths: &[usize], split: Split, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    if widths.len() != depths.len() {
        bail!("--width was given {} times but --depth {} times", widths.len(), depths.len());
    }
    let cfg = load_config(config, seed)?;
    let loaded = checkpoint::load_supernet(dir)?;
    if loaded.net.dims != cfg.dims {
        bail!("checkpoint vocabulary/sequence/task does not match {}", config.display());
    }
    let configs: Vec<ArchConfig> = if widths.is_empty() {
        loaded.space.configs()
    } else {
        widths.iter().zip(depths).map(|(&w, &l)| loaded.space.find(w, l)).collect::<mlfs::Result<_>>()?
    };
    let data = experiments::task_data(&cfg)?;
    let examples = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    let mut rows = Vec::new();
    for c in &configs {
        let r = trainer::evaluate(&loaded.net, c, last_stage(&loaded), examples, 256)?;
        rows.push(ConfigEvalRow::new(c, r.loss, r.accuracy));
    }
    write_or_print(out, &rows)
}

fn report(reports: &[GradCheckReport]) -> bool {
    let mut ok = true;
    for r in reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<40} max rel err {:.3e} over {} elements", r.name, r.max_rel_error(), r.checks.len());
        ok &= r.passed();
    }
    ok
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let cfg = GradCheckConfig::default();
    let ops = gradcheck::op_suite(seed, &cfg)?;
    let params = experiments::model_gradcheck(seed, &cfg)?;
    let ok = report(&ops) & report(&params);
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn ablate_gamma(config: &Path, seeds: u64, gamma: Option<f64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config, None)?;
    if let Some(gamma) = gamma {
        cfg.plan.gamma = gamma;
    }
    let first = cfg.plan.seed;
    let seeds: Vec<u64> = (first..first + seeds).collect();
    let rows = experiments::ablate_gamma(&cfg, &seeds)?;
    write_or_print(out, &rows)
}

fn ablate_init(config: &Path, width: usize, depth: usize, steps: usize, seeds: u64, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, None)?;
    let c = cfg.space.find(width, depth)?;
    let mut rows = Vec::new();
    for seed in cfg.plan.seed..cfg.plan.seed + seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.plan.seed = seed;
        let run = experiments::run_mlfs(&run_cfg)?;
        let plan = experiments::init_plan(&run_cfg, steps, rng::derive(seed, 40));
        let curves = experiments::ablate_init(&run, &cfg.space, &c, &plan)?;
        for (name, curve) in [("sliced", &curves.sliced), ("random", &curves.random)] {
            rows.extend(curve.val.iter().map(|&(step, val_loss)| CurveRow {
                run: name.to_string(),
                seed,
                step,
                val_loss,
            }));
        }
    }
    write_or_print(out, &rows)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSupernet {
            config,
            seed,
            out,
            eval_out,
            checkpoint,
        } => train_supernet(&config, seed, out.as_deref(), eval_out.as_deref(), checkpoint.as_deref()),
        Command::DistillStudent {
            config,
            checkpoint,
            width,
            depth,
            distill,
            teacher_steps,
            steps,
            seed,
            out,
            save,
        } => distill_student(&config, &checkpoint, width, depth, &distill, teacher_steps, steps, seed, out.as_deref(), save.as_deref()),
        Command::SliceExport { checkpoint, width, depth, out } => slice_export(&checkpoint, width, depth, &out),
        Command::Eval {
            checkpoint,
            config,
            width,
            depth,
            split,
            seed,
            out,
        } => eval(&checkpoint, &config, &width, &depth, split, seed, out.as_deref()),
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::AblateGamma { config, seeds, gamma, out } => ablate_gamma(&config, seeds, gamma, out.as_deref()),
        Command::AblateInit {
            config,
            width,
            depth,
            steps,
            seeds,
            out,
        } => ablate_init(&config, width, depth, steps, seeds, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
