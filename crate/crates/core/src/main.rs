use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::consistency::{train_consistency, ConsistencyGenerator};
use flowmap_distill::data::write_csv;
use flowmap_distill::distill::train_stage2;
use flowmap_distill::flowmap::train_stage1;
use flowmap_distill::metrics::{build_scaling_report, eval_draw, FlowMapEuler, Generator, TeacherEuler};
use flowmap_distill::nets::{Class, FlowMapNet};
use flowmap_distill::pipeline::{
    allocate_run_dir, emit_plot_data, run_ablation, run_pipeline_in, run_root, stage_plan, write_rows, AblationAxis,
};
use flowmap_distill::rng::RngStreams;
use flowmap_distill::teacher::{train_teacher, GuidedTeacher};
use flowmap_distill::{Error, Result};

#[derive(Parser)]
#[command(name = "flowmap", version, about = "Flow-map distillation on toy distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the seconds-scale preset instead of the reference run.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to a fresh directory under the run root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for fresh run directories; defaults to $FLOWMAP_RUN_ROOT, then ./runs.
    #[arg(long)]
    run_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow-matching teacher.
    Pretrain(Common),
    /// Stage 1: flow-map training from a teacher checkpoint.
    FlowmapTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Stage 2 on-policy distillation, or the consistency baseline.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Algo::Flowmap)]
        algo: Algo,
        #[arg(long)]
        teacher: PathBuf,
        /// Stage-1 checkpoint; required for the flow-map algorithm.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint into a CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, default_value_t = 4)]
        nfe: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Scaling report of a checkpoint over the configured budgets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        /// Comma-separated step budgets overriding the config.
        #[arg(long, value_delimiter = ',')]
        nfe: Vec<usize>,
    },
    /// Every stage, reports and verdicts in one run directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Print the stages and resolved config without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// One ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// w_t, conditioning, simulation or init.
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Tidy plot CSVs from a finished pipeline run.
    EmitPlots {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Flowmap,
    Consistency,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    /// Guided teacher ODE with Euler steps.
    Teacher,
    /// Flow map sampled with uniform jumps.
    Flowmap,
    /// Multistep consistency sampling.
    Consistency,
}

enum Outcome {
    Done,
    VerdictFailed,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None if self.tiny => ExperimentConfig::tiny(),
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    fn out_dir(&self, config: &ExperimentConfig, what: &str) -> Result<PathBuf> {
        match &self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?;
                Ok(dir.clone())
            }
            None => {
                let root = self.run_root.clone().unwrap_or_else(run_root);
                allocate_run_dir(&root, &format!("{}-{what}", config.name))
            }
        }
    }
}

fn generator<'a>(model: ModelKind, net: &'a FlowMapNet, config: &ExperimentConfig) -> Box<dyn Generator + 'a> {
    match model {
        ModelKind::Teacher => Box::new(TeacherEuler(GuidedTeacher {
            net,
            scale: config.stage1.guidance.scale,
        })),
        ModelKind::Flowmap => Box::new(FlowMapEuler(net)),
        ModelKind::Consistency => Box::new(ConsistencyGenerator(net)),
    }
}

fn done(dir: &Path) -> Result<Outcome> {
    println!("{}", dir.display());
    Ok(Outcome::Done)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Pretrain(common) => {
            let config = common.config()?;
            let dir = common.out_dir(&config, "pretrain")?;
            let (net, log) = train_teacher(&config.dataset, &config.net, &config.teacher, &RngStreams::new(config.seed))?;
            net.save(dir.join("teacher.ckpt"))?;
            write_rows(dir.join("teacher_log.csv"), &log)?;
            done(&dir)
        }
        Command::FlowmapTrain { common, teacher } => {
            let config = common.config()?;
            let teacher = FlowMapNet::load(teacher)?;
            let dir = common.out_dir(&config, "stage1")?;
            let (net, log) = train_stage1(&teacher, &config.dataset, &config.stage1, &RngStreams::new(config.seed))?;
            net.save(dir.join("stage1.ckpt"))?;
            write_rows(dir.join("stage1_log.csv"), &log)?;
            done(&dir)
        }
        Command::Distill {
            common,
            algo,
            teacher,
            student,
        } => {
            let config = common.config()?;
            let teacher = FlowMapNet::load(teacher)?;
            let streams = RngStreams::new(config.seed);
            match algo {
                Algo::Flowmap => {
                    let Some(student) = student else {
                        return Err(Error::Config("--student is required for --algo flowmap".into()));
                    };
                    let student = FlowMapNet::load(student)?;
                    let dir = common.out_dir(&config, "stage2")?;
                    let (net, fake, log) =
                        train_stage2(&student, &teacher, &config.dataset, &config.stage1, &config.stage2, &streams)?;
                    net.save(dir.join("student.ckpt"))?;
                    fake.save(dir.join("fake.ckpt"))?;
                    write_rows(dir.join("stage2_log.csv"), &log)?;
                    done(&dir)
                }
                Algo::Consistency => {
                    let dir = common.out_dir(&config, "consistency")?;
                    let (net, log) = train_consistency(&teacher, &config.dataset, &config.consistency, &streams)?;
                    net.save(dir.join("consistency.ckpt"))?;
                    write_rows(dir.join("consistency_log.csv"), &log)?;
                    done(&dir)
                }
            }
        }
        Command::Sample {
            common,
            checkpoint,
            model,
            nfe,
            n,
        } => {
            let config = common.config()?;
            let net = FlowMapNet::load(checkpoint)?;
            let eval = flowmap_distill::metrics::EvalConfig {
                n_samples: n,
                ..config.eval.clone()
            };
            let draw = eval_draw(&config.dataset, &eval, 0)?;
            let mut rng = RngStreams::new(config.seed).stream("sample");
            let (x, _) = generator(model, &net, &config).generate(&draw.noise, &draw.classes, nfe, &mut rng)?;
            let labels: Vec<usize> = draw
                .classes
                .iter()
                .map(|c| match c {
                    Class::Label(l) => *l,
                    Class::Null => 0,
                })
                .collect();
            let dir = common.out_dir(&config, "sample")?;
            let path = dir.join(format!("samples_nfe{nfe}.csv"));
            write_csv(&path, &x, &labels)?;
            println!("{}", path.display());
            Ok(Outcome::Done)
        }
        Command::Eval {
            common,
            checkpoint,
            model,
            nfe,
        } => {
            let mut config = common.config()?;
            if !nfe.is_empty() {
                config.eval.nfes = nfe;
                config.validate()?;
            }
            let net = FlowMapNet::load(checkpoint)?;
            let name = match model {
                ModelKind::Teacher => "teacher",
                ModelKind::Flowmap => "flowmap",
                ModelKind::Consistency => "consistency",
            };
            let report = build_scaling_report(name, &*generator(model, &net, &config), &config.dataset, &config.eval)?;
            let dir = common.out_dir(&config, "eval")?;
            report.write_csv(dir.join(format!("scaling_{name}.csv")))?;
            report.write_summary(dir.join(format!("summary_{name}.csv")))?;
            for row in &report.summary {
                println!("nfe {:>3}  sw {:.5} +- {:.5}", row.nfe, row.sw.mean, row.sw.se);
            }
            done(&dir)
        }
        Command::Pipeline { common, dry_run } => {
            let config = common.config()?;
            if dry_run {
                for line in stage_plan(&config) {
                    println!("{line}");
                }
                print!("{}", config.to_toml()?);
                return Ok(Outcome::Done);
            }
            let dir = common.out_dir(&config, "pipeline")?;
            let outcome = run_pipeline_in(&config, &dir)?;
            for v in &outcome.verdicts {
                println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.key, v.detail);
            }
            println!("{}", dir.display());
            Ok(if outcome.all_pass() {
                Outcome::Done
            } else {
                Outcome::VerdictFailed
            })
        }
        Command::Ablate { common, axis } => {
            let config = common.config()?;
            let dir = common.out_dir(&config, &format!("ablate-{}", axis.name()))?;
            for r in run_ablation(&config, axis, &dir)? {
                println!("{:<22} nfe {:>3}  sw {:.5} +- {:.5}", r.variant, r.nfe, r.sw_mean, r.sw_se);
            }
            done(&dir)
        }
        Command::EmitPlots { run } => {
            for path in emit_plot_data(&run)? {
                println!("{}", path.display());
            }
            Ok(Outcome::Done)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Invalid(_) | Error::IncompleteRun { .. } => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerdictFailed) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
