//! End-to-end runs: pretrain, Stage 1, Stage 2, the consistency baseline,
//! scaling reports, property verdicts, ablations and plot data.
//!
//! A run directory is created once and never reused. Everything in it is a
//! function of the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::consistency::{
    consistency_backward_simulate, train_consistency, trajectory_drift, ConsistencyConfig, ConsistencyGenerator,
    DriftRow,
};
use crate::data::ToyDistribution;
use crate::distill::{backward_simulate_at, dmd_loss, teacher_score, train_stage2, FieldScore, Stage2LogRow};
use crate::error::{io_err, Error, Result};
use crate::flowmap::{composition_defect, train_stage1, LossWeight, Stage1Config, Stage1LogRow};
use crate::metrics::{build_scaling_report, EvalConfig, FlowMapEuler, Generator, ScalingReport, TeacherEuler};
use crate::nets::{Class, FlowMapNet, TimeConditioning};
use crate::rng::{normal_tensor, RngStreams};
use crate::samplers::make_uniform_schedule;
use crate::teacher::{train_teacher, GuidedTeacher, TeacherLogRow};
use crate::tensor::{Tape, Tensor};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "FLOWMAP_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `root/<name>-NNN` with the first unused index.
pub fn allocate_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for index in 1.. {
        let dir = root.join(format!("{name}-{index:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!("unbounded index range")
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Numeric { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// The stages a pipeline run executes, for `--dry-run`.
pub fn stage_plan(config: &ExperimentConfig) -> Vec<String> {
    let mut plan = vec![
        format!("pretrain: {} steps, batch {}", config.teacher.steps, config.teacher.batch),
        format!(
            "flowmap-train: {} steps, batch {}, lr {}",
            config.stage1.steps, config.stage1.batch, config.stage1.optim.lr
        ),
        format!(
            "distill: {} steps, s_max {}, lambda_fm {}, lambda_dmd {}",
            config.stage2.steps, config.stage2.s_max, config.stage2.lambda_fm, config.stage2.lambda_dmd
        ),
        format!(
            "distill --algo consistency: {} init + {} simulation steps, schedule {}",
            config.consistency.init_steps, config.consistency.sim_steps, config.consistency.sim_schedule
        ),
    ];
    if config.checks.conditioning {
        plan.push(format!("flowmap-train (zero-init conditioning): {} steps", config.stage1.steps));
    }
    if config.checks.w_t_seeds > 0 {
        plan.push(format!(
            "flowmap-train (uniform w(t)): {} seeds; beta w(t): {} extra seeds",
            config.checks.w_t_seeds,
            config.checks.w_t_seeds - 1
        ));
    }
    plan.push(format!(
        "eval: {} samples x {} seeds at nfe {:?} for teacher, stage1, student, consistency",
        config.eval.n_samples, config.eval.seeds, config.eval.nfes
    ));
    plan.push(format!("drift: {} samples at steps {:?}", config.checks.drift_samples, config.checks.drift_steps));
    plan
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub key: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(key: &str, pass: bool, detail: String) -> Self {
        Self {
            key: key.to_string(),
            pass,
            detail,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub verdicts: Vec<Verdict>,
    pub reports: Vec<ScalingReport>,
}

impl PipelineOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdict(&self, key: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.key == key)
    }

    pub fn report(&self, model: &str) -> Option<&ScalingReport> {
        self.reports.iter().find(|r| r.model == model)
    }
}

fn sw_at(report: &ScalingReport, nfe: usize) -> Result<f64> {
    report
        .sw(nfe)
        .ok_or_else(|| Error::Config(format!("{} was not evaluated at nfe {nfe}", report.model)))
}

/// Evaluation budgets with the ones the verdicts read.
fn eval_budgets(config: &ExperimentConfig) -> EvalConfig {
    let mut nfes = config.eval.nfes.clone();
    nfes.extend([2, 4, 32]);
    nfes.sort_unstable();
    nfes.dedup();
    EvalConfig {
        nfes,
        ..config.eval.clone()
    }
}

fn teacher_generator<'a>(teacher: &'a FlowMapNet, config: &ExperimentConfig) -> TeacherEuler<'a> {
    TeacherEuler(GuidedTeacher {
        net: teacher,
        scale: config.stage1.guidance.scale,
    })
}

/// Runs every stage into `dir` (created here; must not exist).
pub fn run_pipeline(config: &ExperimentConfig, dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    fs::create_dir(dir).map_err(io_err(dir))?;
    run_pipeline_in(config, dir)
}

/// [`run_pipeline`] into an existing, empty directory.
pub fn run_pipeline_in(config: &ExperimentConfig, dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    if fs::read_dir(dir).map_err(io_err(dir))?.next().is_some() {
        return Err(Error::Config(format!("run directory {} is not empty", dir.display())));
    }
    config.save(dir.join("config.toml"))?;
    let dist = &config.dataset;
    let streams = RngStreams::new(config.seed);

    let (teacher, teacher_log) = stage("pretrain", train_teacher(dist, &config.net, &config.teacher, &streams))?;
    teacher.save(dir.join("teacher.ckpt"))?;
    write_rows(dir.join("teacher_log.csv"), &teacher_log)?;

    let (stage1, stage1_log) = stage("flowmap-train", train_stage1(&teacher, dist, &config.stage1, &streams))?;
    stage1.save(dir.join("stage1.ckpt"))?;
    write_rows(dir.join("stage1_log.csv"), &stage1_log)?;

    let (student, fake, stage2_log) = stage(
        "distill",
        train_stage2(&stage1, &teacher, dist, &config.stage1, &config.stage2, &streams),
    )?;
    student.save(dir.join("student.ckpt"))?;
    fake.save(dir.join("fake.ckpt"))?;
    write_rows(dir.join("stage2_log.csv"), &stage2_log)?;

    let (cm, cm_log) = stage("consistency", train_consistency(&teacher, dist, &config.consistency, &streams))?;
    cm.save(dir.join("consistency.ckpt"))?;
    write_rows(dir.join("consistency_log.csv"), &cm_log)?;

    let eval = eval_budgets(config);
    let mut teacher_eval = eval.clone();
    teacher_eval.nfes.push(config.checks.teacher_reference_nfe);
    teacher_eval.nfes.sort_unstable();
    teacher_eval.nfes.dedup();
    let reports = stage(
        "eval",
        (|| {
            Ok(vec![
                build_scaling_report("teacher", &teacher_generator(&teacher, config), dist, &teacher_eval)?,
                build_scaling_report("stage1", &FlowMapEuler(&stage1), dist, &eval)?,
                build_scaling_report("student", &FlowMapEuler(&student), dist, &eval)?,
                build_scaling_report("consistency", &ConsistencyGenerator(&cm), dist, &eval)?,
            ])
        })(),
    )?;
    for r in &reports {
        r.write_csv(dir.join(format!("scaling_{}.csv", r.model)))?;
        r.write_summary(dir.join(format!("summary_{}.csv", r.model)))?;
    }

    let drift = stage("drift", drift_rows(config, &teacher, &student, &cm))?;
    write_rows(dir.join("drift.csv"), &drift)?;

    let mut verdicts = Vec::new();
    let init = FlowMapNet::from_teacher(&teacher, config.stage1.conditioning)?;
    let n = config.checks.composition_triples;
    let before = composition_defect(&init, dist, n, &streams)?;
    let after = composition_defect(&stage1, dist, n, &streams)?;
    verdicts.push(Verdict::new(
        "composition",
        after * 5.0 <= before,
        format!("defect {before:.6} -> {after:.6} ({:.3}x, need 5x)", before / after),
    ));

    let [teacher_r, stage1_r, student_r, cm_r] = [&reports[0], &reports[1], &reports[2], &reports[3]];
    let (s1_2, t_2, t_ref) = (
        sw_at(stage1_r, 2)?,
        sw_at(teacher_r, 2)?,
        sw_at(teacher_r, config.checks.teacher_reference_nfe)?,
    );
    verdicts.push(Verdict::new(
        "few_step_gain",
        s1_2 < t_2 && s1_2 < 2.0 * t_ref,
        format!(
            "stage1 sw@2 {s1_2:.6}, teacher sw@2 {t_2:.6}, 2x teacher sw@{} {:.6}; teacher sw@2 below that bound: {}",
            config.checks.teacher_reference_nfe,
            2.0 * t_ref,
            t_2 < 2.0 * t_ref
        ),
    ));

    let (st_4, st_32, s1_4) = (sw_at(student_r, 4)?, sw_at(student_r, 32)?, sw_at(stage1_r, 4)?);
    let scaling_ok = st_32 <= st_4 * 1.10;
    let improves = st_4 <= s1_4;
    verdicts.push(Verdict::new(
        "any_step_scaling",
        scaling_ok && improves,
        format!(
            "student sw@4 {st_4:.6}, sw@32 {st_32:.6} (<= 1.1x: {scaling_ok}); stage1 sw@4 {s1_4:.6} (student <= stage1: {improves})"
        ),
    ));

    let (cm_4, cm_32) = (sw_at(cm_r, 4)?, sw_at(cm_r, 32)?);
    let degrades = cm_32 > cm_4 * 1.05;
    verdicts.push(Verdict::new(
        "consistency_degradation",
        degrades && scaling_ok && improves,
        format!("consistency sw@4 {cm_4:.6}, sw@32 {cm_32:.6} (> 1.05x: {degrades}); any-step scaling holds: {}", scaling_ok && improves),
    ));

    verdicts.push(stage("cost", cost_verdict(config, &teacher, &student, &cm, &fake))?);

    if config.checks.conditioning {
        let zero_config = Stage1Config {
            conditioning: TimeConditioning::ZeroInit,
            ..config.stage1.clone()
        };
        let (_, zero_log) = stage("flowmap-train", train_stage1(&teacher, dist, &zero_config, &streams))?;
        write_rows(dir.join("stage1_zero_init_log.csv"), &zero_log)?;
        let interp = stage1_log.last().map(|r| r.emb_norm_ratio).unwrap_or(f64::NAN);
        let zero = zero_log.last().map(|r| r.emb_norm_ratio).unwrap_or(f64::NAN);
        verdicts.push(Verdict::new(
            "conditioning",
            zero >= 1.5 * interp && (0.5..=2.0).contains(&interp),
            format!("emb-norm ratio zero-init {zero:.6}, interpolated {interp:.6}"),
        ));
    }

    if config.checks.w_t_seeds > 0 {
        let (beta, uniform) = stage("w_t", w_t_check(config, &teacher, &stage1))?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (b, u) = (mean(&beta), mean(&uniform));
        write_rows(
            dir.join("w_t_check.csv"),
            &beta
                .iter()
                .enumerate()
                .map(|(i, v)| ("beta", i, *v))
                .chain(uniform.iter().enumerate().map(|(i, v)| ("uniform", i, *v)))
                .collect::<Vec<_>>(),
        )?;
        verdicts.push(Verdict::new(
            "w_t",
            b <= u,
            format!("sw@32 beta {b:.6}, uniform {u:.6} over {} seeds", beta.len()),
        ));
    }

    verdicts.push(drift_verdict(&drift));

    let text = serde_json::to_string_pretty(&verdicts).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("verdicts.json"), text + "\n").map_err(io_err(dir.join("verdicts.json")))?;
    Ok(PipelineOutcome {
        dir: dir.to_path_buf(),
        verdicts,
        reports,
    })
}

fn drift_rows(
    config: &ExperimentConfig,
    teacher: &FlowMapNet,
    student: &FlowMapNet,
    cm: &FlowMapNet,
) -> Result<Vec<DriftRow>> {
    let streams = RngStreams::new(config.seed);
    let n = config.checks.drift_samples;
    let z = normal_tensor(&mut streams.stream("drift.noise"), &[n, config.dataset.dim()]);
    let classes: Vec<Class> = config
        .dataset
        .sample_labels(n, &mut streams.stream("drift.labels"))
        .into_iter()
        .map(Class::Label)
        .collect();
    let mut rows = Vec::new();
    for &steps in &config.checks.drift_steps {
        let mut rng = streams.indexed("drift.renoise", steps as u64);
        rows.extend(trajectory_drift(
            teacher,
            config.stage1.guidance.scale,
            student,
            cm,
            &z,
            &classes,
            steps,
            config.checks.drift_substeps,
            &mut rng,
        )?);
    }
    Ok(rows)
}

/// Final-state deviation from the teacher ODE: grows with the step count for
/// the consistency sampler, stays bounded for the flow map.
fn drift_verdict(rows: &[DriftRow]) -> Verdict {
    let finals = |name: &str| -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for r in rows.iter().filter(|r| r.sampler == name) {
            match out.last_mut() {
                Some(last) if last.0 == r.n_steps => last.1 = r.deviation,
                _ => out.push((r.n_steps, r.deviation)),
            }
        }
        out
    };
    let (fm, cm) = (finals("flowmap"), finals("consistency"));
    let (Some(cm_first), Some(cm_last)) = (cm.first(), cm.last()) else {
        return Verdict::new("drift", false, "no drift rows".into());
    };
    let grows = cm_last.1 > cm_first.1;
    let fm_max = fm.iter().map(|r| r.1).fold(0.0, f64::max);
    let bounded = fm_max < cm_last.1;
    Verdict::new(
        "drift",
        grows && bounded,
        format!(
            "consistency final deviation {:.6} at {} steps -> {:.6} at {} steps; flow-map max {:.6}",
            cm_first.1, cm_first.0, cm_last.1, cm_last.0, fm_max
        ),
    )
}

/// Exact network-call counts of one generator step.
fn cost_verdict(
    config: &ExperimentConfig,
    teacher: &FlowMapNet,
    student: &FlowMapNet,
    cm: &FlowMapNet,
    fake: &FlowMapNet,
) -> Result<Verdict> {
    let dim = config.dataset.dim();
    let z = Tensor::zeros(&[1, dim]);
    let classes = [Class::Label(0)];
    let mut flowmap_ok = true;
    let mut max_calls = 0;
    for s in 1..=config.stage2.s_max {
        for k in 1..=s {
            student.reset_calls();
            let trace = backward_simulate_at(&mut Tape::new(), student, &z, &classes, s, k)?;
            let expected = 3 - usize::from(k == s) - usize::from(k == 1);
            flowmap_ok &= student.calls() == expected && trace.calls() == expected;
            max_calls = max_calls.max(student.calls());
        }
    }
    let flowmap_ok = flowmap_ok && max_calls == 3;
    teacher.reset_calls();
    fake.reset_calls();
    let real = teacher_score(teacher, config.stage2.real_guidance);
    let fake_score = FieldScore(fake);
    let mut rng = RngStreams::new(config.seed).stream("cost.renoise");
    dmd_loss(
        &mut Tape::new(),
        &z,
        &classes,
        &real,
        &fake_score,
        &mut rng,
        config.stage2.renoise,
        config.stage2.dmd_form,
    )?;
    let score_calls = teacher.calls() + fake.calls();
    let expected_score = if config.stage2.real_guidance == 1.0 { 2 } else { 3 };
    let mut cm_ok = true;
    let mut rng = RngStreams::new(config.seed).stream("cost.consistency");
    for n in 1..=config.stage2.s_max {
        cm.reset_calls();
        consistency_backward_simulate(&mut Tape::new(), cm, &z, &classes, &make_uniform_schedule(n)?, &mut rng, 1)?;
        cm_ok &= cm.calls() == n;
    }
    Ok(Verdict::new(
        "constant_cost",
        flowmap_ok && cm_ok && score_calls == expected_score,
        format!(
            "flow-map rollout calls 3 - [k=s] - [k=1] for every s <= {} (max {max_calls}); score calls {score_calls}; consistency calls equal schedule length: {cm_ok}",
            config.stage2.s_max
        ),
    ))
}

/// SW at 32 NFE of Stage-1 students trained with Beta(2, 1.5) and uniform
/// loss weights, one entry per training seed. Seed 0 of the Beta arm reuses
/// the main Stage-1 net.
fn w_t_check(config: &ExperimentConfig, teacher: &FlowMapNet, main: &FlowMapNet) -> Result<(Vec<f64>, Vec<f64>)> {
    let eval = EvalConfig {
        nfes: vec![32],
        ..config.eval.clone()
    };
    let mut beta = Vec::new();
    let mut uniform = Vec::new();
    for i in 0..config.checks.w_t_seeds {
        let streams = RngStreams::new(config.seed.wrapping_add(i as u64));
        let b = if i == 0 && matches!(config.stage1.loss_weight, LossWeight::Beta { .. }) {
            main.clone()
        } else {
            let c = Stage1Config {
                loss_weight: LossWeight::default(),
                ..config.stage1.clone()
            };
            train_stage1(teacher, &config.dataset, &c, &streams)?.0
        };
        beta.push(sw_at(&build_scaling_report("beta", &FlowMapEuler(&b), &config.dataset, &eval)?, 32)?);
        let c = Stage1Config {
            loss_weight: LossWeight::Uniform,
            ..config.stage1.clone()
        };
        let u = train_stage1(teacher, &config.dataset, &c, &streams)?.0;
        uniform.push(sw_at(&build_scaling_report("uniform", &FlowMapEuler(&u), &config.dataset, &eval)?, 32)?);
    }
    Ok((beta, uniform))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    WT,
    Conditioning,
    Simulation,
    Init,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w_t" | "w-t" | "wt" => Ok(Self::WT),
            "conditioning" => Ok(Self::Conditioning),
            "simulation" => Ok(Self::Simulation),
            "init" => Ok(Self::Init),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected w_t, conditioning, simulation or init)"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::WT => "w_t",
            Self::Conditioning => "conditioning",
            Self::Simulation => "simulation",
            Self::Init => "init",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub nfe: usize,
    pub sw_mean: f64,
    pub sw_se: f64,
    pub note: String,
}

fn ablation_rows(axis: AblationAxis, variant: &str, report: &ScalingReport, note: &str) -> Vec<AblationRow> {
    report
        .summary
        .iter()
        .map(|s| AblationRow {
            axis: axis.name().into(),
            variant: variant.into(),
            nfe: s.nfe,
            sw_mean: s.sw.mean,
            sw_se: s.sw.se,
            note: note.into(),
        })
        .collect()
}

/// Runs the variants of one ablation axis into `dir` (created if missing)
/// and writes `ablation_<axis>.csv`.
pub fn run_ablation(config: &ExperimentConfig, axis: AblationAxis, dir: &Path) -> Result<Vec<AblationRow>> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let dist = &config.dataset;
    let streams = RngStreams::new(config.seed);
    let (teacher, _) = stage("pretrain", train_teacher(dist, &config.net, &config.teacher, &streams))?;
    let eval = EvalConfig {
        nfes: vec![4, 32],
        ..config.eval.clone()
    };
    let mut rows = Vec::new();
    match axis {
        AblationAxis::WT => {
            let variants = [
                ("uniform", LossWeight::Uniform),
                ("normal(0.5,0.25)", LossWeight::Normal { mean: 0.5, std: 0.25 }),
                ("beta(2,1.5)", LossWeight::Beta { a: 2.0, b: 1.5 }),
            ];
            let seeds = config.checks.w_t_seeds.max(1);
            for (name, weight) in variants {
                let c = Stage1Config {
                    loss_weight: weight,
                    ..config.stage1.clone()
                };
                let mut per_seed = Vec::new();
                for i in 0..seeds {
                    let s = RngStreams::new(config.seed.wrapping_add(i as u64));
                    let (net, _) = stage("flowmap-train", train_stage1(&teacher, dist, &c, &s))?;
                    per_seed.push(build_scaling_report(name, &FlowMapEuler(&net), dist, &eval)?);
                }
                for (j, &nfe) in eval.nfes.iter().enumerate() {
                    let values: Vec<f64> = per_seed.iter().map(|r| r.summary[j].sw.mean).collect();
                    let s = crate::metrics::Summary::of(&values);
                    rows.push(AblationRow {
                        axis: axis.name().into(),
                        variant: name.into(),
                        nfe,
                        sw_mean: s.mean,
                        sw_se: s.se,
                        note: format!("{seeds} training seeds"),
                    });
                }
            }
        }
        AblationAxis::Conditioning => {
            for (name, conditioning) in [
                ("zero-init", TimeConditioning::ZeroInit),
                ("interpolated", config.stage1.conditioning),
            ] {
                let c = Stage1Config {
                    conditioning,
                    ..config.stage1.clone()
                };
                let (net, log) = stage("flowmap-train", train_stage1(&teacher, dist, &c, &streams))?;
                write_rows(dir.join(format!("emb_norm_{name}.csv")), &log)?;
                let ratio = log.last().map(|r| r.emb_norm_ratio).unwrap_or(f64::NAN);
                let report = build_scaling_report(name, &FlowMapEuler(&net), dist, &eval)?;
                rows.extend(ablation_rows(axis, name, &report, &format!("final emb-norm ratio {ratio:.4}")));
            }
        }
        AblationAxis::Simulation => {
            let (stage1, _) = stage("flowmap-train", train_stage1(&teacher, dist, &config.stage1, &streams))?;
            let (student, _, _) = stage(
                "distill",
                train_stage2(&stage1, &teacher, dist, &config.stage1, &config.stage2, &streams),
            )?;
            let (cm, _) = stage("consistency", train_consistency(&teacher, dist, &config.consistency, &streams))?;
            let a = build_scaling_report("consistency-backward", &ConsistencyGenerator(&cm), dist, &eval)?;
            let b = build_scaling_report("flowmap-backward", &FlowMapEuler(&student), dist, &eval)?;
            rows.extend(ablation_rows(axis, "consistency-backward", &a, ""));
            rows.extend(ablation_rows(axis, "flowmap-backward", &b, ""));
        }
        AblationAxis::Init => {
            let ode_only = ConsistencyConfig {
                sim_steps: 0,
                ..config.consistency.clone()
            };
            let (cm, _) = stage("consistency", train_consistency(&teacher, dist, &ode_only, &streams))?;
            let (stage1, _) = stage("flowmap-train", train_stage1(&teacher, dist, &config.stage1, &streams))?;
            let generators: [(&str, &dyn Generator); 3] = [
                ("flow-matching", &teacher_generator(&teacher, config)),
                ("consistency-ode-init", &ConsistencyGenerator(&cm)),
                ("flowmap-init", &FlowMapEuler(&stage1)),
            ];
            for (name, g) in generators {
                let report = build_scaling_report(name, g, dist, &eval)?;
                rows.extend(ablation_rows(axis, name, &report, ""));
            }
        }
    }
    write_rows(dir.join(format!("ablation_{}.csv", axis.name())), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SummaryCsvRow {
    model: String,
    dataset: String,
    nfe: usize,
    seeds: usize,
    calls: usize,
    sw_mean: f64,
    sw_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub method: String,
    pub nfe: usize,
    pub metric_mean: f64,
    pub metric_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub method: String,
    pub series: String,
    pub step: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbNormPoint {
    pub variant: String,
    pub step: usize,
    pub ratio: f64,
}

const RUN_FILES: [&str; 10] = [
    "config.toml",
    "teacher_log.csv",
    "stage1_log.csv",
    "stage2_log.csv",
    "consistency_log.csv",
    "summary_teacher.csv",
    "summary_stage1.csv",
    "summary_student.csv",
    "summary_consistency.csv",
    "drift.csv",
];

/// Writes tidy CSVs under `<run>/plots`: `scaling.csv`, `losses.csv`,
/// `emb_norm.csv` and `drift.csv`. Returns the written paths.
pub fn emit_plot_data(run: &Path) -> Result<Vec<PathBuf>> {
    let missing: Vec<&str> = RUN_FILES.iter().copied().filter(|f| !run.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteRun {
            dir: run.display().to_string(),
            missing: missing.join(", "),
        });
    }
    let out = run.join("plots");
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let mut scaling = Vec::new();
    for model in ["teacher", "stage1", "student", "consistency"] {
        for r in read_rows::<SummaryCsvRow>(run.join(format!("summary_{model}.csv")))? {
            scaling.push(ScalingPoint {
                method: model.into(),
                nfe: r.nfe,
                metric_mean: r.sw_mean,
                metric_se: r.sw_se,
            });
        }
    }

    let mut losses = Vec::new();
    let mut push = |method: &str, series: &str, step: usize, value: f64| {
        losses.push(LossPoint {
            method: method.into(),
            series: series.into(),
            step,
            value,
        })
    };
    for r in read_rows::<TeacherLogRow>(run.join("teacher_log.csv"))? {
        push("teacher", "loss", r.step, r.loss);
        push("teacher", "val_metric", r.step, r.val_metric);
    }
    let stage1: Vec<Stage1LogRow> = read_rows(run.join("stage1_log.csv"))?;
    for r in &stage1 {
        push("stage1", "loss_boundary", r.step, r.loss_boundary);
        push("stage1", "loss_flowmap", r.step, r.loss_flowmap);
        push("stage1", "mu", r.step, r.mu);
    }
    for (method, file) in [("student", "stage2_log.csv"), ("consistency", "consistency_log.csv")] {
        for r in read_rows::<Stage2LogRow>(run.join(file))? {
            push(method, "loss_fm", r.step, r.loss_fm);
            push(method, "loss_dmd", r.step, r.loss_dmd);
            push(method, "loss_fake", r.step, r.loss_fake);
        }
    }

    let mut emb: Vec<EmbNormPoint> = stage1
        .iter()
        .map(|r| EmbNormPoint {
            variant: "interpolated".into(),
            step: r.step,
            ratio: r.emb_norm_ratio,
        })
        .collect();
    let zero = run.join("stage1_zero_init_log.csv");
    if zero.is_file() {
        emb.extend(read_rows::<Stage1LogRow>(&zero)?.into_iter().map(|r| EmbNormPoint {
            variant: "zero-init".into(),
            step: r.step,
            ratio: r.emb_norm_ratio,
        }));
    }
    let drift: Vec<DriftRow> = read_rows(run.join("drift.csv"))?;

    let paths = [
        out.join("scaling.csv"),
        out.join("losses.csv"),
        out.join("emb_norm.csv"),
        out.join("drift.csv"),
    ];
    write_rows(&paths[0], &scaling)?;
    write_rows(&paths[1], &losses)?;
    write_rows(&paths[2], &emb)?;
    write_rows(&paths[3], &drift)?;
    Ok(paths.to_vec())
}

/// Loads the dataset of a run directory.
pub fn run_dataset(run: &Path) -> Result<ToyDistribution> {
    Ok(ExperimentConfig::load(run.join("config.toml"))?.dataset)
}
