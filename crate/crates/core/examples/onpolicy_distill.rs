//! Stage 2: on-policy distillation of a Stage-1 flow map with random step
//! budgets and distribution matching on its own rollouts.
//!
//! Runs the seconds-scale preset; pass `--full` for the reference sizes.

use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::distill::train_stage2;
use flowmap_distill::flowmap::train_stage1;
use flowmap_distill::metrics::{build_scaling_report, FlowMapEuler};
use flowmap_distill::rng::RngStreams;
use flowmap_distill::teacher::train_teacher;

fn main() -> flowmap_distill::Result<()> {
    let config = if std::env::args().any(|a| a == "--full") {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::tiny()
    };
    let streams = RngStreams::new(config.seed);
    let (teacher, _) = train_teacher(&config.dataset, &config.net, &config.teacher, &streams)?;
    let (stage1, _) = train_stage1(&teacher, &config.dataset, &config.stage1, &streams)?;
    let (student, _fake, log) =
        train_stage2(&stage1, &teacher, &config.dataset, &config.stage1, &config.stage2, &streams)?;
    for row in &log {
        println!(
            "step {:>5}  s {:>2}  fm {:.4}  dmd {:.4}  fake {:.4}",
            row.step, row.s_sampled, row.loss_fm, row.loss_dmd, row.loss_fake
        );
    }
    let before = build_scaling_report("stage1", &FlowMapEuler(&stage1), &config.dataset, &config.eval)?;
    let after = build_scaling_report("student", &FlowMapEuler(&student), &config.dataset, &config.eval)?;
    println!("nfe   stage 1   stage 2");
    for &nfe in &config.eval.nfes {
        println!(
            "{nfe:>3}   {:.4}    {:.4}",
            before.sw(nfe).unwrap_or(f64::NAN),
            after.sw(nfe).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
