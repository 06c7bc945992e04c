//! Stage 1: turn a pretrained velocity teacher into a two-time flow map and
//! compare its few-step samples with the teacher's.
//!
//! Runs the seconds-scale preset; pass `--full` for the reference sizes.

use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::flowmap::{composition_defect, train_stage1};
use flowmap_distill::metrics::{build_scaling_report, FlowMapEuler, TeacherEuler};
use flowmap_distill::nets::FlowMapNet;
use flowmap_distill::rng::RngStreams;
use flowmap_distill::teacher::{train_teacher, GuidedTeacher};

fn main() -> flowmap_distill::Result<()> {
    let config = if std::env::args().any(|a| a == "--full") {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::tiny()
    };
    let streams = RngStreams::new(config.seed);
    let (teacher, _) = train_teacher(&config.dataset, &config.net, &config.teacher, &streams)?;

    let init = FlowMapNet::from_teacher(&teacher, config.stage1.conditioning)?;
    let n = config.checks.composition_triples;
    let before = composition_defect(&init, &config.dataset, n, &streams)?;
    let (student, log) = train_stage1(&teacher, &config.dataset, &config.stage1, &streams)?;
    let after = composition_defect(&student, &config.dataset, n, &streams)?;
    for row in &log {
        println!(
            "step {:>5}  boundary {:.4}  flow map {:.4}  emb ratio {:.3}",
            row.step, row.loss_boundary, row.loss_flowmap, row.emb_norm_ratio
        );
    }
    println!("composition defect {before:.4} -> {after:.4}");

    let guided = TeacherEuler(GuidedTeacher {
        net: &teacher,
        scale: config.stage1.guidance.scale,
    });
    let teacher_report = build_scaling_report("teacher", &guided, &config.dataset, &config.eval)?;
    let student_report = build_scaling_report("flowmap", &FlowMapEuler(&student), &config.dataset, &config.eval)?;
    println!("nfe   teacher   flow map");
    for &nfe in &config.eval.nfes {
        println!(
            "{nfe:>3}   {:.4}    {:.4}",
            teacher_report.sw(nfe).unwrap_or(f64::NAN),
            student_report.sw(nfe).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
