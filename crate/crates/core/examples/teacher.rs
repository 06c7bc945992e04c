//! Train the flow-matching teacher and watch guided Euler sampling improve
//! with the step budget.
//!
//! Runs the seconds-scale preset; pass `--full` for the reference sizes.

use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::metrics::{build_scaling_report, TeacherEuler};
use flowmap_distill::rng::RngStreams;
use flowmap_distill::teacher::{train_teacher, GuidedTeacher};

fn main() -> flowmap_distill::Result<()> {
    let config = if std::env::args().any(|a| a == "--full") {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::tiny()
    };
    let (teacher, log) = train_teacher(&config.dataset, &config.net, &config.teacher, &RngStreams::new(config.seed))?;
    for row in &log {
        println!("step {:>5}  loss {:.4}  val {:.4}", row.step, row.loss, row.val_metric);
    }
    let guided = TeacherEuler(GuidedTeacher {
        net: &teacher,
        scale: config.stage1.guidance.scale,
    });
    let report = build_scaling_report("teacher", &guided, &config.dataset, &config.eval)?;
    for row in &report.summary {
        println!("nfe {:>3}  calls {:>3}  sw {:.4}  modes {:.1}", row.nfe, row.calls, row.sw.mean, row.modes.mean);
    }
    Ok(())
}
