//! The one-time consistency baseline. Its samples are good at one or two
//! steps and get worse as the budget grows.
//!
//! Runs the seconds-scale preset; pass `--full` for the reference sizes.

use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::consistency::{train_consistency, ConsistencyGenerator};
use flowmap_distill::metrics::build_scaling_report;
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
    let (net, _) = train_consistency(&teacher, &config.dataset, &config.consistency, &streams)?;
    let report = build_scaling_report("consistency", &ConsistencyGenerator(&net), &config.dataset, &config.eval)?;
    for row in &report.summary {
        println!("nfe {:>3}  sw {:.4} +- {:.4}", row.nfe, row.sw.mean, row.sw.se);
    }
    Ok(())
}
