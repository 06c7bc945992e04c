//! The whole experiment in one run directory: teacher, both stages, the
//! consistency baseline, scaling reports and verdicts.
//!
//! Runs the seconds-scale preset under `$FLOWMAP_RUN_ROOT` (default `./runs`);
//! pass `--full` for the reference run.

use flowmap_distill::config::ExperimentConfig;
use flowmap_distill::pipeline::{allocate_run_dir, emit_plot_data, run_pipeline_in, run_root};

fn main() -> flowmap_distill::Result<()> {
    let config = if std::env::args().any(|a| a == "--full") {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::tiny()
    };
    let dir = allocate_run_dir(&run_root(), &format!("{}-example", config.name))?;
    let outcome = run_pipeline_in(&config, &dir)?;
    for v in &outcome.verdicts {
        println!("{} {:<24} {}", if v.pass { "PASS" } else { "FAIL" }, v.key, v.detail);
    }
    for path in emit_plot_data(&dir)? {
        println!("{}", path.display());
    }
    Ok(())
}
