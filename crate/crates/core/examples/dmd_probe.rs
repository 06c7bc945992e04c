//! Distribution matching on a one-dimensional Gaussian: a student N(m, 1)
//! pulled toward N(0, 1) by the score difference alone.

use flowmap_distill::distill::{gaussian_mean_probe, DmdForm};

fn main() -> flowmap_distill::Result<()> {
    for form in [DmdForm::Denoised, DmdForm::Score] {
        for m0 in [2.0, -1.5] {
            let path = gaussian_mean_probe(m0, 200, 0.02, 256, form, false, 0)?;
            let marks: Vec<String> = path.iter().step_by(25).map(|m| format!("{m:+.3}")).collect();
            println!("{form:?} m0 {m0:+.1}: {} ... {:+.4}", marks.join(" "), path.last().unwrap());
        }
    }
    let still = gaussian_mean_probe(0.7, 50, 0.02, 256, DmdForm::Denoised, true, 0)?;
    println!("matched fake score: m stays at {:+.4}", still.last().unwrap());
    Ok(())
}
