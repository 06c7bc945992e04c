//! Samplers on a Gaussian whose flow map is known in closed form: one exact
//! flow-map jump against Euler and RK4 on the same ODE.

use flowmap_distill::data::GaussianFlow;
use flowmap_distill::nets::Class;
use flowmap_distill::rng::{normal_tensor, RngStreams};
use flowmap_distill::samplers::{euler_flowmap_sample, euler_ode_sample, make_uniform_schedule, rk4_solve};
use flowmap_distill::tensor::Tensor;

fn max_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> flowmap_distill::Result<()> {
    let flow = GaussianFlow {
        mean: vec![2.0, -1.0],
        std: 0.2,
    };
    let n = 1000;
    let z = normal_tensor(&mut RngStreams::new(0).stream("noise"), &[n, 2]);
    let classes = vec![Class::Null; n];
    let exact = flow.flow_map(&z, &vec![1.0; n], &vec![0.0; n]);

    println!("steps   flow map   euler      rk4");
    for steps in [1, 2, 4, 8, 16, 32] {
        let schedule = make_uniform_schedule(steps)?;
        let (jumped, _) = euler_flowmap_sample(&flow, &z, &classes, &schedule)?;
        let (euler, _) = euler_ode_sample(&flow, &z, &classes, &schedule)?;
        let rk4 = rk4_solve(&flow, &z, &classes, 1.0, 0.0, steps)?;
        println!(
            "{steps:>5}   {:.2e}   {:.2e}   {:.2e}",
            max_gap(&jumped, &exact),
            max_gap(&euler, &exact),
            max_gap(&rk4, &exact)
        );
    }
    Ok(())
}
