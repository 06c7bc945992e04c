//! Reverse-mode gradients of a flow-map network against central differences.

use flowmap_distill::nets::{Class, FlowMapNet, NetConfig};
use flowmap_distill::rng::{normal_tensor, RngStreams};
use flowmap_distill::tensor::{Tape, Tensor};

fn main() -> flowmap_distill::Result<()> {
    let config = NetConfig {
        hidden: vec![16, 16],
        ..NetConfig::default()
    };
    let mut rng = RngStreams::new(0).stream("gradcheck");
    let net = FlowMapNet::new(config, &mut rng)?;
    let z = normal_tensor(&mut rng, &[3, 2]);
    let (t, r) = ([0.9, 0.5, 0.3], [0.2, 0.5, 0.0]);
    let classes = [Class::Label(0), Class::Null, Class::Label(1)];

    let objective = |net: &FlowMapNet, z: &Tensor| -> f64 {
        let out = net.flow_map(&mut Tape::new(), z, &t, &r, &classes).unwrap();
        out.data().iter().map(|v| v.tanh()).sum()
    };

    let mut tape = Tape::new();
    let zw = tape.watch(&z);
    let bound = net.bind(&mut tape);
    let out = bound.flow_map(&mut tape, &zw, &t, &r, &classes)?;
    let act = tape.tanh(&out)?;
    let loss = tape.sum(&act)?;
    let grads = tape.backward(&loss)?;
    let pgrads = bound.gradients(&grads);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, (name, param)) in net.parameters().iter().enumerate() {
        let mut param_worst: f64 = 0.0;
        for i in 0..param.len() {
            let mut up = net.clone();
            up.parameters_mut()[p].data_mut()[i] += h;
            let mut down = net.clone();
            down.parameters_mut()[p].data_mut()[i] -= h;
            let fd = (objective(&up, &z) - objective(&down, &z)) / (2.0 * h);
            let err = (pgrads[p].data()[i] - fd).abs() / fd.abs().max(1e-6);
            param_worst = param_worst.max(err);
        }
        println!("{name:<24} {:>5} entries  worst rel err {param_worst:.2e}", param.len());
        worst = worst.max(param_worst);
    }
    let zgrad = grads.get_or_zeros(&zw);
    for i in 0..z.len() {
        let mut up = z.clone();
        up.data_mut()[i] += h;
        let mut down = z.clone();
        down.data_mut()[i] -= h;
        let fd = (objective(&net, &up) - objective(&net, &down)) / (2.0 * h);
        worst = worst.max((zgrad.data()[i] - fd).abs() / fd.abs().max(1e-6));
    }
    println!("worst overall {worst:.2e}");
    Ok(())
}
