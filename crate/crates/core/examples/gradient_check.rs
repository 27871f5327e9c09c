//! Compare the analytic log-likelihood gradient of a small Gaussian policy
//! with central finite differences.

use rolldrop::nn::{gaussian_log_prob, gaussian_log_prob_grads, Activation, DropoutSpec, NetMode, PolicyNet, Tape};
use rolldrop::rng::{RngStream, StreamId};

fn main() -> rolldrop::Result<()> {
    let mut rng = RngStream::new(0, 0, StreamId::Init);
    let spec = DropoutSpec {
        position: 1,
        rolldrop_p: 0.0,
        train_p: 0.0,
    };
    let policy = PolicyNet::init(&[3, 5, 4, 2], Activation::Tanh, 0.6, spec, &mut rng)?;
    let obs = [0.3, -0.7, 1.1];
    let action = [0.2, -0.4];

    let mut tape = Tape::default();
    policy.forward_tape(&obs, NetMode::Update, &mut rng, &[], &mut tape)?;
    let (gm, gs) = gaussian_log_prob_grads(tape.output(), policy.log_std(), &action);
    let mut grads = vec![0.0; policy.num_params()];
    policy.backward(&tape, &gm, &gs, &mut grads)?;

    let theta = policy.flat_params();
    let loss = |t: &[f64]| -> rolldrop::Result<f64> {
        let mut p = policy.clone();
        p.set_flat_params(t)?;
        gaussian_log_prob(&p.mean_action(&obs)?, p.log_std(), &action)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let (mut up, mut down) = (theta.clone(), theta.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (loss(&up)? - loss(&down)?) / (2.0 * h);
        worst = worst.max((fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-4));
    }
    println!("{} parameters, worst relative error {worst:.2e}", theta.len());
    Ok(())
}
