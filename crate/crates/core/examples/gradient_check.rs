//! Finite-difference check of the temporal module's gradients with respect
//! to every frame, the SCM on top of it, and each weight bank.
//!
//! Run with `cargo run --example gradient_check`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blendnet::blend::{scm_forward, tcm_forward, EmbeddingStrategy, ScmVars, TcmVars};
use blendnet::tensor::gradcheck::{check_op, GradCheckConfig};
use blendnet::tensor::Tensor;

fn main() -> blendnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, c, h, w) = (3, 4, 3, 3);
    let mut inputs: Vec<Tensor> = (0..t).map(|_| Tensor::randn([c, h, w], 1.0, &mut rng)).collect();
    for _ in 0..t {
        inputs.push(Tensor::randn([1, c], 0.5, &mut rng));
        inputs.push(Tensor::randn([c, c], 0.5, &mut rng));
        inputs.push(Tensor::randn([c, c], 0.5, &mut rng));
    }
    inputs.push(Tensor::randn([1, c], 0.5, &mut rng));
    inputs.push(Tensor::randn([c / 2, c], 0.5, &mut rng));
    inputs.push(Tensor::randn([c, c / 2], 0.5, &mut rng));

    let report = check_op(
        &inputs,
        |g, v| {
            let bank = |k: usize| (0..t).map(|m| v[t + 3 * m + k]).collect::<Vec<_>>();
            let tcm = TcmVars { w4: bank(0), w5: bank(1), w6: bank(2) };
            let z = tcm_forward(g, &v[..t], t / 2, &tcm, EmbeddingStrategy::Positional)?;
            let n = v.len();
            let scm = ScmVars { w1: v[n - 3], w2: v[n - 2], w3: v[n - 1] };
            Ok(scm_forward(g, z.out, &scm)?.out)
        },
        GradCheckConfig::default(),
    )?;
    println!(
        "{} gradient entries, max relative error {:.2e}, max absolute error {:.2e}",
        report.checked, report.max_rel_err, report.max_abs_err
    );
    println!("{}", if report.passes(1e-4) { "ok" } else { "FAILED" });
    Ok(())
}
