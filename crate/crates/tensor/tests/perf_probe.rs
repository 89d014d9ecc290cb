//! Ignored throughput probes; run with `cargo test --release -- --ignored`.

use std::time::Instant;

use promptseg_tensor::{init, Graph, Tensor};

#[test]
#[ignore]
fn matmul_throughput() {
    let mut rng = init::seeded_rng(1);
    let (m, k, n) = (96, 864, 1024);
    let a: Tensor<f64> = init::uniform(&mut rng, &[m, k], -1.0, 1.0);
    let b: Tensor<f64> = init::uniform(&mut rng, &[k, n], -1.0, 1.0);
    let mut g = Graph::<f64>::inference();
    let av = g.constant(a).unwrap();
    let bv = g.constant(b).unwrap();
    let reps = 24;
    let t0 = Instant::now();
    for _ in 0..reps {
        g.matmul(av, bv).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let gmacs = (reps * m * k * n) as f64 / dt / 1e9;
    eprintln!("matmul {m}x{k}x{n}: {gmacs:.2} GMAC/s ({dt:.3}s total)");
}

#[test]
#[ignore]
fn conv_train_step_shape_probe() {
    // One conv layer roughly shaped like the heaviest fusion block conv,
    // forward + backward, batch 4.
    let mut rng = init::seeded_rng(2);
    let x: Tensor<f64> = init::uniform(&mut rng, &[4, 96, 16, 16], -1.0, 1.0);
    let w: Tensor<f64> = init::fan_in_uniform(&mut rng, &[96, 96, 3, 3], 96 * 9);
    let reps = 10;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::<f64>::recording();
        let xv = g.input(x.clone()).unwrap();
        let wv = g.input(w.clone()).unwrap();
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs_fwd = 4.0 * 96.0 * 16.0 * 16.0 * 96.0 * 9.0;
    let gmacs = reps as f64 * 3.0 * macs_fwd / dt / 1e9;
    eprintln!("conv fwd+bwd: {gmacs:.2} effective GMAC/s ({:.1} ms/step)", dt / reps as f64 * 1e3);
}
