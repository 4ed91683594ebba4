//! Isolated kernel timings: raw dot/axpy, a GRU-sized matvec pass, and one
//! full predictor step, to locate the dominant cost.

use std::time::Instant;

use ddtrack_core::autodiff::kernels::{axpy_f64, dot_f64};
use ddtrack_core::model::{ModelConfig, ModelParameters, OrientationPredictor};
use ddtrack_core::rng::Prng;
use ddtrack_core::sh::NeighborhoodFeature;

fn main() {
    let mut rng = Prng::new(1);

    // Raw dot throughput at the GRU row length.
    let a: Vec<f64> = (0..512).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..512).map(|_| rng.normal()).collect();
    let t = Instant::now();
    let mut acc = 0.0;
    let reps = 2_000_000;
    for _ in 0..reps {
        acc += dot_f64(&a, &b);
    }
    let dt = t.elapsed().as_secs_f64();
    println!("dot512 (hot cache): {:.2} GMAC/s (acc {acc:.1})", reps as f64 * 512.0 / dt / 1e9);

    // Streaming matvec at GRU scale: [1536, 512] x [512].
    let m = 1536;
    let k = 512;
    let w: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
    let x: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let mut y = vec![0.0; m];
    let t = Instant::now();
    let reps = 2000;
    for _ in 0..reps {
        for i in 0..m {
            y[i] = dot_f64(&w[i * k..(i + 1) * k], &x);
        }
    }
    let dt = t.elapsed().as_secs_f64();
    let macs = reps as f64 * (m * k) as f64;
    println!(
        "matvec 1536x512 (6.3 MB weights): {:.2} GMAC/s, {:.2} GB/s (y0 {:.3})",
        macs / dt / 1e9,
        macs * 8.0 / dt / 1e9,
        y[0]
    );

    // axpy throughput at conv-column length.
    let xs: Vec<f64> = (0..27).map(|_| rng.normal()).collect();
    let mut out = vec![0.0; 27];
    let t = Instant::now();
    let reps = 20_000_000;
    for i in 0..reps {
        axpy_f64(&mut out, (i % 7) as f64 * 1e-9, &xs);
    }
    let dt = t.elapsed().as_secs_f64();
    println!("axpy27: {:.2} GMAC/s (out0 {:.3})", reps as f64 * 27.0 / dt / 1e9, out[0]);

    // One full predictor step at the default dimensions.
    let params = ModelParameters::init(ModelConfig::default(), 3);
    let pred = OrientationPredictor::new(&params, Default::default());
    let m_coef = params.config.sh_coeffs;
    let feature = NeighborhoodFeature {
        n_coeffs: m_coef,
        block: (0..27 * m_coef).map(|i| 0.1 * (i as f64).sin()).collect(),
        out_of_bounds: false,
    };
    let mut state = pred.initial_state();
    let mut r = Prng::new(9);
    let t = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let _ = pred.predict(&feature, &mut state, &mut r);
    }
    let dt = t.elapsed().as_secs_f64();
    println!("predictor step: {:.2} ms", dt * 1000.0 / reps as f64);
}
