//! Decoupled diffusion over orientation vectors.
//!
//! The forward process attenuates a clean orientation toward zero while
//! injecting Gaussian noise: with attenuation `h = -y0` and step `k` in
//! (0, 1], `y_k = y0 + k h + sqrt(k) eps = (1 - k) y0 + sqrt(k) eps`. The
//! reverse process walks a uniform `k` grid back to 0 using a predicted
//! attenuation, with constant per-step variance `dk (k - dk) / k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Prng;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion step k={k} outside (0, 1]")]
    BadK { k: f64 },
    #[error("loss weights need k in (0, 1), got {k}")]
    BadLossK { k: f64 },
    #[error("reverse step decrement dk={dk} invalid for k={k}")]
    BadStep { k: f64, dk: f64 },
    #[error("sampler needs num_steps >= 1")]
    BadSampler,
    #[error("sampled orientation has zero norm")]
    DegenerateOrientation,
}

/// One forward draw with all intermediates, satisfying
/// `yk = y0 + k h + sqrt(k) eps` with `h = -y0` exactly.
#[derive(Clone, Debug)]
pub struct ForwardSample<T> {
    pub y0: [T; 3],
    pub k: T,
    pub eps: [T; 3],
    pub yk: [T; 3],
    pub h: [T; 3],
}

impl<T: Scalar> ForwardSample<T> {
    pub fn from_noise(y0: [T; 3], k: T, eps: [T; 3]) -> Result<Self, DiffusionError> {
        let yk = forward_sample(y0, k, eps)?;
        Ok(ForwardSample { y0, k, eps, yk, h: [-y0[0], -y0[1], -y0[2]] })
    }

    pub fn draw(y0: [T; 3], k: T, rng: &mut Prng) -> Result<Self, DiffusionError> {
        let n = rng.normal_vec3();
        Self::from_noise(y0, k, [T::of(n[0]), T::of(n[1]), T::of(n[2])])
    }
}

fn check_k<T: Scalar>(k: T) -> Result<(), DiffusionError> {
    let kf = k.to_f64_lossy();
    if !(kf > 0.0 && kf <= 1.0) {
        return Err(DiffusionError::BadK { k: kf });
    }
    Ok(())
}

/// `y_k = (1 - k) y0 + sqrt(k) eps` for k in (0, 1].
pub fn forward_sample<T: Scalar>(y0: [T; 3], k: T, eps: [T; 3]) -> Result<[T; 3], DiffusionError> {
    check_k(k)?;
    let a = T::one() - k;
    let s = k.sqrt();
    Ok([a * y0[0] + s * eps[0], a * y0[1] + s * eps[1], a * y0[2] + s * eps[2]])
}

/// Noise implied by a noisy sample and a predicted attenuation:
/// `eps = (y_k - (k - 1) h) / sqrt(k)`.
pub fn derive_epsilon<T: Scalar>(
    yk: [T; 3],
    h_pred: [T; 3],
    k: T,
) -> Result<[T; 3], DiffusionError> {
    check_k(k)?;
    let c = k - T::one();
    let inv = T::one() / k.sqrt();
    Ok([
        inv * (yk[0] - c * h_pred[0]),
        inv * (yk[1] - c * h_pred[1]),
        inv * (yk[2] - c * h_pred[2]),
    ])
}

/// Parameters of one reverse transition from `k` to `k - dk`.
#[derive(Clone, Copy, Debug)]
pub struct ReverseStepParams<T> {
    pub k: T,
    pub dk: T,
    /// Constant posterior variance `dk (k - dk) / k`; exactly 0 when dk = k.
    pub sigma2: T,
}

impl<T: Scalar> ReverseStepParams<T> {
    pub fn new(k: T, dk: T) -> Result<Self, DiffusionError> {
        check_k(k)?;
        let (kf, dkf) = (k.to_f64_lossy(), dk.to_f64_lossy());
        if !(dkf > 0.0 && dkf <= kf) {
            return Err(DiffusionError::BadStep { k: kf, dk: dkf });
        }
        let sigma2 = dk * (k - dk) / k;
        Ok(ReverseStepParams { k, dk, sigma2 })
    }
}

/// Posterior mean plus scaled noise:
/// `((k - dk)/k) y_k - (dk/k) h + sqrt(sigma2) z`.
/// The final step (dk = k) returns `-h` exactly, independent of `y_k`.
pub fn reverse_step<T: Scalar>(
    yk: [T; 3],
    h_pred: [T; 3],
    params: ReverseStepParams<T>,
    noise: Option<[T; 3]>,
) -> [T; 3] {
    let cy = (params.k - params.dk) / params.k;
    let ch = params.dk / params.k;
    let mut out = [
        cy * yk[0] - ch * h_pred[0],
        cy * yk[1] - ch * h_pred[1],
        cy * yk[2] - ch * h_pred[2],
    ];
    if let Some(z) = noise {
        let s = params.sigma2.sqrt();
        for (o, zi) in out.iter_mut().zip(z) {
            *o = *o + s * zi;
        }
    }
    out
}

/// Dynamic loss weights: `lambda1 = (k^2 - k + 1)/k`,
/// `lambda2 = (k^2 - k + 1)/(1 - k)^2`, both defined on (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct LossWeights<T> {
    pub lambda1: T,
    pub lambda2: T,
}

pub fn loss_weights<T: Scalar>(k: T) -> Result<LossWeights<T>, DiffusionError> {
    let kf = k.to_f64_lossy();
    if !(kf > 0.0 && kf < 1.0) {
        return Err(DiffusionError::BadLossK { k: kf });
    }
    let num = k * k - k + T::one();
    let one_minus = T::one() - k;
    Ok(LossWeights { lambda1: num / k, lambda2: num / (one_minus * one_minus) })
}

/// Smooth-L1 of one residual with the given transition point.
pub fn smooth_l1_term<T: Scalar>(r: T, delta: T) -> T {
    if r.abs() < delta {
        T::of(0.5) * r * r / delta
    } else {
        r.abs() - T::of(0.5) * delta
    }
}

fn smooth_l1_vec3<T: Scalar>(a: [T; 3], b: [T; 3], delta: T) -> T {
    (0..3).fold(T::zero(), |acc, i| acc + smooth_l1_term(a[i] - b[i], delta))
}

/// Weighted training objective for one (step, k) draw:
/// `lambda1 SmoothL1(h_pred, h_true) + lambda2 SmoothL1(eps_pred, eps_true)`,
/// smooth-L1 summed over the 3 components.
pub fn training_loss<T: Scalar>(
    h_pred: [T; 3],
    eps_pred: [T; 3],
    h_true: [T; 3],
    eps_true: [T; 3],
    k: T,
    delta: T,
) -> Result<T, DiffusionError> {
    let w = loss_weights(k)?;
    Ok(w.lambda1 * smooth_l1_vec3(h_pred, h_true, delta)
        + w.lambda2 * smooth_l1_vec3(eps_pred, eps_true, delta))
}

/// Reverse-sampling schedule and mode.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Uniform grid k = 1, 1 - 1/S, ..., 1/S -> 0.
    pub num_steps: usize,
    /// Suppress all sampling noise (start from y = 0, no reverse noise).
    pub deterministic: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 4, deterministic: true }
    }
}

/// The uniform reverse grid k = 1, (S-1)/S, ..., 1/S visited by the
/// sampler, exposed so callers can precompute per-k conditioning.
pub fn k_grid<T: Scalar>(num_steps: usize) -> Vec<T> {
    let s = T::of(num_steps as f64);
    (0..num_steps).map(|i| T::of((num_steps - i) as f64) / s).collect()
}

/// Conditional attenuation predictor `h(y_k, k)` with conditions bound.
pub trait ConditionedDenoiser<T> {
    fn predict_attenuation(&self, yk: [T; 3], k: T) -> [T; 3];
}

impl<T, F> ConditionedDenoiser<T> for F
where
    F: Fn([T; 3], T) -> [T; 3],
{
    fn predict_attenuation(&self, yk: [T; 3], k: T) -> [T; 3] {
        self(yk, k)
    }
}

/// Runs the full reverse chain and normalizes the result to unit length.
///
/// Deterministic mode starts from y = 0 (the noiseless forward value at
/// k = 1) and suppresses reverse noise; stochastic mode starts from a
/// standard normal draw.
pub fn sample_orientation<T: Scalar, D: ConditionedDenoiser<T> + ?Sized>(
    denoiser: &D,
    config: SamplerConfig,
    rng: &mut Prng,
) -> Result<[T; 3], DiffusionError> {
    if config.num_steps == 0 {
        return Err(DiffusionError::BadSampler);
    }
    let s = config.num_steps;
    let mut y: [T; 3] = if config.deterministic {
        [T::zero(); 3]
    } else {
        let n = rng.normal_vec3();
        [T::of(n[0]), T::of(n[1]), T::of(n[2])]
    };
    let dk = T::one() / T::of(s as f64);
    for (i, &k) in k_grid::<T>(s).iter().enumerate() {
        let params = ReverseStepParams::new(k, dk)?;
        let h = denoiser.predict_attenuation(y, k);
        let noise = if config.deterministic || i + 1 == s {
            None
        } else {
            let n = rng.normal_vec3();
            Some([T::of(n[0]), T::of(n[1]), T::of(n[2])])
        };
        y = reverse_step(y, h, params, noise);
    }
    let norm = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(DiffusionError::DegenerateOrientation);
    }
    Ok([y[0] / norm, y[1] / norm, y[2] / norm])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_limits() {
        // Vanishing k with no noise leaves y0 (continuity at the clean end).
        let y0: [f64; 3] = [0.3, -0.5, 0.81];
        let yk = forward_sample(y0, 1e-12, [0.0; 3]).unwrap();
        for i in 0..3 {
            assert!((yk[i] - y0[i]).abs() < 1e-11);
        }
        // k = 1 fully attenuates the signal: yk equals the noise exactly.
        let e: [f64; 3] = [1.25, -0.5, 0.125];
        assert_eq!(forward_sample(y0, 1.0, e).unwrap(), e);
    }

    #[test]
    fn forward_halfway_closed_form() {
        let yk = forward_sample([1.0, 0.0, 0.0], 0.5, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(yk[0], 0.5);
        assert_eq!(yk[1], 0.5f64.sqrt());
        assert_eq!(yk[2], 0.0);
    }

    #[test]
    fn forward_rejects_bad_k() {
        assert!(forward_sample([0.0; 3], 0.0, [0.0; 3]).is_err());
        assert!(forward_sample([0.0; 3], 1.0001, [0.0; 3]).is_err());
        assert!(forward_sample([0.0; 3], -0.1, [0.0; 3]).is_err());
    }

    #[test]
    fn epsilon_roundtrip_identity() {
        let mut rng = Prng::new(17);
        for ik in 1..10 {
            let k = ik as f64 / 10.0;
            for _ in 0..50 {
                let y0 = rng.normal_vec3();
                let fs = ForwardSample::draw(y0, k, &mut rng).unwrap();
                let eps = derive_epsilon(fs.yk, fs.h, k).unwrap();
                for i in 0..3 {
                    assert!(
                        (eps[i] - fs.eps[i]).abs() < 1e-12,
                        "k={k}: {} vs {}",
                        eps[i],
                        fs.eps[i]
                    );
                }
            }
        }
    }

    #[test]
    fn epsilon_special_cases() {
        // k = 1: the (k-1) term vanishes, eps equals yk exactly.
        let yk: [f64; 3] = [0.7, -0.2, 0.1];
        assert_eq!(derive_epsilon(yk, [9.0, 9.0, 9.0], 1.0).unwrap(), yk);
        // Zero sample and zero prediction give zero noise for any k.
        assert_eq!(derive_epsilon([0.0; 3], [0.0; 3], 0.3).unwrap(), [0.0; 3]);
    }

    #[test]
    fn reverse_final_step_returns_neg_h() {
        let h: [f64; 3] = [0.25, -1.0, 0.5];
        for k in [1.0, 0.5, 0.125] {
            let p = ReverseStepParams::new(k, k).unwrap();
            assert_eq!(p.sigma2, 0.0);
            let out = reverse_step([123.0, -5.0, 7.0], h, p, None);
            assert_eq!(out, [-h[0], -h[1], -h[2]]);
        }
    }

    #[test]
    fn reverse_halfway_mixes_sample_and_signal() {
        let y0: [f64; 3] = [0.0, 1.0, 0.0];
        let e: [f64; 3] = [0.3, 0.1, -0.8];
        let h = [-y0[0], -y0[1], -y0[2]];
        let p = ReverseStepParams::new(1.0, 0.5).unwrap();
        let out = reverse_step(e, h, p, None);
        for i in 0..3 {
            assert!((out[i] - (0.5 * e[i] + 0.5 * y0[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_noise_scaling() {
        let p = ReverseStepParams::new(1.0, 0.5).unwrap();
        assert_eq!(p.sigma2, 0.25);
        let z: [f64; 3] = [1.0, -2.0, 4.0];
        let mu = reverse_step([0.2f64; 3], [0.1; 3], p, None);
        let noisy = reverse_step([0.2; 3], [0.1; 3], p, Some(z));
        for i in 0..3 {
            assert!((noisy[i] - (mu[i] + 0.5 * z[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_rejects_dk_above_k() {
        assert!(ReverseStepParams::new(0.5, 0.6).is_err());
        assert!(ReverseStepParams::new(0.5, 0.0).is_err());
    }

    #[test]
    fn loss_weights_values_and_identity() {
        let w = loss_weights(0.5).unwrap();
        assert_eq!(w.lambda1, 1.5);
        assert_eq!(w.lambda2, 3.0);
        // Shared numerator: lambda1 k = lambda2 (1-k)^2.
        for ik in 1..100 {
            let k = ik as f64 / 100.0;
            let w = loss_weights(k).unwrap();
            assert!((w.lambda1 * k - w.lambda2 * (1.0 - k) * (1.0 - k)).abs() < 1e-12);
        }
        assert!(loss_weights(0.0).is_err());
        assert!(loss_weights(1.0).is_err());
        // lambda1 blows up toward k = 0; the training sampler clips a margin.
        assert!(loss_weights(1e-6).unwrap().lambda1 > 1e5);
    }

    #[test]
    fn training_loss_examples() {
        let zero: f64 = training_loss([0.1; 3], [0.2; 3], [0.1; 3], [0.2; 3], 0.5, 1.0).unwrap();
        assert_eq!(zero, 0.0);
        // h residual (0.5, 0, 0): smooth-L1 is 0.125, lambda1(0.5) = 1.5.
        let l: f64 = training_loss([0.5, 0.0, 0.0], [0.0; 3], [0.0; 3], [0.0; 3], 0.5, 1.0).unwrap();
        assert!((l - 0.1875).abs() < 1e-15);
        // Distance symmetry under swapping prediction and target.
        let a: ([f64; 3], [f64; 3]) = ([0.3, -0.2, 0.9], [0.1, 0.4, -0.5]);
        let b: ([f64; 3], [f64; 3]) = ([-0.6, 0.2, 0.15], [2.0, -1.5, 0.3]);
        let l1 = training_loss(a.0, a.1, b.0, b.1, 0.37, 1.0).unwrap();
        let l2 = training_loss(b.0, b.1, a.0, a.1, 0.37, 1.0).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn oracle_denoiser_recovers_target_exactly() {
        let target: [f64; 3] = [0.4, -2.0, 1.2];
        let oracle = move |_yk: [f64; 3], _k: f64| [-target[0], -target[1], -target[2]];
        let n = (target[0] * target[0] + target[1] * target[1] + target[2] * target[2]).sqrt();
        let want = [target[0] / n, target[1] / n, target[2] / n];
        for steps in [1usize, 2, 4, 8, 16] {
            let cfg = SamplerConfig { num_steps: steps, deterministic: true };
            let mut rng = Prng::new(0);
            let got = sample_orientation(&oracle, cfg, &mut rng).unwrap();
            assert_eq!(got, want, "steps={steps}");
        }
    }

    #[test]
    fn stochastic_sampling_reproducible() {
        let oracle = |yk: [f64; 3], k: f64| [-yk[0] * k, 0.5 - yk[1], k - yk[2]];
        let cfg = SamplerConfig { num_steps: 6, deterministic: false };
        let mut r1 = Prng::new(42);
        let mut r2 = Prng::new(42);
        let a = sample_orientation(&oracle, cfg, &mut r1).unwrap();
        let b = sample_orientation(&oracle, cfg, &mut r2).unwrap();
        assert_eq!(a, b);
        let mut r3 = Prng::new(43);
        let c = sample_orientation(&oracle, cfg, &mut r3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_orientation_rejected() {
        let zero = |_yk: [f64; 3], _k: f64| [0.0; 3];
        let cfg = SamplerConfig { num_steps: 2, deterministic: true };
        let mut rng = Prng::new(0);
        let err = sample_orientation(&zero, cfg, &mut rng).unwrap_err();
        assert!(matches!(err, DiffusionError::DegenerateOrientation));
    }

    #[test]
    fn forward_sample_struct_invariant() {
        let mut rng = Prng::new(5);
        for _ in 0..100 {
            let y0 = rng.normal_vec3();
            let k = rng.uniform_in(0.01, 1.0);
            let fs = ForwardSample::draw(y0, k, &mut rng).unwrap();
            for i in 0..3 {
                let recon = fs.y0[i] + fs.k * fs.h[i] + fs.k.sqrt() * fs.eps[i];
                assert!((recon - fs.yk[i]).abs() < 1e-15);
                assert_eq!(fs.h[i], -fs.y0[i]);
            }
        }
    }
}
