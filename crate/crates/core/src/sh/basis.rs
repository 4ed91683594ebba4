use serde::{Deserialize, Serialize};

use super::ShError;
use crate::scalar::Scalar;

/// Real symmetric (even-order) SH basis configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ShBasisConfig {
    pub l_max: usize,
}

impl ShBasisConfig {
    pub fn new(l_max: usize) -> Result<Self, ShError> {
        if l_max % 2 != 0 {
            return Err(ShError::OddOrder(l_max));
        }
        Ok(ShBasisConfig { l_max })
    }

    /// Coefficient count (l_max + 1)(l_max + 2) / 2; 28 for l_max = 6.
    pub fn n_coeffs(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 2) / 2
    }

    /// (l, m) pairs in basis order: l ascending over even orders, m from -l to l.
    pub fn index_pairs(&self) -> Vec<(usize, i64)> {
        let mut out = Vec::with_capacity(self.n_coeffs());
        for l in (0..=self.l_max).step_by(2) {
            for m in -(l as i64)..=(l as i64) {
                out.push((l, m));
            }
        }
        out
    }

    /// Diagonal Laplace-Beltrami weights l(l+1) per coefficient.
    pub fn laplace_beltrami(&self) -> Vec<f64> {
        self.index_pairs().iter().map(|&(l, _)| (l * (l + 1)) as f64).collect()
    }
}

/// Row-major dense matrix of basis values: rows are directions, columns are
/// SH functions in basis order.
#[derive(Clone, Debug)]
pub struct BasisMatrix<T> {
    pub n_dirs: usize,
    pub n_coeffs: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> BasisMatrix<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n_coeffs..(i + 1) * self.n_coeffs]
    }

    /// `B c` for one coefficient vector.
    pub fn apply(&self, coeffs: &[T]) -> Vec<T> {
        (0..self.n_dirs)
            .map(|i| self.row(i).iter().zip(coeffs).fold(T::zero(), |acc, (&b, &c)| acc + b * c))
            .collect()
    }
}

/// Associated Legendre P_l^m(x) with the Condon-Shortley phase, m >= 0.
fn assoc_legendre<T: Scalar>(l: usize, m: usize, x: T) -> T {
    debug_assert!(m <= l);
    let mut pmm = T::one();
    if m > 0 {
        let somx2 = ((T::one() - x) * (T::one() + x)).sqrt();
        let mut fact = T::one();
        for _ in 0..m {
            pmm = pmm * -fact * somx2;
            fact = fact + T::of(2.0);
        }
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * T::of((2 * m + 1) as f64) * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = T::zero();
    for ll in (m + 2)..=l {
        pll = (x * T::of((2 * ll - 1) as f64) * pmmp1 - T::of((ll + m - 1) as f64) * pmm)
            / T::of((ll - m) as f64);
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Orthonormalization constant sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!), computed in
/// f64 (the factorial ratio stays well inside f64 range for l <= 20).
fn norm_constant(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0f64;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

/// Evaluates one real SH basis function.
///
/// Convention of the real symmetric basis used by diffusion MRI tooling
/// (descoteaux07 ordering): for order m < 0 the sqrt(2)-scaled real part
/// (cosine), for m = 0 the zonal harmonic, for m > 0 the sqrt(2)-scaled
/// imaginary part (sine).
fn real_sh<T: Scalar>(l: usize, m: i64, cos_theta: T, phi: T) -> T {
    let am = m.unsigned_abs() as usize;
    let nrm = T::of(norm_constant(l, am));
    let p = assoc_legendre(l, am, cos_theta);
    if m == 0 {
        nrm * p
    } else {
        let mphi = T::of(am as f64) * phi;
        let sqrt2 = T::of(std::f64::consts::SQRT_2);
        if m < 0 {
            sqrt2 * nrm * p * mphi.cos()
        } else {
            sqrt2 * nrm * p * mphi.sin()
        }
    }
}

/// Basis matrix over unit directions: row i holds all basis functions
/// evaluated at direction i.
pub fn sh_basis_matrix<T: Scalar>(
    directions: &[[T; 3]],
    config: ShBasisConfig,
) -> Result<BasisMatrix<T>, ShError> {
    let m = config.n_coeffs();
    let pairs = config.index_pairs();
    let mut data = Vec::with_capacity(directions.len() * m);
    for (i, d) in directions.iter().enumerate() {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().to_f64_lossy();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ShError::NotUnit { index: i, norm });
        }
        let cos_theta = num_traits::clamp(d[2], -T::one(), T::one());
        let phi = d[1].atan2(d[0]);
        for &(l, mm) in &pairs {
            data.push(real_sh(l, mm, cos_theta, phi));
        }
    }
    Ok(BasisMatrix { n_dirs: directions.len(), n_coeffs: m, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn rand_dir(rng: &mut Prng) -> [f64; 3] {
        loop {
            let v = rng.normal_vec3();
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    #[test]
    fn order_zero_is_constant() {
        let cfg = ShBasisConfig::new(0).unwrap();
        let mut rng = Prng::new(1);
        let dirs: Vec<[f64; 3]> = (0..16).map(|_| rand_dir(&mut rng)).collect();
        let b = sh_basis_matrix(&dirs, cfg).unwrap();
        assert_eq!(b.n_coeffs, 1);
        let y00 = 1.0 / (2.0 * std::f64::consts::PI.sqrt()); // 0.28209479...
        for i in 0..b.n_dirs {
            assert!((b.row(i)[0] - y00).abs() < 1e-14);
        }
    }

    #[test]
    fn lmax6_has_28_coefficients() {
        let cfg = ShBasisConfig::new(6).unwrap();
        assert_eq!(cfg.n_coeffs(), 28);
        let dirs = [[0.0, 0.0, 1.0]];
        let b = sh_basis_matrix(&dirs, cfg).unwrap();
        assert_eq!(b.n_coeffs, 28);
        assert_eq!(b.data.len(), 28);
    }

    #[test]
    fn antipodal_rows_identical() {
        let cfg = ShBasisConfig::new(6).unwrap();
        let mut rng = Prng::new(2);
        for _ in 0..20 {
            let d = rand_dir(&mut rng);
            let nd = [-d[0], -d[1], -d[2]];
            let b = sh_basis_matrix(&[d, nd], cfg).unwrap();
            for j in 0..b.n_coeffs {
                assert!(
                    (b.row(0)[j] - b.row(1)[j]).abs() < 1e-12,
                    "column {j}: {} vs {}",
                    b.row(0)[j],
                    b.row(1)[j]
                );
            }
        }
    }

    #[test]
    fn odd_order_rejected() {
        assert!(matches!(ShBasisConfig::new(5), Err(ShError::OddOrder(5))));
    }

    #[test]
    fn non_unit_direction_rejected() {
        let cfg = ShBasisConfig::new(2).unwrap();
        let err = sh_basis_matrix(&[[0.5, 0.0, 0.0]], cfg).unwrap_err();
        assert!(matches!(err, ShError::NotUnit { index: 0, .. }));
    }

    #[test]
    fn generic_f32_matches_f64_loosely() {
        let cfg = ShBasisConfig::new(4).unwrap();
        let d64 = [[0.6, 0.48, 0.64]];
        let n = (0.6f64 * 0.6 + 0.48 * 0.48 + 0.64 * 0.64).sqrt();
        let d64 = [[d64[0][0] / n, d64[0][1] / n, d64[0][2] / n]];
        let d32 = [[d64[0][0] as f32, d64[0][1] as f32, d64[0][2] as f32]];
        let b64 = sh_basis_matrix(&d64, cfg).unwrap();
        let b32 = sh_basis_matrix(&d32, cfg).unwrap();
        for j in 0..b64.n_coeffs {
            assert!((b64.row(0)[j] - b32.row(0)[j] as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn zonal_harmonics_match_closed_forms() {
        // Y_2^0 = sqrt(5/16pi) (3z^2 - 1), Y_4^0 = 3/(16 sqrt(pi)) (35z^4 - 30z^2 + 3).
        let cfg = ShBasisConfig::new(4).unwrap();
        let z: f64 = 0.3;
        let s = (1.0 - z * z).sqrt();
        let b = sh_basis_matrix(&[[s, 0.0, z]], cfg).unwrap();
        let pairs = cfg.index_pairs();
        let idx20 = pairs.iter().position(|&p| p == (2, 0)).unwrap();
        let idx40 = pairs.iter().position(|&p| p == (4, 0)).unwrap();
        let pi = std::f64::consts::PI;
        let y20 = (5.0 / (16.0 * pi)).sqrt() * (3.0 * z * z - 1.0);
        let y40 = 3.0 / (16.0 * pi.sqrt()) * (35.0 * z.powi(4) - 30.0 * z * z + 3.0);
        assert!((b.row(0)[idx20] - y20).abs() < 1e-12);
        assert!((b.row(0)[idx40] - y40).abs() < 1e-12);
    }
}
