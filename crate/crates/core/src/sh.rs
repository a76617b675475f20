//! Real spherical harmonics up to degree 3 and view-dependent color.

use crate::geometry::Vec3;
use crate::network::sigmoid;

pub const MAX_SH_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub fn coefficient_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at a unit direction, written into `out[..(degree+1)^2]`.
pub fn basis(degree: usize, dir: &Vec3, out: &mut [f64]) {
    assert!(degree <= MAX_SH_DEGREE, "SH degree {degree} unsupported");
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = C0;
    if degree >= 1 {
        out[1] = -C1 * y;
        out[2] = C1 * z;
        out[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = C2[0] * x * y;
        out[5] = C2[1] * y * z;
        out[6] = C2[2] * (2.0 * zz - xx - yy);
        out[7] = C2[3] * x * z;
        out[8] = C2[4] * (xx - yy);
        if degree >= 3 {
            out[9] = C3[0] * y * (3.0 * xx - yy);
            out[10] = C3[1] * x * y * z;
            out[11] = C3[2] * y * (4.0 * zz - xx - yy);
            out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = C3[4] * x * (4.0 * zz - xx - yy);
            out[14] = C3[5] * z * (xx - yy);
            out[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
}

/// Sigmoid of the per-channel SH dot product. `coeffs` holds three channel
/// blocks of `(degree+1)^2` coefficients each.
pub fn eval_sh(degree: usize, coeffs: &[f64], dir: &Vec3) -> Vec3 {
    let nc = coefficient_count(degree);
    let mut y = [0.0; 16];
    basis(degree, dir, &mut y);
    let mut rgb = Vec3::zeros();
    for c in 0..3 {
        let dot: f64 = coeffs[c * nc..(c + 1) * nc]
            .iter()
            .zip(&y[..nc])
            .map(|(a, b)| a * b)
            .sum();
        rgb[c] = sigmoid(dot);
    }
    rgb
}

/// Accumulates the coefficient gradient of [`eval_sh`] into `d_coeffs`.
pub fn eval_sh_vjp(degree: usize, rgb: &Vec3, dir: &Vec3, d_rgb: &Vec3, d_coeffs: &mut [f64]) {
    let nc = coefficient_count(degree);
    let mut y = [0.0; 16];
    basis(degree, dir, &mut y);
    for c in 0..3 {
        let g = d_rgb[c] * rgb[c] * (1.0 - rgb[c]);
        for i in 0..nc {
            d_coeffs[c * nc + i] += g * y[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_coefficients_are_mid_gray() {
        let rgb = eval_sh(2, &[0.0; 27], &Vec3::new(0.0, 0.6, 0.8));
        assert_eq!(rgb, Vec3::repeat(0.5));
    }

    #[test]
    fn dc_term_is_isotropic() {
        let mut a = [0.0; 27];
        a[0] = 1.3;
        a[9] = -0.4;
        a[18] = 2.0;
        let r1 = eval_sh(2, &a, &Vec3::x());
        let r2 = eval_sh(2, &a, &Vec3::new(-0.3, 0.4, -0.5).normalize());
        assert_abs_diff_eq!(r1, r2, epsilon = 1e-15);
        assert_abs_diff_eq!(r1.x, sigmoid(1.3 * C0), epsilon = 1e-15);
    }

    #[test]
    fn degree_one_z_term_is_odd() {
        let mut a = [0.0; 27];
        a[2] = 0.7;
        let up = eval_sh(2, &a, &Vec3::z());
        let down = eval_sh(2, &a, &-Vec3::z());
        assert!(up.x > 0.5);
        assert_abs_diff_eq!(up.x - 0.5, 0.5 - down.x, epsilon = 1e-15);
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        // Fibonacci-sphere quadrature of Y_i * Y_j over the unit sphere.
        let deg = 3;
        let nc = coefficient_count(deg);
        let count = 40_000;
        let mut gram = vec![0.0; nc * nc];
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut y = [0.0; 16];
        for i in 0..count {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            basis(deg, &Vec3::new(r * phi.cos(), r * phi.sin(), z), &mut y);
            for a in 0..nc {
                for b in 0..nc {
                    gram[a * nc + b] += y[a] * y[b];
                }
            }
        }
        let w = 4.0 * std::f64::consts::PI / count as f64;
        for a in 0..nc {
            for b in 0..nc {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((gram[a * nc + b] * w - expect).abs() < 2e-3, "({a},{b})");
            }
        }
    }
}
