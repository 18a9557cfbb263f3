//! Brute-force dense-matrix oracles.
//!
//! Everything in this module is deliberately written as straight-line 4×4
//! matrix arithmetic — general scaling-and-squaring exponentials, inverse
//! scaling-and-squaring logarithms, explicit quaternion-to-matrix formulas —
//! and shares no code with [`crate::manifold`], [`crate::solver`],
//! [`crate::pgo`] or [`crate::ba`]. The optimization modules are tested by
//! agreement with these slow-but-obvious evaluators, so keeping the two
//! paths independent is the whole point: a shared bug could not cancel out.

use nalgebra::{Matrix3, Matrix4, Vector3};

/// Relative Frobenius-norm reduction target before the logarithm series is
/// applied; reached by repeated matrix square roots.
const LOG_SERIES_RADIUS: f64 = 0.2;

/// Matrix form `ξ^` of a Sim(3) tangent `(ω, σ, ν)`:
/// top-left `[ω]× + σI`, top-right `ν`, bottom row zero.
pub fn sim3_hat(omega: &Vector3<f64>, sigma: f64, nu: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m[(0, 0)] = sigma;
    m[(1, 1)] = sigma;
    m[(2, 2)] = sigma;
    m[(0, 1)] = -omega.z;
    m[(0, 2)] = omega.y;
    m[(1, 0)] = omega.z;
    m[(1, 2)] = -omega.x;
    m[(2, 0)] = -omega.y;
    m[(2, 1)] = omega.x;
    m[(0, 3)] = nu.x;
    m[(1, 3)] = nu.y;
    m[(2, 3)] = nu.z;
    m
}

/// Inverse of [`sim3_hat`]: reads `(ω, σ, ν)` off a Lie-algebra matrix.
/// The skew and trace parts are symmetrized so tiny numerical asymmetry in
/// the input does not leak into the result.
pub fn sim3_vee(m: &Matrix4<f64>) -> (Vector3<f64>, f64, Vector3<f64>) {
    let omega = Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    );
    let sigma = (m[(0, 0)] + m[(1, 1)] + m[(2, 2)]) / 3.0;
    let nu = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    (omega, sigma, nu)
}

/// Dense matrix exponential by scaling-and-squaring with a long Taylor
/// series. Accurate to ~1e-13 for the moderate-norm matrices used here.
pub fn matrix_exp(m: &Matrix4<f64>) -> Matrix4<f64> {
    let mut scaled = *m;
    let mut squarings = 0u32;
    while scaled.norm() > 0.25 && squarings < 60 {
        scaled /= 2.0;
        squarings += 1;
    }
    let mut acc = Matrix4::identity();
    let mut term = Matrix4::identity();
    for n in 1..=30 {
        term = term * scaled / (n as f64);
        acc += term;
    }
    for _ in 0..squarings {
        acc = acc * acc;
    }
    acc
}

/// Dense principal matrix logarithm by inverse scaling-and-squaring:
/// repeated Denman–Beavers square roots until the argument is close to the
/// identity, then the alternating series of `log(I + X)`.
///
/// Valid for matrices with no eigenvalues on the closed negative real axis,
/// which for homogeneous similarity transforms means rotation angles below π.
pub fn matrix_log(m: &Matrix4<f64>) -> Matrix4<f64> {
    let mut a = *m;
    let mut square_roots = 0u32;
    while (a - Matrix4::identity()).norm() > LOG_SERIES_RADIUS && square_roots < 60 {
        a = matrix_sqrt(&a);
        square_roots += 1;
    }
    let x = a - Matrix4::identity();
    let mut acc = Matrix4::zeros();
    let mut power = x;
    let mut sign = 1.0;
    for n in 1..=40 {
        acc += power * (sign / n as f64);
        power *= x;
        sign = -sign;
    }
    acc * 2f64.powi(square_roots as i32)
}

/// Denman–Beavers iteration for the principal matrix square root.
fn matrix_sqrt(a: &Matrix4<f64>) -> Matrix4<f64> {
    let mut y = *a;
    let mut z = Matrix4::<f64>::identity();
    for _ in 0..60 {
        let y_inv = y.try_inverse().expect("square-root iterate must be invertible");
        let z_inv = z.try_inverse().expect("square-root iterate must be invertible");
        let y_next = (y + z_inv) * 0.5;
        let z_next = (z + y_inv) * 0.5;
        let delta = (y_next - y).norm();
        y = y_next;
        z = z_next;
        if delta < 1e-15 * (1.0 + y.norm()) {
            break;
        }
    }
    y
}

/// Explicit quaternion-coefficient rotation matrix (w, x, y, z), written out
/// so the oracle does not borrow the production conversion path.
pub fn quaternion_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let n = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / n, x / n, y / n, z / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Homogeneous `[sR t; 0 1]` built from raw components.
pub fn homogeneous(w: f64, x: f64, y: f64, z: f64, t: &Vector3<f64>, s: f64) -> Matrix4<f64> {
    let r = quaternion_matrix(w, x, y, z);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * s));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOLERANCE: f64 = 1e-12;

    #[test]
    fn exp_of_nilpotent_translation_is_exact() {
        // [[0, ν], [0, 0]] squares to zero, so exp = I + hat exactly.
        let nu = Vector3::new(1.0, -2.0, 0.5);
        let hat = sim3_hat(&Vector3::zeros(), 0.0, &nu);
        let expected = Matrix4::identity() + hat;
        assert!((matrix_exp(&hat) - expected).norm() < TOLERANCE);
    }

    #[test]
    fn exp_of_diagonal_is_elementwise() {
        let hat = sim3_hat(&Vector3::zeros(), 0.3, &Vector3::zeros());
        let e = matrix_exp(&hat);
        let s = 0.3f64.exp();
        for i in 0..3 {
            assert!((e[(i, i)] - s).abs() < TOLERANCE);
        }
        assert!((e[(3, 3)] - 1.0).abs() < TOLERANCE);
    }

    #[test]
    fn log_inverts_exp() {
        let cases = [
            (Vector3::new(0.4, -0.2, 0.9), 0.5, Vector3::new(2.0, 1.0, -3.0)),
            (Vector3::new(0.0, 0.0, 0.0), 0.0, Vector3::new(1.0, 0.0, 0.0)),
            (Vector3::new(2.5, 0.3, -0.4), -0.8, Vector3::new(-1.0, 4.0, 2.0)),
            (Vector3::new(0.0, 3.0, 0.0), 0.0, Vector3::new(0.0, 0.0, 0.0)),
        ];
        for (omega, sigma, nu) in cases {
            let hat = sim3_hat(&omega, sigma, &nu);
            let back = matrix_log(&matrix_exp(&hat));
            assert!(
                (back - hat).norm() < 1e-10,
                "log∘exp failed for θ={}, σ={sigma}",
                omega.norm()
            );
        }
    }

    #[test]
    fn vee_inverts_hat() {
        let omega = Vector3::new(0.1, 0.2, 0.3);
        let nu = Vector3::new(4.0, 5.0, 6.0);
        let (o, s, n) = sim3_vee(&sim3_hat(&omega, 0.7, &nu));
        assert!((o - omega).norm() < TOLERANCE);
        assert!((s - 0.7).abs() < TOLERANCE);
        assert!((n - nu).norm() < TOLERANCE);
    }

    #[test]
    fn quaternion_matrix_is_orthonormal() {
        let r = quaternion_matrix(0.9, 0.1, -0.3, 0.27);
        let gram = r.transpose() * r;
        assert!((gram - Matrix3::identity()).norm() < TOLERANCE);
        assert!((r.determinant() - 1.0).abs() < TOLERANCE);
    }
}
