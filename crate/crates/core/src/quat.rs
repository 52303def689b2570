//! Quaternion helpers for spinor fibers.
//!
//! A spinor value at a vertex is a quaternion stored as `[w, x, y, z]`.
//! Clifford multiplication and spin transport act from the left; the
//! quaternionic symmetry acts from the right.

use nalgebra::{Matrix4, Quaternion};

pub type Quat = [f64; 4];

pub const ONE: Quat = [1.0, 0.0, 0.0, 0.0];
pub const I: Quat = [0.0, 1.0, 0.0, 0.0];
pub const J: Quat = [0.0, 0.0, 1.0, 0.0];
pub const K: Quat = [0.0, 0.0, 0.0, 1.0];

fn to_na(q: Quat) -> Quaternion<f64> {
    Quaternion::new(q[0], q[1], q[2], q[3])
}

fn from_na(q: Quaternion<f64>) -> Quat {
    [q.w, q.i, q.j, q.k]
}

pub fn mul(a: Quat, b: Quat) -> Quat {
    from_na(to_na(a) * to_na(b))
}

pub fn norm(q: Quat) -> f64 {
    to_na(q).norm()
}

/// Matrix of `x ↦ a x` in the `[w, x, y, z]` basis.
pub fn left_matrix(a: Quat) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for (c, e) in [ONE, I, J, K].into_iter().enumerate() {
        let col = mul(a, e);
        for r in 0..4 {
            m[(r, c)] = col[r];
        }
    }
    m
}

/// Unit tangent direction at angle `phi` in the vertex frame, as the pure
/// quaternion `cos φ i + sin φ j`.
pub fn direction(phi: f64) -> Quat {
    [0.0, phi.cos(), phi.sin(), 0.0]
}

/// Spinor lift of a frame rotation by `angle`: `exp(angle k / 2)`.
pub fn spin_rotation(angle: f64) -> Quat {
    let h = 0.5 * angle;
    [h.cos(), 0.0, 0.0, h.sin()]
}

/// Right-multiplies every 4-block of `field` by `q`.
pub fn right_act(field: &[f64], q: Quat) -> Vec<f64> {
    field
        .chunks_exact(4)
        .flat_map(|c| mul([c[0], c[1], c[2], c[3]], q))
        .collect()
}

/// Left-multiplies every 4-block of `field` by `q`.
pub fn left_act(field: &[f64], q: Quat) -> Vec<f64> {
    field
        .chunks_exact(4)
        .flat_map(|c| mul(q, [c[0], c[1], c[2], c[3]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clifford_relation() {
        // σ(X)σ(Y) + σ(Y)σ(X) = −2 g(X, Y)
        let (a, b) = (0.3, 1.9);
        let x = direction(a);
        let y = direction(b);
        let s = mul(x, y);
        let t = mul(y, x);
        let g = (a - b).cos();
        assert!((s[0] + t[0] + 2.0 * g).abs() < 1e-15);
        assert!(s[1..].iter().zip(&t[1..]).all(|(p, q)| (p + q).abs() < 1e-15));
    }

    #[test]
    fn spin_rotation_rotates_directions() {
        let q = spin_rotation(0.7);
        let qc = [q[0], -q[1], -q[2], -q[3]];
        let rotated = mul(mul(q, direction(0.2)), qc);
        let expect = direction(0.9);
        for r in 0..4 {
            assert!((rotated[r] - expect[r]).abs() < 1e-15);
        }
    }

    #[test]
    fn left_matrix_matches_product() {
        let a = [0.1, -0.4, 0.7, 0.2];
        let b = [0.5, 0.3, -0.2, 0.9];
        let m = left_matrix(a) * nalgebra::Vector4::from(b);
        let p = mul(a, b);
        for r in 0..4 {
            assert!((m[r] - p[r]).abs() < 1e-15);
        }
    }
}
