use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::estimator::{solve_alignment, AlignmentSolution};

/// Gradients of a loss with respect to the inputs of the weighted alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGradient {
    pub source: Vec<Vector3<f64>>,
    pub target: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

/// Back-propagates `upstream = dL/d(C, r)` (row-major rotation then
/// translation) through the weighted SVD alignment.
///
/// The rotation satisfies `C^T M` symmetric for the cross-covariance `M`, so
/// `dC = C Omega` with skew `Omega` solving `Omega P + P Omega = C^T dM - dM^T C`
/// where `P = C^T M = V diag(lambda) V^T`. In the `V` basis the Sylvester
/// equation decouples into `Omega_ij = A_ij / (lambda_i + lambda_j)`, which is
/// what makes the adjoint `M_bar = C (E - E^T)` below closed form.
pub fn svd_alignment_gradient(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
    upstream: &[f64; 12],
) -> Result<AlignmentGradient> {
    let sol = solve_alignment(source, target, weights).map_err(|e| match e {
        Error::DegenerateGeometry(msg) => Error::DegenerateGradient(msg),
        other => other,
    })?;
    Ok(alignment_adjoint(&sol, source, target, weights, upstream))
}

pub(crate) fn alignment_adjoint(
    sol: &AlignmentSolution,
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
    upstream: &[f64; 12],
) -> AlignmentGradient {
    let n = source.len();
    let rot = sol.pose.rotation;
    let cs = sol.source_centroid;
    let ct = sol.target_centroid;
    let rot_bar_direct = Matrix3::from_row_slice(&upstream[..9]);
    let r_bar = Vector3::new(upstream[9], upstream[10], upstream[11]);

    // r = c_t - C c_s
    let rot_bar = rot_bar_direct - r_bar * cs.transpose();
    let ct_bar = r_bar;
    let cs_bar = -(rot.transpose() * r_bar);

    let v = sol.v;
    let lam = sol.signed_singular;
    let b = v.transpose() * rot.transpose() * rot_bar * v;
    let f = Matrix3::from_fn(|i, j| if i == j { 0.0 } else { b[(i, j)] / (lam[i] + lam[j]) });
    let e = v * f * v.transpose();
    let m_bar = rot * (e - e.transpose());

    let w_sum = sol.weight_sum;
    let mut grad = AlignmentGradient {
        source: vec![Vector3::zeros(); n],
        target: vec![Vector3::zeros(); n],
        weights: vec![0.0; n],
    };
    for i in 0..n {
        let w = weights[i];
        let ds = source[i] - cs;
        let dt = target[i] - ct;
        // M = sum w (t - c_t)(s - c_s)^T; centroid terms cancel since sum w (p - c) = 0.
        grad.target[i] = w * (m_bar * ds) + (w / w_sum) * ct_bar;
        grad.source[i] = w * (m_bar.transpose() * dt) + (w / w_sum) * cs_bar;
        grad.weights[i] = dt.dot(&(m_bar * ds)) + (ds.dot(&cs_bar) + dt.dot(&ct_bar)) / w_sum;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff, relative_error};
    use crate::geometry::PlanarPose;
    use rand::Rng;

    fn instance(seed: u64, n: usize) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f64>) {
        let mut rng = crate::seed::rng(seed);
        let truth = PlanarPose::new(0.3, -0.1, 0.4).to_se3();
        let src: Vec<_> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(1.0..3.0),
                )
            })
            .collect();
        let tgt = src
            .iter()
            .map(|p| {
                truth.apply(p)
                    + Vector3::new(
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                    )
            })
            .collect();
        let w = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        (src, tgt, w)
    }

    fn pack(src: &[Vector3<f64>], tgt: &[Vector3<f64>], w: &[f64]) -> Vec<f64> {
        let mut x = Vec::new();
        for p in src.iter().chain(tgt) {
            x.extend(p.iter());
        }
        x.extend(w);
        x
    }

    fn unpack(x: &[f64], n: usize) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f64>) {
        let v = |k: usize| Vector3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
        (
            (0..n).map(v).collect(),
            (n..2 * n).map(v).collect(),
            x[6 * n..].to_vec(),
        )
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (s, t, w) = instance(1, 6);
        let g = svd_alignment_gradient(&s, &t, &w, &[0.0; 12]).unwrap();
        assert!(g.source.iter().chain(&g.target).all(|v| v.norm() == 0.0));
        assert!(g.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_point_has_zero_gradient() {
        let (s, t, mut w) = instance(2, 6);
        w[3] = 0.0;
        let up: [f64; 12] = core::array::from_fn(|i| (i as f64 * 0.37).sin());
        let g = svd_alignment_gradient(&s, &t, &w, &up).unwrap();
        assert_eq!(g.source[3], Vector3::zeros());
        assert_eq!(g.target[3], Vector3::zeros());
    }

    #[test]
    fn matches_finite_differences_on_random_instances() {
        for seed in 0..20 {
            let n = 6;
            let (s, t, w) = instance(100 + seed, n);
            let mut rng = crate::seed::rng(seed);
            let up: [f64; 12] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let g = svd_alignment_gradient(&s, &t, &w, &up).unwrap();
            let loss = |x: &[f64]| {
                let (s, t, w) = unpack(x, n);
                let pose = solve_alignment(&s, &t, &w).unwrap().pose.to_array();
                pose.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = finite_diff(loss, &pack(&s, &t, &w), 1e-6);
            let an = pack(&g.source, &g.target, &g.weights);
            let err = relative_error(&an, &fd);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn coplanar_points_are_differentiable() {
        let mut rng = crate::seed::rng(8);
        let truth = PlanarPose::new(0.1, 0.05, -0.1).to_se3();
        let n = 8;
        let s: Vec<_> = (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 2.0))
            .collect();
        let t: Vec<_> = s
            .iter()
            .map(|p| truth.apply(p) + Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0))
            .collect();
        let w = vec![1.0; n];
        let up: [f64; 12] = core::array::from_fn(|i| ((i * 7) as f64).cos());
        let g = svd_alignment_gradient(&s, &t, &w, &up).unwrap();
        let loss = |x: &[f64]| {
            let (s, t, w) = unpack(x, n);
            let pose = solve_alignment(&s, &t, &w).unwrap().pose.to_array();
            pose.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_diff(loss, &pack(&s, &t, &w), 1e-6);
        assert!(relative_error(&pack(&g.source, &g.target, &g.weights), &fd) < 1e-4);
    }

    #[test]
    fn degenerate_spectrum_is_reported() {
        let s: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect();
        let err = svd_alignment_gradient(&s, &s, &[1.0; 4], &[1.0; 12]);
        assert!(matches!(err, Err(Error::DegenerateGradient(_))));
    }
}
