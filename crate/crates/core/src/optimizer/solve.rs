use std::collections::BTreeMap;

use log::trace;
use nalgebra::{
    DMatrix, DVector, Matrix2, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6,
};

use super::residual::{prior_residual, projection_residual};
use super::{FactorGraph, LandmarkKey, OptimizerConfig, OptimizerError, SolveReport};
use crate::geometry::{Pose3, Tangent6};
use crate::sensors::SensorId;

/// Relative eigenvalue below which the undamped system counts as singular.
const SINGULAR_TOL: f64 = 1e-9;
/// Damping diagonal is clamped into this range to keep λ·D meaningful for
/// weakly constrained variables.
const DIAG_MIN: f64 = 1e-6;
const DIAG_MAX: f64 = 1e32;
/// Whitened costs below this are zero up to rounding; relative decrease is
/// meaningless there.
const COST_FLOOR: f64 = 1e-16;
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e16;

struct Indexed {
    sensors: Vec<SensorId>,
    /// Block index among the free cameras, per camera.
    free: Vec<Option<usize>>,
    landmark_keys: Vec<LandmarkKey>,
    intrinsics: Vec<crate::geometry::CameraIntrinsics>,
    /// (camera, landmark, measured, whitening) per projection factor.
    projections: Vec<(usize, usize, Vector2<f64>, Matrix2<f64>)>,
    /// (camera, prior, whitening) for every free camera's prior.
    priors: Vec<(usize, Pose3, Matrix6<f64>)>,
    n_free: usize,
}

#[derive(Clone)]
struct State {
    poses: Vec<Pose3>,
    landmarks: Vec<Vector3<f64>>,
}

struct Linearization {
    cost: f64,
    hcc: DMatrix<f64>,
    gc: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
    /// Camera–landmark coupling blocks per landmark.
    hcl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

impl Linearization {
    fn gradient_norm(&self) -> f64 {
        let l: f64 = self.gl.iter().map(|g| g.norm_squared()).sum();
        (self.gc.norm_squared() + l).sqrt()
    }
}

fn whitener2(cov: &Matrix2<f64>, what: &str) -> Result<Matrix2<f64>, OptimizerError> {
    cov.cholesky()
        .and_then(|c| c.l().try_inverse())
        .ok_or_else(|| OptimizerError::NonPositiveDefinite(what.to_string()))
}

fn whitener6(cov: &Matrix6<f64>, what: &str) -> Result<Matrix6<f64>, OptimizerError> {
    cov.cholesky()
        .and_then(|c| c.l().try_inverse())
        .ok_or_else(|| OptimizerError::NonPositiveDefinite(what.to_string()))
}

impl Indexed {
    fn new(graph: &FactorGraph) -> Result<(Self, State), OptimizerError> {
        let sensors: Vec<SensorId> = graph.cameras.keys().copied().collect();
        let cam_pos: BTreeMap<SensorId, usize> =
            sensors.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut n_free = 0;
        let free = sensors
            .iter()
            .map(|s| {
                if graph.cameras[s].fixed {
                    None
                } else {
                    n_free += 1;
                    Some(n_free - 1)
                }
            })
            .collect();
        let landmark_keys: Vec<LandmarkKey> = graph.landmarks.keys().copied().collect();
        let lm_pos: BTreeMap<LandmarkKey, usize> =
            landmark_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let intrinsics = sensors
            .iter()
            .map(|s| {
                graph
                    .intrinsics
                    .get(s)
                    .copied()
                    .ok_or(OptimizerError::MissingIntrinsics(*s))
            })
            .collect::<Result<_, _>>()?;

        let mut projections = Vec::with_capacity(graph.projections.len());
        for f in &graph.projections {
            let c = *cam_pos
                .get(&f.sensor_id)
                .ok_or(OptimizerError::MissingPose(f.sensor_id))?;
            let l = *lm_pos
                .get(&f.landmark)
                .ok_or(OptimizerError::EmptyGraph)?;
            let w = whitener2(
                &f.noise,
                &format!("projection ({}, {:?})", f.sensor_id, f.landmark),
            )?;
            projections.push((c, l, f.measured, w));
        }
        let mut priors = Vec::new();
        for p in &graph.priors {
            let Some(&c) = cam_pos.get(&p.sensor_id) else {
                continue;
            };
            if graph.cameras[&p.sensor_id].fixed {
                continue;
            }
            let w = whitener6(&p.noise, &format!("prior of sensor {}", p.sensor_id))?;
            priors.push((c, p.prior_pose, w));
        }
        let state = State {
            poses: sensors.iter().map(|s| graph.cameras[s].pose).collect(),
            landmarks: landmark_keys
                .iter()
                .map(|k| graph.landmarks[k].position)
                .collect(),
        };
        Ok((
            Self {
                sensors,
                free,
                landmark_keys,
                intrinsics,
                projections,
                priors,
                n_free,
            },
            state,
        ))
    }

    /// Cost of a state, or `None` if it is infeasible (a landmark behind a
    /// camera or a prior residual at the cut locus).
    fn cost(&self, x: &State) -> Option<f64> {
        let mut cost = 0.0;
        for (c, l, m, w) in &self.projections {
            let (r, _, _) =
                projection_residual(&x.poses[*c], &self.intrinsics[*c], &x.landmarks[*l], m)
                    .ok()?;
            cost += (w * r).norm_squared();
        }
        for (c, prior, w) in &self.priors {
            let (r, _) = prior_residual(prior, &x.poses[*c]).ok()?;
            cost += (w * r).norm_squared();
        }
        Some(0.5 * cost)
    }

    fn linearize(&self, x: &State) -> Option<Linearization> {
        let n = 6 * self.n_free;
        let nl = self.landmark_keys.len();
        let mut lin = Linearization {
            cost: 0.0,
            hcc: DMatrix::zeros(n, n),
            gc: DVector::zeros(n),
            hll: vec![Matrix3::zeros(); nl],
            gl: vec![Vector3::zeros(); nl],
            hcl: vec![Vec::new(); nl],
        };
        let mut cost = 0.0;
        for (c, l, m, w) in &self.projections {
            let (r, jp, jx) =
                projection_residual(&x.poses[*c], &self.intrinsics[*c], &x.landmarks[*l], m)
                    .ok()?;
            let r = w * r;
            let jx = w * jx;
            cost += r.norm_squared();
            lin.hll[*l] += jx.transpose() * jx;
            lin.gl[*l] += jx.transpose() * r;
            if let Some(i) = self.free[*c] {
                let jp = w * jp;
                let o = 6 * i;
                let mut block = lin.hcc.fixed_view_mut::<6, 6>(o, o);
                block += jp.transpose() * jp;
                let mut g = lin.gc.fixed_rows_mut::<6>(o);
                g += jp.transpose() * r;
                lin.hcl[*l].push((i, jp.transpose() * jx));
            }
        }
        for (c, prior, w) in &self.priors {
            let (r, j) = prior_residual(prior, &x.poses[*c]).ok()?;
            let r = w * r;
            let j = w * j;
            cost += r.norm_squared();
            let i = self.free[*c].expect("priors are kept for free cameras only");
            let o = 6 * i;
            let mut block = lin.hcc.fixed_view_mut::<6, 6>(o, o);
            block += j.transpose() * j;
            let mut g = lin.gc.fixed_rows_mut::<6>(o);
            g += j.transpose() * r;
        }
        lin.cost = 0.5 * cost;
        Some(lin)
    }

    /// Reduced camera system `S δc = b` after eliminating the landmarks,
    /// with the given damping. Also returns the inverted landmark blocks.
    fn reduce(
        &self,
        lin: &Linearization,
        lambda: f64,
    ) -> Option<(DMatrix<f64>, DVector<f64>, Vec<Matrix3<f64>>)> {
        let mut s = lin.hcc.clone();
        if lambda > 0.0 {
            for k in 0..s.nrows() {
                s[(k, k)] += lambda * lin.hcc[(k, k)].clamp(DIAG_MIN, DIAG_MAX);
            }
        }
        let mut b = -&lin.gc;
        let mut inv = Vec::with_capacity(lin.hll.len());
        for (l, hll) in lin.hll.iter().enumerate() {
            let mut c = *hll;
            if lambda > 0.0 {
                for k in 0..3 {
                    c[(k, k)] += lambda * hll[(k, k)].clamp(DIAG_MIN, DIAG_MAX);
                }
            }
            let ci = c.cholesky()?.inverse();
            for (i, wi) in &lin.hcl[l] {
                let wc = wi * ci;
                let mut bi = b.fixed_rows_mut::<6>(6 * i);
                bi += wc * lin.gl[l];
                for (j, wj) in &lin.hcl[l] {
                    let mut block = s.fixed_view_mut::<6, 6>(6 * i, 6 * j);
                    block -= wc * wj.transpose();
                }
            }
            inv.push(ci);
        }
        Some((s, b, inv))
    }

    fn step(&self, lin: &Linearization, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let (s, b, cinv) = self.reduce(lin, lambda)?;
        let dc = if s.nrows() == 0 {
            DVector::zeros(0)
        } else {
            s.cholesky()?.solve(&b)
        };
        let dl = (0..lin.hll.len())
            .map(|l| {
                let mut rhs = -lin.gl[l];
                for (i, w) in &lin.hcl[l] {
                    rhs -= w.transpose() * dc.fixed_rows::<6>(6 * i);
                }
                cinv[l] * rhs
            })
            .collect();
        Some((dc, dl))
    }

    fn apply(&self, x: &State, dc: &DVector<f64>, dl: &[Vector3<f64>]) -> State {
        let poses = x
            .poses
            .iter()
            .zip(&self.free)
            .map(|(p, f)| match f {
                Some(i) => p.retract(&Tangent6(Vector6::from(dc.fixed_rows::<6>(6 * i)))),
                None => *p,
            })
            .collect();
        let landmarks = x.landmarks.iter().zip(dl).map(|(p, d)| p + d).collect();
        State { poses, landmarks }
    }

    /// Rejects systems that stay rank-deficient after gauge fixing, naming
    /// the variables that span the null space.
    fn check_rank(&self, lin: &Linearization) -> Result<(), OptimizerError> {
        let mut bad_landmarks = Vec::new();
        for (l, h) in lin.hll.iter().enumerate() {
            let e = h.symmetric_eigenvalues();
            let max = e.max();
            if !(e.min() > SINGULAR_TOL * max) {
                bad_landmarks.push(self.landmark_keys[l]);
            }
        }
        if !bad_landmarks.is_empty() {
            return Err(OptimizerError::SingularSystem {
                cameras: Vec::new(),
                landmarks: bad_landmarks,
            });
        }
        let (s, _, _) = self.reduce(lin, 0.0).ok_or(OptimizerError::SingularSystem {
            cameras: Vec::new(),
            landmarks: Vec::new(),
        })?;
        if s.nrows() == 0 {
            return Ok(());
        }
        let sym = (&s + s.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
        let mut cameras = Vec::new();
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > SINGULAR_TOL * max {
                continue;
            }
            let v = eig.eigenvectors.column(k);
            for (c, f) in self.free.iter().enumerate() {
                if let Some(i) = f {
                    if v.rows(6 * i, 6).norm() > 0.1 && !cameras.contains(&self.sensors[c]) {
                        cameras.push(self.sensors[c]);
                    }
                }
            }
        }
        if cameras.is_empty() {
            Ok(())
        } else {
            cameras.sort_unstable();
            Err(OptimizerError::SingularSystem {
                cameras,
                landmarks: Vec::new(),
            })
        }
    }
}

/// Levenberg-Marquardt over all non-fixed camera poses and all landmarks.
///
/// Each iteration eliminates the landmarks (3×3 blocks) and solves the dense
/// reduced camera system by Cholesky. Pose covariances are read off the
/// inverse of the undamped reduced system at the solution.
pub fn solve(graph: &FactorGraph, cfg: &OptimizerConfig) -> Result<SolveReport, OptimizerError> {
    if graph.landmarks.is_empty() {
        return Err(OptimizerError::EmptyGraph);
    }
    let (prob, mut x) = Indexed::new(graph)?;
    let mut lin = prob.linearize(&x).ok_or_else(|| {
        OptimizerError::NonPositiveDefinite("initial state is infeasible".into())
    })?;
    prob.check_rank(&lin)?;

    let initial_cost = lin.cost;
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    loop {
        if lin.cost <= COST_FLOOR || lin.gradient_norm() < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        iterations += 1;
        let trial = prob
            .step(&lin, lambda)
            .map(|(dc, dl)| prob.apply(&x, &dc, &dl));
        let trial_cost = trial.as_ref().and_then(|t| prob.cost(t));
        match (trial, trial_cost) {
            (Some(t), Some(c)) if c < lin.cost => {
                let rel = (lin.cost - c) / lin.cost;
                trace!("iter {iterations}: cost {c:.6e} (λ = {lambda:.1e})");
                x = t;
                lin = prob
                    .linearize(&x)
                    .expect("accepted states are feasible");
                lambda = (lambda / 3.0).max(LAMBDA_MIN);
                if rel < cfg.relative_tolerance {
                    converged = true;
                    break;
                }
            }
            _ => {
                lambda *= 2.5;
                if lambda > LAMBDA_MAX {
                    // no representable step lowers the cost any further
                    converged = true;
                    break;
                }
            }
        }
    }

    let (s, _, _) = prob
        .reduce(&lin, 0.0)
        .ok_or(OptimizerError::SingularSystem {
            cameras: Vec::new(),
            landmarks: Vec::new(),
        })?;
    let mut pose_covariances = BTreeMap::new();
    if s.nrows() > 0 {
        let sinv = s
            .cholesky()
            .ok_or_else(|| OptimizerError::SingularSystem {
                cameras: prob
                    .sensors
                    .iter()
                    .zip(&prob.free)
                    .filter(|(_, f)| f.is_some())
                    .map(|(s, _)| *s)
                    .collect(),
                landmarks: Vec::new(),
            })?
            .inverse();
        for (c, f) in prob.free.iter().enumerate() {
            if let Some(i) = f {
                let block: Matrix6<f64> = sinv.fixed_view::<6, 6>(6 * i, 6 * i).into();
                pose_covariances.insert(prob.sensors[c], (block + block.transpose()) * 0.5);
            }
        }
    }

    Ok(SolveReport {
        converged,
        iterations,
        initial_cost,
        final_cost: lin.cost,
        poses: prob.sensors.iter().copied().zip(x.poses).collect(),
        pose_covariances,
        landmarks: prob
            .landmark_keys
            .iter()
            .copied()
            .zip(x.landmarks)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle, umeyama_align};
    use crate::optimizer::{build_graph, OptimizerConfig};
    use crate::test_support::{hypothesis_from_points, ring_rig, skeleton_points, Rig};
    use crate::association::PersonHypothesis;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn people(rig: &Rig, n: usize, sigma: f64, seed: u64) -> Vec<PersonHypothesis> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let root = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.0);
                let pts = skeleton_points(root, rng.random_range(1.6..1.9), rng.random_range(-3.0..3.0));
                hypothesis_from_points(k as u64, rig, &pts, sigma, seed)
            })
            .collect()
    }

    fn perturb(poses: &BTreeMap<SensorId, Pose3>, t: f64, r_deg: f64, seed: u64) -> BTreeMap<SensorId, Pose3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        poses
            .iter()
            .map(|(&s, p)| {
                if s == 0 {
                    return (s, *p);
                }
                let dir = |rng: &mut ChaCha8Rng| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                    .normalize()
                };
                let rho = dir(&mut rng) * t;
                let phi = dir(&mut rng) * r_deg.to_radians();
                (s, p.retract(&Tangent6::new(rho, phi)))
            })
            .collect()
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let rig = ring_rig(4, 5.0, 2.6);
        let hyps = people(&rig, 3, 0.0, 1);
        let g = build_graph(&hyps, &rig.poses, &BTreeMap::new(), &rig.intrinsics, &Default::default())
            .unwrap();
        let rep = solve(&g, &OptimizerConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 2);
        assert!(rep.final_cost < 1e-12);
        assert_eq!(rep.pose_covariances.len(), 3);
    }

    #[test]
    fn gauge_camera_is_untouched_and_cost_decreases() {
        let rig = ring_rig(5, 5.0, 2.6);
        let hyps = people(&rig, 4, 1.0, 2);
        let init = perturb(&rig.poses, 0.1, 3.0, 2);
        let g = build_graph(&hyps, &init, &BTreeMap::new(), &rig.intrinsics, &Default::default())
            .unwrap();
        let rep = solve(&g, &OptimizerConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.final_cost <= rep.initial_cost);
        let before = init[&0];
        let after = rep.poses[&0];
        assert_eq!(before.rotation.coords, after.rotation.coords);
        assert_eq!(before.translation, after.translation);
        assert!(!rep.pose_covariances.contains_key(&0));
    }

    fn gauge_aligned_errors(
        truth: &BTreeMap<SensorId, Pose3>,
        est: &BTreeMap<SensorId, Pose3>,
    ) -> (f64, f64) {
        // translation/rotation/scale of the whole rig are not observable from
        // projections alone, so compare after a similarity alignment
        let src: Vec<_> = est.values().map(|p| p.center()).collect();
        let dst: Vec<_> = est.keys().map(|s| truth[s].center()).collect();
        let sim = umeyama_align(&src, &dst, true).unwrap();
        let mut tmax: f64 = 0.0;
        let mut rmax: f64 = 0.0;
        for (s, p) in est {
            tmax = tmax.max((sim.apply(&p.center()) - truth[s].center()).norm());
            let r = sim.rotation * p.rotation_matrix();
            rmax = rmax.max(rotation_angle(&r, &truth[s].rotation_matrix()).unwrap().to_degrees());
        }
        (tmax, rmax)
    }

    #[test]
    fn recovers_perturbed_four_camera_rig() {
        // 4 cameras, 30 landmarks spread through the room, 0.1 m / 5°
        // perturbation, 1 px noise. Individual seeds are limited by the
        // information in 30 points (rotation sd ≈ 0.2° here), so the bound is
        // on the 20-seed mean, with a looser per-seed cap.
        let rig = ring_rig(4, 5.0, 2.6);
        let (mut t_sum, mut r_sum) = (0.0, 0.0);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let hyps: Vec<_> = (0..2)
                .map(|k| {
                    let pts: BTreeMap<_, _> = (0..15u8)
                        .map(|j| {
                            let p = Vector3::new(
                                rng.random_range(-2.8..2.8),
                                rng.random_range(-2.8..2.8),
                                rng.random_range(0.0..2.5),
                            );
                            (j, p)
                        })
                        .collect();
                    hypothesis_from_points(k, &rig, &pts, 1.0, seed)
                })
                .collect();
            let init = perturb(&rig.poses, 0.1, 5.0, 200 + seed);
            let g = build_graph(&hyps, &init, &BTreeMap::new(), &rig.intrinsics, &Default::default())
                .unwrap();
            assert_eq!(g.landmarks.len(), 30);
            let rep = solve(&g, &OptimizerConfig::default()).unwrap();
            assert!(rep.converged);
            let (t, r) = gauge_aligned_errors(&rig.poses, &rep.poses);
            assert!(t < 0.04 && r < 0.6, "seed {seed}: {t:.4} m, {r:.4}°");
            t_sum += t;
            r_sum += r;
        }
        assert!(t_sum / 20.0 < 0.02, "mean {:.4} m", t_sum / 20.0);
        assert!(r_sum / 20.0 < 0.3, "mean {:.4}°", r_sum / 20.0);
    }

    #[test]
    fn unprioritized_graph_is_singular() {
        // without priors the overall scale is free even with camera 0 fixed
        let rig = ring_rig(2, 5.0, 2.6);
        let hyps = people(&rig, 1, 0.0, 3);
        let mut g = build_graph(&hyps, &rig.poses, &BTreeMap::new(), &rig.intrinsics, &Default::default())
            .unwrap();
        g.priors.clear();
        match solve(&g, &OptimizerConfig::default()) {
            Err(OptimizerError::SingularSystem { cameras, .. }) => assert_eq!(cameras, vec![1]),
            other => panic!("expected SingularSystem, got {other:?}"),
        }
    }

    #[test]
    fn collinear_landmarks_without_priors_are_singular() {
        let rig = ring_rig(3, 5.0, 2.6);
        let pts: BTreeMap<_, _> = (0..5u8)
            .map(|j| (j, Vector3::new(0.0, 0.0, 0.5 + 0.2 * j as f64)))
            .collect();
        let h = hypothesis_from_points(0, &rig, &pts, 0.0, 0);
        let mut g = build_graph(&[h], &rig.poses, &BTreeMap::new(), &rig.intrinsics, &Default::default())
            .unwrap();
        g.priors.clear();
        assert!(matches!(
            solve(&g, &OptimizerConfig::default()),
            Err(OptimizerError::SingularSystem { .. })
        ));
    }

    #[test]
    fn common_covariance_scale_leaves_argmin_unchanged() {
        let rig = ring_rig(4, 5.0, 2.6);
        let hyps = people(&rig, 3, 1.0, 4);
        let init = perturb(&rig.poses, 0.1, 3.0, 4);
        let cfg = OptimizerConfig {
            relative_tolerance: 0.0,
            gradient_tolerance: 0.0,
            max_iterations: 200,
            ..Default::default()
        };
        let g = build_graph(&hyps, &init, &BTreeMap::new(), &rig.intrinsics, &cfg).unwrap();
        let mut scaled = g.clone();
        for f in scaled.projections.iter_mut() {
            f.noise *= 7.3;
        }
        for p in scaled.priors.iter_mut() {
            p.noise *= 7.3;
        }
        let a = solve(&g, &cfg).unwrap();
        let b = solve(&scaled, &cfg).unwrap();
        // the weakly constrained scale direction amplifies rounding, so
        // compare after a similarity alignment
        let src: Vec<_> = b.poses.values().map(|p| p.center()).collect();
        let dst: Vec<_> = a.poses.values().map(|p| p.center()).collect();
        let sim = umeyama_align(&src, &dst, true).unwrap();
        for (s, pa) in &a.poses {
            let pb = b.poses[s];
            assert!((sim.apply(&pb.center()) - pa.center()).norm() < 1e-8);
            let rb = sim.rotation * pb.rotation_matrix();
            assert!(rotation_angle(&rb, &pa.rotation_matrix()).unwrap() < 1e-8);
        }
        assert!((a.final_cost - 7.3 * b.final_cost).abs() < 1e-6 * a.final_cost);
    }

    #[test]
    fn marginal_covariance_shrinks_with_more_observations() {
        let rig = ring_rig(4, 5.0, 2.6);
        let hyps = people(&rig, 6, 0.0, 5);
        let cfg = OptimizerConfig::default();
        let mut prev: Option<Matrix6<f64>> = None;
        for k in 1..=hyps.len() {
            let g = build_graph(&hyps[..k], &rig.poses, &BTreeMap::new(), &rig.intrinsics, &cfg)
                .unwrap();
            let rep = solve(&g, &cfg).unwrap();
            let cov = rep.pose_covariances[&1];
            if let Some(p) = prev {
                // p − cov must be positive semi-definite
                let d = p - cov;
                let min = d.symmetric_eigenvalues().min();
                assert!(min >= -1e-12 * p.norm(), "k = {k}: {min}");
            }
            prev = Some(cov);
        }
    }

    #[test]
    fn covariance_matches_finite_difference_hessian_on_tiny_problem() {
        // oracle: the pose marginal of the inverse of the full Gauss–Newton
        // Hessian assembled from numerically differentiated residuals
        let rig = ring_rig(3, 5.0, 2.6);
        let mut hyps = people(&rig, 1, 0.0, 6);
        for v in hyps[0].views.values_mut() {
            v.joints.retain(|j, _| [0, 5, 11, 16].contains(j));
        }
        let g = build_graph(&hyps, &rig.poses, &BTreeMap::new(), &rig.intrinsics, &Default::default())
            .unwrap();
        let rep = solve(&g, &Default::default()).unwrap();
        let (prob, x) = Indexed::new(&g).unwrap();
        let nl = prob.landmark_keys.len();
        let n = 6 * prob.n_free + 3 * nl;
        let residuals = |x: &State| -> DVector<f64> {
            let mut r = Vec::new();
            for (c, l, m, w) in &prob.projections {
                let (e, _, _) =
                    projection_residual(&x.poses[*c], &prob.intrinsics[*c], &x.landmarks[*l], m)
                        .unwrap();
                r.extend((w * e).iter());
            }
            for (c, p, w) in &prob.priors {
                let (e, _) = prior_residual(p, &x.poses[*c]).unwrap();
                r.extend((w * e).iter());
            }
            DVector::from_vec(r)
        };
        let r0 = residuals(&x);
        let mut jac = DMatrix::zeros(r0.len(), n);
        let h = 1e-6;
        for k in 0..n {
            let mut dc = DVector::zeros(6 * prob.n_free);
            let mut dl = vec![Vector3::zeros(); nl];
            let set = |v: f64, dc: &mut DVector<f64>, dl: &mut Vec<Vector3<f64>>| {
                if k < dc.len() {
                    dc[k] = v;
                } else {
                    let i = k - dc.len();
                    dl[i / 3][i % 3] = v;
                }
            };
            set(h, &mut dc, &mut dl);
            let plus = residuals(&prob.apply(&x, &dc, &dl));
            set(-h, &mut dc, &mut dl);
            let minus = residuals(&prob.apply(&x, &dc, &dl));
            jac.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        let hinv = (jac.transpose() * &jac).try_inverse().unwrap();
        for (c, f) in prob.free.iter().enumerate() {
            let i = f.unwrap_or(usize::MAX);
            if i == usize::MAX {
                continue;
            }
            let oracle: Matrix6<f64> = hinv.fixed_view::<6, 6>(6 * i, 6 * i).into();
            let got = rep.pose_covariances[&prob.sensors[c]];
            assert!((got - oracle).norm() < 1e-4 * oracle.norm(), "{got} vs {oracle}");
        }
    }

    #[test]
    fn graph_without_gauge_camera_relies_on_priors() {
        let rig = ring_rig(4, 5.0, 2.6);
        let mut hyps = people(&rig, 2, 0.5, 7);
        for h in hyps.iter_mut() {
            h.views.remove(&0);
        }
        let g = build_graph(&hyps, &rig.poses, &BTreeMap::new(), &rig.intrinsics, &Default::default())
            .unwrap();
        assert!(!g.cameras.contains_key(&0));
        let rep = solve(&g, &Default::default()).unwrap();
        assert_eq!(rep.pose_covariances.len(), 3);
    }
}
