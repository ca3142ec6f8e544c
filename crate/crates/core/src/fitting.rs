//! Multi-view triangulation and hand parameter fitting.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, SMatrix, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{kabsch, Quat, Vec3};
use crate::par;
use crate::skeleton::{rotated_joint, HandParams, JointSet, SkeletonTemplate, NUM_JOINTS, NUM_ROTATED, PROXIMAL};

/// Pinhole camera; `rotation`/`translation` map world points into the
/// camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalib {
    pub id: String,
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraCalib {
    pub fn new(id: String, intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vec3) -> Result<CameraCalib> {
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) {
            return Err(Error::invalid(format!(
                "camera {id}: intrinsics must be upper-triangular with positive focal lengths"
            )));
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("camera {id}: K[2][2] must be 1")));
        }
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > 1e-6 || rotation.determinant() < 0.0 {
            return Err(Error::invalid(format!("camera {id}: rotation is not a proper orthonormal matrix")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("camera {id}: non-finite translation")));
        }
        Ok(CameraCalib {
            id,
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Camera looking from `center` towards `target` with focal length `f`
    /// pixels and principal point `(cx, cy)`.
    pub fn look_at(id: impl Into<String>, center: Vec3, target: Vec3, f: f64, cx: f64, cy: f64) -> Result<CameraCalib> {
        let z = (target - center).normalize();
        let helper = if z.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let x = helper.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        CameraCalib::new(id.into(), k, rotation, -(rotation * center))
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Pixel coordinates, or `None` for points at or behind the camera plane.
    pub fn project(&self, x: &Vec3) -> Option<Vector2<f64>> {
        let c = self.to_camera(x);
        if c.z <= 0.0 {
            return None;
        }
        let p = self.intrinsics * (c / c.z);
        Some(Vector2::new(p.x, p.y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation2D {
    pub camera_id: String,
    pub point: Vector2<f64>,
    pub confidence: f64,
}

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulated {
    pub point: Vec3,
    /// RMS reprojection error over the views used, in pixels.
    pub residual_px: f64,
    pub views: usize,
}

fn rms_residual(views: &[(&CameraCalib, Vector2<f64>)], x: &Vec3) -> f64 {
    let sq: f64 = views
        .iter()
        .map(|(c, uv)| c.project(x).map_or(f64::INFINITY, |p| (p - uv).norm_squared()))
        .sum();
    (sq / views.len() as f64).sqrt()
}

/// DLT triangulation of one point followed by one Gauss-Newton step on the
/// pixel reprojection error.
pub fn triangulate_point(obs: &[Observation2D], cams: &[CameraCalib], conf_threshold: f64) -> Result<Triangulated> {
    let by_id: HashMap<&str, &CameraCalib> = cams.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut views = Vec::with_capacity(obs.len());
    for o in obs {
        if !(0.0..=1.0).contains(&o.confidence) {
            return Err(Error::invalid(format!("confidence {} outside [0, 1]", o.confidence)));
        }
        if o.confidence < conf_threshold {
            continue;
        }
        let cam = by_id
            .get(o.camera_id.as_str())
            .ok_or_else(|| Error::invalid(format!("observation references unknown camera {:?}", o.camera_id)))?;
        views.push((*cam, o.point));
    }
    if views.len() < 2 {
        return Err(Error::InsufficientViews { got: views.len() });
    }

    // Rows in normalized image coordinates so the system is well scaled.
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, (cam, uv)) in views.iter().enumerate() {
        let k_inv = cam
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::DegenerateGeometry(format!("camera {} has singular intrinsics", cam.id)))?;
        let n = k_inv * Vec3::new(uv.x, uv.y, 1.0);
        let (x, y) = (n.x / n.z, n.y / n.z);
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
        p.set_column(3, &cam.translation);
        for c in 0..4 {
            a[(2 * i, c)] = x * p[(2, c)] - p[(0, c)];
            a[(2 * i + 1, c)] = y * p[(2, c)] - p[(1, c)];
        }
    }
    // Scale-free degeneracy test needs the full spectrum of AᵀA.
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let (s1, s3) = (eig.eigenvalues[order[0]].max(0.0).sqrt(), eig.eigenvalues[order[2]].max(0.0).sqrt());
    if s3 <= 1e-9 * s1 {
        return Err(Error::DegenerateGeometry(format!(
            "projection constraints are rank deficient (σ₃/σ₁ = {:.2e})",
            s3 / s1.max(f64::MIN_POSITIVE)
        )));
    }
    let h = Vector4::from_iterator(eig.eigenvectors.column(order[3]).iter().copied());
    if h.w.abs() < 1e-12 * h.norm() {
        return Err(Error::DegenerateGeometry("triangulated point is at infinity".into()));
    }
    let mut x = Vec3::new(h.x / h.w, h.y / h.w, h.z / h.w);
    if views.iter().any(|(c, _)| c.to_camera(&x).z <= 1e-9) {
        return Err(Error::DegenerateGeometry(
            "triangulated point is not in front of every camera (coincident camera centers?)".into(),
        ));
    }

    // One Gauss-Newton step with the analytic projection Jacobian.
    let mut jtj = Matrix3::<f64>::zeros();
    let mut jtr = Vec3::zeros();
    for (cam, uv) in &views {
        let c = cam.to_camera(&x);
        let k = &cam.intrinsics;
        let p = k * (c / c.z);
        let r = Vector2::new(p.x - uv.x, p.y - uv.y);
        // d(K c / c_z)/dc, top two rows
        let iz = 1.0 / c.z;
        let dn = SMatrix::<f64, 2, 3>::new(iz, 0.0, -c.x * iz * iz, 0.0, iz, -c.y * iz * iz);
        let kk = SMatrix::<f64, 2, 2>::new(k[(0, 0)], k[(0, 1)], 0.0, k[(1, 1)]);
        let j = kk * dn * cam.rotation;
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
    }
    if let Some(step) = jtj.try_inverse().map(|inv| inv * jtr) {
        let candidate = x - step;
        if rms_residual(&views, &candidate) <= rms_residual(&views, &x) {
            x = candidate;
        }
    }
    Ok(Triangulated {
        point: x,
        residual_px: rms_residual(&views, &x),
        views: views.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    /// Pose regularizer weight.
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: 1e-3,
            max_iters: 200,
            tol: 1e-10,
            warm_start: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.tol > 0.0) || self.max_iters < 1 {
            return Err(Error::invalid(format!(
                "fit config needs λ ≥ 0, tol > 0 and max_iters ≥ 1 (got λ={}, tol={}, max_iters={})",
                self.lambda, self.tol, self.max_iters
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: Vec<HandParams>,
    /// RMS joint error per frame (meters).
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

const N_PARAMS: usize = 6 + 3 * NUM_ROTATED;
const N_RES: usize = 3 * NUM_JOINTS + 3 * NUM_ROTATED;
const FD_STEP: f64 = 1e-6;
/// Floor on the joint error norm when forming the reweighting.
const IRLS_FLOOR: f64 = 1e-12;
const DAMPING_RETRIES: usize = 12;

fn apply_increment(p: &HandParams, delta: &[f64]) -> HandParams {
    let v = |i: usize| Vec3::new(delta[i], delta[i + 1], delta[i + 2]);
    let mut out = p.clone();
    out.global_rot = p.global_rot * Quat::from_rotation_vector(&v(0));
    out.translation = p.translation + v(3);
    for k in 0..NUM_ROTATED {
        out.local_rots[k] = p.local_rots[k] * Quat::from_rotation_vector(&v(6 + 3 * k));
    }
    out
}

struct Objective<'a> {
    template: &'a SkeletonTemplate,
    target: &'a [Vec3],
    lambda: f64,
}

impl Objective<'_> {
    fn joints(&self, p: &HandParams) -> Vec<Vec3> {
        self.template.forward_kinematics(p).expect("beta length checked").into_positions()
    }

    fn joint_error(&self, p: &HandParams) -> f64 {
        self.joints(p)
            .iter()
            .zip(self.target)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    fn pose_penalty(&self, p: &HandParams) -> f64 {
        p.local_rots.iter().map(|q| q.to_rotation_vector().norm_squared()).sum()
    }

    /// `‖J − target‖ + λ Σ |θ_k|²`.
    fn value(&self, p: &HandParams) -> f64 {
        self.joint_error(p) + self.lambda * self.pose_penalty(p)
    }

    /// Weight that makes `w²‖r‖²` majorize `‖r‖` at the current point.
    fn weight(&self, p: &HandParams) -> f64 {
        1.0 / (2.0 * self.joint_error(p).max(IRLS_FLOOR)).sqrt()
    }

    fn residuals(&self, p: &HandParams, weight: f64) -> DVector<f64> {
        let mut r = DVector::zeros(N_RES);
        for (j, (a, b)) in self.joints(p).iter().zip(self.target).enumerate() {
            r.fixed_rows_mut::<3>(3 * j).copy_from(&((a - b) * weight));
        }
        let s = self.lambda.sqrt();
        for (k, q) in p.local_rots.iter().enumerate() {
            r.fixed_rows_mut::<3>(3 * NUM_JOINTS + 3 * k).copy_from(&(q.to_rotation_vector() * s));
        }
        r
    }

    /// Residuals and forward-difference Jacobian with respect to the pose
    /// increment.
    fn linearize(&self, p: &HandParams, weight: f64) -> (DVector<f64>, DMatrix<f64>) {
        let r0 = self.residuals(p, weight);
        let mut jac = DMatrix::<f64>::zeros(N_RES, N_PARAMS);
        let mut delta = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            delta[i] = FD_STEP;
            let ri = self.residuals(&apply_increment(p, &delta), weight);
            jac.set_column(i, &((ri - &r0) / FD_STEP));
            delta[i] = 0.0;
        }
        (r0, jac)
    }

    fn shape_jacobian(&self, p: &HandParams, weight: f64, r0: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::<f64>::zeros(N_RES, p.beta.len());
        let mut q = p.clone();
        for i in 0..p.beta.len() {
            q.beta[i] += FD_STEP;
            let ri = self.residuals(&q, weight);
            jac.set_column(i, &((ri - r0) / FD_STEP));
            q.beta[i] = p.beta[i];
        }
        jac
    }
}

struct FrameFit {
    params: HandParams,
    iterations: usize,
}

fn damped(m: &DMatrix<f64>, mu: f64) -> DMatrix<f64> {
    let mut a = m.clone();
    for d in 0..a.nrows() {
        a[(d, d)] += mu * m[(d, d)].max(1e-12);
    }
    a
}

fn stalled(step: f64, decrease: f64, value: f64, cfg: &FitConfig) -> bool {
    step < cfg.tol || decrease <= cfg.tol * 1e-3 * value.max(1e-300)
}

/// Levenberg-Marquardt over root rotation, translation and local rotations
/// with the shape held fixed. The joint term is handled by iterative
/// reweighting; a step is only accepted if it lowers the true objective.
fn fit_pose(obj: &Objective, init: HandParams, cfg: &FitConfig) -> FrameFit {
    let mut p = init;
    let mut value = obj.value(&p);
    let mut mu = 1e-3;
    for it in 1..=cfg.max_iters {
        let (r0, jac) = obj.linearize(&p, obj.weight(&p));
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r0;
        if g.amax() < 1e-300 {
            return FrameFit { params: p, iterations: it };
        }
        let mut accepted = None;
        for _ in 0..DAMPING_RETRIES {
            let Some(step) = damped(&jtj, mu).cholesky().map(|c| -c.solve(&g)) else {
                mu *= 4.0;
                continue;
            };
            let cand = apply_increment(&p, step.as_slice());
            let v = obj.value(&cand);
            if v <= value {
                accepted = Some((cand, v, step.amax()));
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 4.0;
        }
        // no accepted step at any damping means the point is stationary
        let Some((cand, v, step)) = accepted else {
            return FrameFit { params: p, iterations: it };
        };
        let decrease = value - v;
        p = cand;
        value = v;
        if stalled(step, decrease, value, cfg) {
            return FrameFit { params: p, iterations: it };
        }
    }
    FrameFit { params: p, iterations: cfg.max_iters }
}

/// Per-frame normal-equation blocks for the joint refinement.
struct Blocks {
    u: DMatrix<f64>,
    w: DMatrix<f64>,
    v: DMatrix<f64>,
    g: DVector<f64>,
    gb: DVector<f64>,
}

/// Levenberg-Marquardt over the shared shape and every frame's pose at once.
/// The shape couples all frames, so the normal equations are solved through
/// the Schur complement on the shape block. Returns iterations used and
/// whether it stopped on a convergence test.
fn refine_joint(objs: &[Objective], params: &mut [HandParams], cfg: &FitConfig) -> (usize, bool) {
    let total = |ps: &[HandParams]| -> f64 {
        par::compensated_sum(objs.iter().zip(ps).map(|(o, p)| o.value(p)))
    };
    let bdim = params[0].beta.len();
    let mut value = total(params);
    let mut mu = 1e-3;
    for it in 1..=cfg.max_iters {
        let blocks: Vec<Blocks> = par::map_range(objs.len(), |n| {
            let (o, p) = (&objs[n], &params[n]);
            let weight = o.weight(p);
            let (r0, jp) = o.linearize(p, weight);
            let jb = o.shape_jacobian(p, weight, &r0);
            let jpt = jp.transpose();
            let jbt = jb.transpose();
            Blocks { u: &jpt * &jp, w: &jpt * &jb, v: &jbt * &jb, g: &jpt * &r0, gb: &jbt * &r0 }
        });
        let grad = blocks.iter().map(|b| b.g.amax()).fold(0.0, f64::max);
        let gb_sum = blocks.iter().fold(DVector::zeros(bdim), |acc, b| acc + &b.gb);
        if grad.max(gb_sum.amax()) < 1e-300 {
            return (it, true);
        }
        let v_sum = blocks.iter().fold(DMatrix::zeros(bdim, bdim), |acc, b| acc + &b.v);
        let mut accepted = None;
        for _ in 0..DAMPING_RETRIES {
            let Some(solves) = blocks
                .iter()
                .map(|b| {
                    let c = damped(&b.u, mu).cholesky()?;
                    Some((c.solve(&b.w), c.solve(&b.g)))
                })
                .collect::<Option<Vec<_>>>()
            else {
                mu *= 4.0;
                continue;
            };
            let mut s = damped(&v_sum, mu);
            let mut rhs = gb_sum.clone();
            for (b, (uw, ug)) in blocks.iter().zip(&solves) {
                s -= b.w.transpose() * uw;
                rhs -= b.w.transpose() * ug;
            }
            let Some(dbeta) = s.cholesky().map(|c| -c.solve(&rhs)) else {
                mu *= 4.0;
                continue;
            };
            let mut step = dbeta.amax();
            let cand: Vec<HandParams> = solves
                .iter()
                .zip(params.iter())
                .map(|((uw, ug), p)| {
                    let dp = -(ug + uw * &dbeta);
                    step = step.max(dp.amax());
                    let mut q = apply_increment(p, dp.as_slice());
                    for (x, d) in q.beta.iter_mut().zip(dbeta.iter()) {
                        *x += d;
                    }
                    q
                })
                .collect();
            let v = total(&cand);
            if v <= value {
                accepted = Some((cand, v, step));
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 4.0;
        }
        let Some((cand, v, step)) = accepted else {
            return (it, true);
        };
        let decrease = value - v;
        params.clone_from_slice(&cand);
        value = v;
        if stalled(step, decrease, value, cfg) {
            return (it, true);
        }
    }
    (cfg.max_iters, false)
}

/// Closed-form starting pose: root from a rigid fit of the proximal joints,
/// each local rotation as the shortest arc taking the rest bone onto the
/// target bone.
fn initial_pose(template: &SkeletonTemplate, beta: &[f64], target: &[Vec3]) -> Result<HandParams> {
    let rest = template.rest_joints(beta)?.into_positions();
    let src: Vec<Vec3> = PROXIMAL.iter().map(|&j| rest[j] - rest[0]).collect();
    let dst: Vec<Vec3> = PROXIMAL.iter().map(|&j| target[j] - target[0]).collect();
    let global_rot = kabsch(&src, &dst).map_or(Quat::IDENTITY, |t| t.rotation);
    let mut params = HandParams {
        beta: beta.to_vec(),
        global_rot,
        translation: target[0] - global_rot.rotate(&rest[0]),
        local_rots: [Quat::IDENTITY; NUM_ROTATED],
    };
    // rotated joints are ordered so that a parent's slot precedes its child's
    for k in 0..NUM_ROTATED {
        let j = rotated_joint(k);
        let child = j + 1;
        let rots = template.world_rotations(params.global_rot, &params.local_rots);
        let parent = template.parents[j].expect("rotated joints have parents");
        let want = rots[parent].inverse().rotate(&(target[child] - target[j]));
        params.local_rots[k] = Quat::shortest_arc(&(rest[child] - rest[j]), &want);
    }
    Ok(params)
}

fn rms(template: &SkeletonTemplate, p: &HandParams, target: &[Vec3]) -> Result<f64> {
    let j = template.forward_kinematics(p)?;
    let sq: f64 = j.positions().iter().zip(target).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sq / NUM_JOINTS as f64).sqrt())
}

/// Fit one hand's parameters to a sequence of 3D joint targets.
///
/// The shape is shared across the sequence. Poses are first fitted per frame
/// at the mean shape, the shape is then estimated in closed form from those
/// poses, and finally shape and all poses are refined together. Frames fit
/// concurrently unless `warm_start` is set, in which case each frame starts
/// from its predecessor's solution.
pub fn fit_hand(targets: &[JointSet], template: &SkeletonTemplate, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::SequenceTooShort { what: "fit targets", min: 1, got: 0 });
    }
    let targets: Vec<&[Vec3]> = targets.iter().map(|t| &t.positions()[..NUM_JOINTS]).collect();
    let objs: Vec<Objective> = targets
        .iter()
        .map(|t| Objective { template, target: t, lambda: cfg.lambda })
        .collect();
    let zero = vec![0.0; template.shape_dim()];
    let fits: Vec<FrameFit> = if cfg.warm_start {
        let mut out: Vec<FrameFit> = Vec::with_capacity(targets.len());
        for (n, obj) in objs.iter().enumerate() {
            let init = match out.last() {
                Some(prev) => prev.params.clone(),
                None => initial_pose(template, &zero, targets[n])?,
            };
            out.push(fit_pose(obj, init, cfg));
        }
        out
    } else {
        par::try_map_range(targets.len(), |n| {
            Ok::<_, Error>(fit_pose(&objs[n], initial_pose(template, &zero, targets[n])?, cfg))
        })?
    };
    let frames: Vec<_> = fits
        .iter()
        .zip(&targets)
        .map(|(f, t)| (template.world_rotations(f.params.global_rot, &f.params.local_rots), *t))
        .collect();
    let beta = template.estimate_shape(&frames)?;
    let mut params: Vec<HandParams> = fits
        .iter()
        .map(|f| HandParams { beta: beta.clone(), ..f.params.clone() })
        .collect();
    // keep the closed-form shape only if it helps
    let before: f64 = objs.iter().zip(&fits).map(|(o, f)| o.value(&f.params)).sum();
    let after: f64 = objs.iter().zip(&params).map(|(o, p)| o.value(p)).sum();
    if after > before {
        params = fits.iter().map(|f| f.params.clone()).collect();
    }
    let (joint_iters, converged) = refine_joint(&objs, &mut params, cfg);
    let residuals = params
        .iter()
        .zip(&targets)
        .map(|(p, t)| rms(template, p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        converged: vec![converged; params.len()],
        iterations: fits.iter().map(|f| f.iterations + joint_iters).collect(),
        params,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Handedness;
    use crate::synth::random_hand_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rig(n: usize) -> Vec<CameraCalib> {
        (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let center = Vec3::new(a.cos(), a.sin(), 0.3 * ((i % 3) as f64 - 1.0));
                CameraCalib::look_at(format!("cam{i}"), center, Vec3::zeros(), 1000.0, 640.0, 360.0).unwrap()
            })
            .collect()
    }

    fn observe(cams: &[CameraCalib], x: &Vec3, conf: f64) -> Vec<Observation2D> {
        cams.iter()
            .map(|c| Observation2D {
                camera_id: c.id.clone(),
                point: c.project(x).unwrap(),
                confidence: conf,
            })
            .collect()
    }

    #[test]
    fn noiseless_three_views() {
        let cams = rig(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let x = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let t = triangulate_point(&observe(&cams, &x, 1.0), &cams, DEFAULT_CONFIDENCE).unwrap();
            assert!((t.point - x).norm() < 1e-6);
            assert!(t.residual_px < 1e-6);
            assert_eq!(t.views, 3);
        }
    }

    #[test]
    fn low_confidence_is_insufficient() {
        let cams = rig(4);
        let obs = observe(&cams, &Vec3::zeros(), 0.9);
        assert!(matches!(
            triangulate_point(&obs, &cams, 0.95),
            Err(Error::InsufficientViews { got: 0 })
        ));
    }

    #[test]
    fn coincident_cameras_are_degenerate() {
        let c = CameraCalib::look_at("a", Vec3::new(1.0, 0.0, 0.0), Vec3::zeros(), 800.0, 320.0, 240.0).unwrap();
        let d = CameraCalib { id: "b".into(), ..c.clone() };
        let cams = vec![c, d];
        let obs = observe(&cams, &Vec3::new(0.01, 0.02, -0.03), 1.0);
        assert!(matches!(triangulate_point(&obs, &cams, 0.95), Err(Error::DegenerateGeometry(_))));
        // same center, different orientation
        let e = CameraCalib::look_at("e", Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0), 800.0, 320.0, 240.0).unwrap();
        let cams = vec![cams[0].clone(), e];
        let obs = observe(&cams, &Vec3::new(0.01, 0.02, -0.03), 1.0);
        assert!(matches!(triangulate_point(&obs, &cams, 0.95), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn invalid_calibration_is_rejected() {
        let k = Matrix3::new(800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0);
        let bad_r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraCalib::new("x".into(), k, bad_r, Vec3::zeros()).is_err());
        let bad_k = Matrix3::new(-800.0, 0.0, 320.0, 0.0, 800.0, 240.0, 0.0, 0.0, 1.0);
        assert!(CameraCalib::new("x".into(), bad_k, Matrix3::identity(), Vec3::zeros()).is_err());
    }

    #[test]
    fn noisy_rig_error_is_millimetric() {
        let cams = rig(10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut errs: Vec<f64> = (0..300)
            .map(|_| {
                let x = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                let mut obs = observe(&cams, &x, 1.0);
                for o in &mut obs {
                    o.point += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                }
                (triangulate_point(&obs, &cams, 0.95).unwrap().point - x).norm()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[150] < 5e-3, "median {}", errs[150]);
    }

    fn template() -> SkeletonTemplate {
        SkeletonTemplate::synthetic(Handedness::Right)
    }

    #[test]
    fn rest_targets_converge_immediately() {
        let t = template();
        let target = t.rest_joints(&[0.0; 10]).unwrap();
        let r = fit_hand(&[target], &t, &FitConfig::default()).unwrap();
        assert!(r.residuals[0] < 1e-9);
        assert!(r.iterations[0] <= 2, "{:?}", r.iterations);
        assert!(r.converged[0]);
    }

    #[test]
    fn recovers_known_parameters_without_regularizer() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = FitConfig { lambda: 0.0, ..FitConfig::default() };
        for _ in 0..10 {
            let p = random_hand_params(&mut rng, 1.0);
            let target = t.forward_kinematics(&p).unwrap();
            let r = fit_hand(&[target], &t, &cfg).unwrap();
            assert!(r.residuals[0] < 1e-4, "{}", r.residuals[0]);
        }
    }

    #[test]
    fn huge_regularizer_drives_pose_to_rest() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_hand_params(&mut rng, 1.0);
        let target = t.forward_kinematics(&p).unwrap();
        let cfg = FitConfig { lambda: 1e6, ..FitConfig::default() };
        let r = fit_hand(&[target], &t, &cfg).unwrap();
        let norm: f64 = r.params[0]
            .local_rots
            .iter()
            .map(|q| q.to_rotation_vector().norm_squared())
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn accepted_steps_never_increase_objective() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let p = random_hand_params(&mut rng, 1.0);
            let target = t.forward_kinematics(&p).unwrap().into_positions();
            let obj = Objective { template: &t, target: &target, lambda: 1e-3 };
            let init = initial_pose(&t, &[0.0; 10], &target).unwrap();
            let mut prev = obj.value(&init);
            let mut cur = init;
            for _ in 0..10 {
                let step = fit_pose(&obj, cur.clone(), &FitConfig { max_iters: 1, ..FitConfig::default() });
                let v = obj.value(&step.params);
                assert!(v <= prev);
                prev = v;
                cur = step.params;
            }
        }
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let seq = crate::synth::random_sequence(&mut rng, 8);
        let targets: Vec<JointSet> = seq.frames.iter().map(|f| t.forward_kinematics(&f.right).unwrap()).collect();
        for warm_start in [false, true] {
            let r = fit_hand(&targets, &t, &FitConfig { warm_start, ..FitConfig::default() }).unwrap();
            let mpjpe: f64 = r.residuals.iter().sum::<f64>() / r.residuals.len() as f64;
            assert!(mpjpe < 1e-3, "warm_start={warm_start}: {mpjpe}");
        }
    }
}
