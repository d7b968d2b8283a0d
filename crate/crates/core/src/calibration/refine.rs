//! Levenberg–Marquardt refinement of the re-projection error.
//!
//! Parameters are the decode-relative `(k_xy, k_uv, u_0, v_0, f)`, the four
//! distortion coefficients, optionally the four distortion centers, and a
//! Rodrigues rotation plus translation per pose. `f'` stays at the decode
//! setting's value. Derivatives come from forward-mode dual numbers pushed
//! through the generic projection, so the Jacobian is exact.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use num_dual::DualSVec64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CalibrationError, CalibrationInput, CalibrationOptions, CalibrationResult, CenterPolicy};
use crate::projection::{project_camera_point, sort_observations, Distortion, ProjectionError, RigidPose};
use crate::scalar::{lit, Real};
use crate::tpp::Tpp;

/// Intrinsics and distortion coefficients.
const BASE_GLOBALS: usize = 9;
/// With the four distortion centers.
const FREE_GLOBALS: usize = 13;
const POSE_PARAMS: usize = 6;
/// Largest number of parameters one observation depends on.
const LOCAL: usize = FREE_GLOBALS + POSE_PARAMS;
/// Observations per parallel work item; fixed so that the reduction order,
/// and therefore every bit of the result, does not depend on thread count.
const CHUNK: usize = 256;

type Dual = DualSVec64<LOCAL>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub max_iterations: usize,
    /// Stop when `‖g‖∞` falls below this fraction of its initial value.
    pub gradient_tolerance: f64,
    /// Stop when the scaled step is this small relative to the scaled
    /// parameters.
    pub step_tolerance: f64,
    /// Consecutive rejected steps before giving up.
    pub max_rejections: usize,
    /// Initial damping as a multiple of the trace of the scaled `JᵀJ`.
    pub initial_damping: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            max_rejections: 20,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    ZeroResidual,
    /// Every recent step was rejected while the model predicted no useful
    /// decrease.
    Stalled,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_rms: f64,
    pub final_rms: f64,
    pub initial_damping: f64,
    pub final_damping: f64,
    pub termination: Termination,
}

#[derive(Clone, Copy, Debug)]
struct Obs {
    pose: usize,
    point: Point3<f64>,
    lens: (i64, i64),
    observed: (f64, f64),
}

/// The least-squares problem: observations, fixed decode setting, and the
/// parameter layout.
#[derive(Clone, Debug)]
pub struct RefineProblem {
    setting: Tpp<f64>,
    image_center: (f64, f64),
    policy: CenterPolicy,
    pose_ids: Vec<usize>,
    obs: Vec<Obs>,
}

impl RefineProblem {
    pub fn new(input: &CalibrationInput, setting: &Tpp<f64>, options: &CalibrationOptions) -> Result<Self, CalibrationError> {
        let pose_ids = input.pose_ids();
        let mut sorted = input.observations.clone();
        sort_observations(&mut sorted);
        let obs = sorted
            .iter()
            .map(|o| {
                let point = input
                    .board
                    .point(o.point_id)
                    .ok_or(ProjectionError::MissingReference { kind: "board point", id: o.point_id })?;
                let pose = pose_ids.binary_search(&o.pose_id).expect("pose ids come from the observations");
                Ok(Obs { pose, point, lens: (o.lens_i, o.lens_j), observed: (o.px, o.py) })
            })
            .collect::<Result<Vec<_>, CalibrationError>>()?;
        Ok(Self {
            setting: *setting,
            image_center: options.image_center,
            policy: options.center_policy,
            pose_ids,
            obs,
        })
    }

    pub fn global_len(&self) -> usize {
        match self.policy {
            CenterPolicy::Anchored => BASE_GLOBALS,
            CenterPolicy::Free => FREE_GLOBALS,
        }
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.global_len() + POSE_PARAMS * self.pose_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn observation_count(&self) -> usize {
        self.obs.len()
    }

    pub fn pack(
        &self,
        decode: &Tpp<f64>,
        dist: &Distortion<f64>,
        poses: &BTreeMap<usize, RigidPose<f64>>,
    ) -> Result<DVector<f64>, CalibrationError> {
        let mut p = DVector::zeros(self.len());
        let globals = [decode.k_x, decode.k_u, decode.u_0, decode.v_0, decode.f, dist.s1, dist.s2, dist.t1, dist.t2];
        p.rows_mut(0, BASE_GLOBALS).copy_from_slice(&globals);
        if self.policy == CenterPolicy::Free {
            p.rows_mut(BASE_GLOBALS, 4).copy_from_slice(&[dist.x_c, dist.y_c, dist.u_c, dist.v_c]);
        }
        let g = self.global_len();
        for (k, id) in self.pose_ids.iter().enumerate() {
            let pose = poses.get(id).ok_or(ProjectionError::MissingReference { kind: "pose", id: *id })?;
            p.rows_mut(g + POSE_PARAMS * k, 3).copy_from(&pose.rotation);
            p.rows_mut(g + POSE_PARAMS * k + 3, 3).copy_from(&pose.translation);
        }
        Ok(p)
    }

    pub fn unpack(&self, p: &DVector<f64>) -> (Tpp<f64>, Distortion<f64>, BTreeMap<usize, RigidPose<f64>>) {
        let decode = self.decode_of(p.as_slice());
        let camera = decode.camera_from_decode(&self.setting);
        let dist = self.distortion_of(p.as_slice(), &camera);
        let g = self.global_len();
        let poses = self
            .pose_ids
            .iter()
            .enumerate()
            .map(|(k, id)| {
                let o = g + POSE_PARAMS * k;
                (*id, RigidPose { rotation: Vector3::new(p[o], p[o + 1], p[o + 2]), translation: Vector3::new(p[o + 3], p[o + 4], p[o + 5]) })
            })
            .collect();
        (decode, dist, poses)
    }

    fn decode_of<T: Real>(&self, g: &[T]) -> Tpp<T> {
        Tpp::isotropic(g[0], g[1], g[2], g[3], lit(self.setting.f_prime), g[4])
    }

    fn distortion_of<T: Real>(&self, g: &[T], camera: &Tpp<T>) -> Distortion<T> {
        let (x_c, y_c, u_c, v_c) = match self.policy {
            CenterPolicy::Anchored => (
                camera.k_x * lit(self.image_center.0),
                camera.k_y * lit(self.image_center.1),
                camera.u_0,
                camera.v_0,
            ),
            CenterPolicy::Free => (g[9], g[10], g[11], g[12]),
        };
        Distortion { s1: g[5], s2: g[6], t1: g[7], t2: g[8], x_c, y_c, u_c, v_c }
    }

    fn setting_as<T: Real>(&self) -> Tpp<T> {
        let s = &self.setting;
        Tpp {
            k_x: lit(s.k_x),
            k_y: lit(s.k_y),
            k_u: lit(s.k_u),
            k_v: lit(s.k_v),
            u_0: lit(s.u_0),
            v_0: lit(s.v_0),
            f_prime: lit(s.f_prime),
            f: lit(s.f),
        }
    }

    /// Predicted pixel of one observation from the global block `g` and the
    /// pose block `q` (Rodrigues vector then translation).
    fn predict<T: Real>(&self, g: &[T], q: &[T], o: &Obs) -> Result<(T, T), ProjectionError> {
        let camera = self.decode_of(g).camera_from_decode(&self.setting_as());
        let dist = self.distortion_of(g, &camera);
        let pose = RigidPose { rotation: Vector3::new(q[0], q[1], q[2]), translation: Vector3::new(q[3], q[4], q[5]) };
        let point = Point3::new(lit(o.point.x), lit(o.point.y), lit(o.point.z));
        project_camera_point(&pose.transform(&point), &camera, &dist, o.lens)
    }

    fn pose_offset(&self, pose: usize) -> usize {
        self.global_len() + POSE_PARAMS * pose
    }

    /// Residual (observed minus predicted) of one observation.
    fn residual(&self, p: &[f64], o: &Obs) -> Result<(f64, f64), ProjectionError> {
        let off = self.pose_offset(o.pose);
        let (x, y) = self.predict(&p[..self.global_len()], &p[off..off + POSE_PARAMS], o)?;
        Ok((o.observed.0 - x, o.observed.1 - y))
    }

    /// Residual and its gradient with respect to the local parameters
    /// (globals, then the observation's pose).
    fn residual_with_gradient(&self, p: &[f64], o: &Obs) -> Result<((f64, f64), [[f64; LOCAL]; 2]), ProjectionError> {
        let ng = self.global_len();
        let off = self.pose_offset(o.pose);
        let g: Vec<Dual> = (0..ng).map(|k| Dual::from_re(p[k]).derivative(k)).collect();
        let q: Vec<Dual> = (0..POSE_PARAMS).map(|k| Dual::from_re(p[off + k]).derivative(ng + k)).collect();
        let (x, y) = self.predict(&g, &q, o)?;
        let grad = |d: &Dual| -> [f64; LOCAL] {
            let mut out = [0.0; LOCAL];
            if let Some(eps) = &d.eps.0 {
                for (k, v) in out.iter_mut().enumerate() {
                    *v = -eps[k];
                }
            }
            out
        };
        Ok(((o.observed.0 - x.re, o.observed.1 - y.re), [grad(&x), grad(&y)]))
    }

    fn local_to_global(&self, o: &Obs, k: usize) -> usize {
        let ng = self.global_len();
        if k < ng {
            k
        } else {
            self.pose_offset(o.pose) + (k - ng)
        }
    }

    /// Stacked residual vector `(dx_0, dy_0, dx_1, …)` in canonical order.
    pub fn residual_vector(&self, p: &DVector<f64>) -> Result<DVector<f64>, CalibrationError> {
        let mut out = DVector::zeros(2 * self.obs.len());
        for (n, o) in self.obs.iter().enumerate() {
            let (dx, dy) = self.residual(p.as_slice(), o)?;
            out[2 * n] = dx;
            out[2 * n + 1] = dy;
        }
        Ok(out)
    }

    /// Dense Jacobian of [`RefineProblem::residual_vector`].
    pub fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>, CalibrationError> {
        let local = self.global_len() + POSE_PARAMS;
        let mut j = DMatrix::zeros(2 * self.obs.len(), self.len());
        for (n, o) in self.obs.iter().enumerate() {
            let (_, grad) = self.residual_with_gradient(p.as_slice(), o)?;
            for k in 0..local {
                let col = self.local_to_global(o, k);
                j[(2 * n, col)] = grad[0][k];
                j[(2 * n + 1, col)] = grad[1][k];
            }
        }
        Ok(j)
    }

    /// Typical magnitude of each parameter, for finite-difference steps and
    /// reporting.
    pub fn parameter_scales(&self, p: &DVector<f64>) -> DVector<f64> {
        let (decode, dist, _) = self.unpack(p);
        let camera = decode.camera_from_decode(&self.setting);
        let r_xy = camera.k_x * self.image_center.0.hypot(self.image_center.1);
        let r_uv = self
            .obs
            .iter()
            .map(|o| {
                let u = camera.k_u * o.lens.0 as f64 + camera.u_0 - dist.u_c;
                let v = camera.k_v * o.lens.1 as f64 + camera.v_0 - dist.v_c;
                u.hypot(v)
            })
            .fold(1.0, f64::max);
        let mut s = DVector::from_fn(self.len(), |k, _| p[k].abs().max(1.0));
        s[5] = 1.0 / (r_xy * r_xy);
        s[6] = 1.0 / r_xy.powi(4);
        s[7] = 1.0 / (r_uv * r_uv);
        s[8] = 1.0 / r_uv.powi(4);
        let g = self.global_len();
        for k in 0..self.pose_ids.len() {
            let o = g + POSE_PARAMS * k;
            let t_norm = p.rows(o + 3, 3).norm().max(1.0);
            for m in 0..3 {
                s[o + m] = 1.0;
                s[o + 3 + m] = t_norm;
            }
        }
        s
    }

    /// Central finite-difference Jacobian with steps `rel_step` times
    /// [`RefineProblem::parameter_scales`].
    pub fn finite_difference_jacobian(&self, p: &DVector<f64>, rel_step: f64) -> Result<DMatrix<f64>, CalibrationError> {
        let scales = self.parameter_scales(p);
        let mut j = DMatrix::zeros(2 * self.obs.len(), self.len());
        for k in 0..self.len() {
            let h = rel_step * scales[k];
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus[k] += h;
            minus[k] -= h;
            let col = (self.residual_vector(&plus)? - self.residual_vector(&minus)?) / (2.0 * h);
            j.set_column(k, &col);
        }
        Ok(j)
    }

    /// Largest column-wise relative difference `‖a_k - b_k‖∞ / ‖b_k‖∞`
    /// between the AD and finite-difference Jacobians at `p`.
    pub fn jacobian_agreement(&self, p: &DVector<f64>, rel_step: f64) -> Result<f64, CalibrationError> {
        let a = self.jacobian(p)?;
        let b = self.finite_difference_jacobian(p, rel_step)?;
        let mut worst: f64 = 0.0;
        for k in 0..a.ncols() {
            let denom = b.column(k).amax();
            if denom == 0.0 {
                if a.column(k).amax() != 0.0 {
                    return Ok(f64::INFINITY);
                }
                continue;
            }
            worst = worst.max((a.column(k) - b.column(k)).amax() / denom);
        }
        Ok(worst)
    }

    /// Half the sum of squared residuals.
    pub fn cost(&self, p: &DVector<f64>) -> Result<f64, CalibrationError> {
        let partial: Vec<Result<f64, CalibrationError>> = self
            .obs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut sum = 0.0;
                for o in chunk {
                    let (dx, dy) = self.residual(p.as_slice(), o)?;
                    sum += dx * dx + dy * dy;
                }
                Ok(sum)
            })
            .collect();
        let mut total = 0.0;
        for c in partial {
            total += c?;
        }
        if total.is_finite() {
            Ok(0.5 * total)
        } else {
            Err(CalibrationError::NonFiniteResidual)
        }
    }

    /// `JᵀJ`, `Jᵀe` and the cost, accumulated chunk by chunk and reduced in
    /// chunk order.
    fn normal_equations(&self, p: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>, f64), CalibrationError> {
        let n = self.len();
        let local = self.global_len() + POSE_PARAMS;
        let partial: Vec<Result<(DMatrix<f64>, DVector<f64>, f64), CalibrationError>> = self
            .obs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut jtj = DMatrix::zeros(n, n);
                let mut jte = DVector::zeros(n);
                let mut sum = 0.0;
                let mut idx = [0usize; LOCAL];
                for o in chunk {
                    let ((ex, ey), [jx, jy]) = self.residual_with_gradient(p.as_slice(), o)?;
                    sum += ex * ex + ey * ey;
                    for (k, slot) in idx.iter_mut().enumerate().take(local) {
                        *slot = self.local_to_global(o, k);
                    }
                    for a in 0..local {
                        jte[idx[a]] += jx[a] * ex + jy[a] * ey;
                        for b in 0..local {
                            jtj[(idx[a], idx[b])] += jx[a] * jx[b] + jy[a] * jy[b];
                        }
                    }
                }
                Ok((jtj, jte, sum))
            })
            .collect();
        let mut jtj = DMatrix::zeros(n, n);
        let mut jte = DVector::zeros(n);
        let mut sum = 0.0;
        for part in partial {
            let (a, b, c) = part?;
            jtj += a;
            jte += b;
            sum += c;
        }
        if !sum.is_finite() || jtj.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::NonFiniteResidual);
        }
        Ok((jtj, jte, 0.5 * sum))
    }

    fn rms_of_cost(&self, cost: f64) -> f64 {
        if self.obs.is_empty() {
            0.0
        } else {
            (2.0 * cost / (2 * self.obs.len()) as f64).sqrt()
        }
    }
}

/// Minimize the re-projection error starting from `initial`.
pub fn refine(
    initial: &CalibrationResult,
    input: &CalibrationInput,
    options: &CalibrationOptions,
) -> Result<(CalibrationResult, RefineReport), CalibrationError> {
    if input.pose_ids().len() < super::closed_form::MIN_POSES {
        return Err(CalibrationError::InsufficientPoses(input.pose_ids().len()));
    }
    let problem = RefineProblem::new(input, &initial.setting, options)?;
    let p0 = problem.pack(&initial.decode, &initial.dist, &initial.poses)?;
    let (p, report) = crate::parallel::install(|| minimize(&problem, p0, &options.refine))?;
    let (decode, dist, poses) = problem.unpack(&p);
    let result = CalibrationResult::from_parts(input, decode, initial.setting, dist, poses)?;
    Ok((result, report))
}

/// Damped Gauss–Newton on the column-scaled normal equations.
pub fn minimize(
    problem: &RefineProblem,
    mut p: DVector<f64>,
    opts: &RefineOptions,
) -> Result<(DVector<f64>, RefineReport), CalibrationError> {
    let n = p.len();
    let (mut jtj, mut jte, mut cost) = problem.normal_equations(&p)?;
    let initial_rms = problem.rms_of_cost(cost);
    let mut d = DVector::from_element(n, 0.0);
    let update_scaling = |d: &mut DVector<f64>, jtj: &DMatrix<f64>| {
        for k in 0..n {
            d[k] = d[k].max(jtj[(k, k)].sqrt());
        }
    };
    update_scaling(&mut d, &jtj);
    let scale_of = |d: &DVector<f64>| d.map(|v| if v > 0.0 { v } else { 1.0 });

    let mut ds = scale_of(&d);
    let scaled = |jtj: &DMatrix<f64>, ds: &DVector<f64>| DMatrix::from_fn(n, n, |i, j| jtj[(i, j)] / (ds[i] * ds[j]));
    let mut a = scaled(&jtj, &ds);
    let mut g = jte.component_div(&ds);
    let mut mu = opts.initial_damping * a.trace();
    let initial_damping = mu;
    let g0 = g.amax();

    let mut iterations = 0;
    let mut accepted = 0;
    let mut rejections = 0;
    let termination = loop {
        if problem.rms_of_cost(cost) < 1e-12 {
            break Termination::ZeroResidual;
        }
        if g.amax() <= opts.gradient_tolerance * g0 {
            break Termination::Gradient;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let mut damped = a.clone();
        for k in 0..n {
            damped[(k, k)] += mu;
        }
        let Some(chol) = damped.cholesky() else {
            mu *= 10.0;
            rejections += 1;
            if rejections >= opts.max_rejections {
                return Err(CalibrationError::DivergedOptimization(rejections));
            }
            continue;
        };
        // JᵀJ δ = −Jᵀe for e = observed − predicted and J = ∂e/∂p
        let step_scaled = chol.solve(&(-&g));
        let step = step_scaled.component_div(&ds);
        let p_scaled_norm = p.component_mul(&ds).norm();
        if step_scaled.norm() <= opts.step_tolerance * (p_scaled_norm + opts.step_tolerance) {
            break Termination::Step;
        }
        let predicted = 0.5 * step_scaled.dot(&(step_scaled.scale(mu) - &g));
        let trial = &p + &step;
        let trial_cost = problem.cost(&trial).ok().filter(|c| c.is_finite());
        match trial_cost {
            Some(c) if c < cost => {
                log::trace!("lm {iterations}: cost {cost:.6e} -> {c:.6e}, mu {mu:.3e}, gain {:.3}", (cost - c) / predicted);
                p = trial;
                (jtj, jte, cost) = problem.normal_equations(&p)?;
                update_scaling(&mut d, &jtj);
                ds = scale_of(&d);
                a = scaled(&jtj, &ds);
                g = jte.component_div(&ds);
                mu = (mu * 0.1).max(f64::MIN_POSITIVE);
                accepted += 1;
                rejections = 0;
            }
            _ => {
                mu *= 10.0;
                rejections += 1;
                if rejections >= opts.max_rejections {
                    if predicted <= 1e-14 * cost {
                        break Termination::Stalled;
                    }
                    return Err(CalibrationError::DivergedOptimization(rejections));
                }
            }
        }
    };
    let final_rms = problem.rms_of_cost(cost);
    log::debug!(
        "refinement: {termination:?} after {iterations} iterations ({accepted} accepted), rms {initial_rms:.6} -> {final_rms:.6}, damping {initial_damping:.3e} -> {mu:.3e}"
    );
    Ok((
        p,
        RefineReport {
            iterations,
            accepted_steps: accepted,
            initial_rms,
            final_rms,
            initial_damping,
            final_damping: mu,
            termination,
        },
    ))
}
