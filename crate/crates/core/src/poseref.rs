//! Multi-view body pose fitting: reprojection costs, occlusion-driven
//! view weights and a damped Gauss-Newton solver over `(θ, β, b)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::{kinematics, BodyTemplate, Pose};
use crate::error::{Error, Result};
use crate::mathcore::{rodrigues_partials, softmax, Mat3, Vec3};
use crate::splat::raster::ewa_jacobian;
use crate::splat::{Camera, Image};

#[derive(Clone, Debug, PartialEq)]
pub enum Visibility {
    /// Single-channel human mask; a joint is visible when its pixel is
    /// inside the image and the mask value there exceeds 0.5.
    Mask(Image),
    /// One flag per joint.
    Bits(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewObservation {
    pub camera: Camera,
    /// Detected joint pixels.
    pub joints_2d: Vec<[f64; 2]>,
    /// Per-joint confidence flags; invalid joints do not enter the cost.
    pub valid: Vec<bool>,
    pub visibility: Visibility,
}

impl ViewObservation {
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        self.camera.validate()?;
        if self.joints_2d.len() != num_joints || self.valid.len() != num_joints {
            return Err(Error::DimensionMismatch(format!("observation has {} joints, expected {num_joints}", self.joints_2d.len())));
        }
        if self.joints_2d.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("detected joints".into()));
        }
        match &self.visibility {
            Visibility::Mask(m) if m.width != self.camera.width || m.height != self.camera.height || m.channels != 1 => {
                Err(Error::DimensionMismatch("mask must be single-channel at camera resolution".into()))
            }
            Visibility::Bits(b) if b.len() != num_joints => Err(Error::DimensionMismatch("one visibility bit per joint".into())),
            _ => Ok(()),
        }
    }
}

/// On-disk form of an observation: camera index plus either visibility
/// bits or a mask path relative to the observation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub camera: usize,
    pub joints_2d: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

pub fn save_observations(path: &Path, records: &[ObservationRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

pub fn load_observations(path: &Path, cameras: &[Camera]) -> Result<Vec<ViewObservation>> {
    let records: Vec<ObservationRecord> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    records
        .into_iter()
        .map(|r| {
            let camera = cameras.get(r.camera).cloned().ok_or_else(|| Error::InvalidArgument(format!("camera {} does not exist", r.camera)))?;
            let visibility = match (r.visible, r.mask) {
                (Some(bits), _) => Visibility::Bits(bits),
                (None, Some(m)) => Visibility::Mask(Image::load_png(&base.join(m), 1)?),
                (None, None) => return Err(Error::Format("observation needs visibility bits or a mask".into())),
            };
            Ok(ViewObservation { camera, joints_2d: r.joints_2d, valid: r.valid, visibility })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub alpha: f64,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub max_iters: usize,
    /// Initial Levenberg-Marquardt damping.
    pub step: f64,
    /// Stop when the gradient's largest component falls below this.
    pub tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            lambda_theta: 1.0,
            lambda_beta: 0.001,
            lambda_1: 5.0,
            lambda_2: 5.0,
            lambda_3: 0.001,
            max_iters: 200,
            step: 1e-3,
            tolerance: 1e-10,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        let ws = [self.lambda_theta, self.lambda_beta, self.lambda_1, self.lambda_2, self.lambda_3, self.step, self.tolerance];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Pixel projections; `None` for joints at or behind the camera plane.
pub fn project_joints(joints: &[Vec3], cam: &Camera) -> Vec<Option<[f64; 2]>> {
    joints
        .iter()
        .map(|p| {
            let t = cam.to_camera(p);
            (t.z > 0.0).then(|| cam.project_camera_point(&t))
        })
        .collect()
}

fn regularizer(pose: &Pose, cfg: &RefineConfig) -> f64 {
    cfg.lambda_theta * pose.theta.iter().map(|t| t.norm_squared()).sum::<f64>() + cfg.lambda_beta * pose.beta.iter().map(|b| b * b).sum::<f64>()
}

fn reprojection(joints: &[Vec3], obs: &ViewObservation) -> f64 {
    project_joints(joints, &obs.camera)
        .iter()
        .zip(&obs.joints_2d)
        .zip(&obs.valid)
        .filter_map(|((p, d), v)| match (p, v) {
            (Some(p), true) => Some((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)),
            _ => None,
        })
        .sum()
}

/// Squared reprojection error over valid joints plus the pose priors.
pub fn per_view_cost(template: &BodyTemplate, pose: &Pose, obs: &ViewObservation, cfg: &RefineConfig) -> Result<f64> {
    let joints = posed(template, pose)?;
    Ok(reprojection(&joints, obs) + regularizer(pose, cfg))
}

fn posed(template: &BodyTemplate, pose: &Pose) -> Result<Vec<Vec3>> {
    let k = kinematics(template, pose)?;
    Ok(k.world_positions.iter().map(|p| p + pose.translation).collect())
}

fn is_visible(p: &Option<[f64; 2]>, j: usize, obs: &ViewObservation) -> bool {
    match &obs.visibility {
        Visibility::Bits(b) => b[j],
        Visibility::Mask(m) => match p {
            Some([u, v]) if *u >= 0.0 && *v >= 0.0 && (*u as usize) < m.width && (*v as usize) < m.height => m.pixel(*u as usize, *v as usize)[0] > 0.5,
            _ => false,
        },
    }
}

/// `1 − V/K` with `V` the number of visible joints.
pub fn occlusion_rate(template: &BodyTemplate, pose: &Pose, obs: &ViewObservation) -> Result<f64> {
    let joints = posed(template, pose)?;
    let proj = project_joints(&joints, &obs.camera);
    let k = joints.len();
    if k == 0 {
        return Ok(0.0);
    }
    let visible = proj.iter().enumerate().filter(|(j, p)| is_visible(p, *j, obs)).count();
    Ok(1.0 - visible as f64 / k as f64)
}

/// `softmax(−α·E)`.
pub fn dynamic_weights(rates: &[f64], alpha: f64) -> Vec<f64> {
    let x: Vec<f64> = rates.iter().map(|e| -alpha * e).collect();
    softmax(&x)
}

/// Occlusion-weighted sum of per-view costs with weights evaluated at `pose`.
pub fn total_cost(template: &BodyTemplate, pose: &Pose, observations: &[ViewObservation], cfg: &RefineConfig) -> Result<f64> {
    let d = view_weights(template, pose, observations, cfg)?;
    weighted_cost(template, pose, observations, &d, cfg)
}

pub fn view_weights(template: &BodyTemplate, pose: &Pose, observations: &[ViewObservation], cfg: &RefineConfig) -> Result<Vec<f64>> {
    if observations.is_empty() {
        return Err(Error::Empty("no views".into()));
    }
    let rates = observations.iter().map(|o| occlusion_rate(template, pose, o)).collect::<Result<Vec<_>>>()?;
    Ok(dynamic_weights(&rates, cfg.alpha))
}

/// `Σ_i d_i E_i` with fixed weights `d`.
pub fn weighted_cost(template: &BodyTemplate, pose: &Pose, observations: &[ViewObservation], d: &[f64], cfg: &RefineConfig) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::Empty("no views".into()));
    }
    let joints = posed(template, pose)?;
    let reg = regularizer(pose, cfg);
    Ok(observations.iter().zip(d).map(|(o, w)| w * (reprojection(&joints, o) + reg)).sum())
}

/// `∂P_k/∂x` for every posed joint `P_k`, as K rows of 3×n blocks over the
/// flattened `(θ, β, b)` vector.
pub fn joint_jacobian(template: &BodyTemplate, pose: &Pose) -> Result<(Vec<Vec3>, Vec<DMatrix<f64>>)> {
    let kin = kinematics(template, pose)?;
    let k = template.num_joints();
    let nb = template.num_shapes();
    let n = 3 * k + nb + 3;
    let joints: Vec<Vec3> = kin.world_positions.iter().map(|p| p + pose.translation).collect();
    let mut jac = vec![DMatrix::zeros(3, n); k];

    for j in 0..k {
        let parent_r = template.parent[j].map_or(Mat3::identity(), |p| kin.world_rotations[p]);
        let dr = rodrigues_partials(&pose.theta[j]);
        for (a, d) in dr.iter().enumerate() {
            let m = parent_r * d * kin.world_rotations[j].transpose();
            for (kk, jk) in jac.iter_mut().enumerate() {
                if kk != j && template.is_ancestor(j, kk) {
                    let col = m * (kin.world_positions[kk] - kin.world_positions[j]);
                    jk.fixed_view_mut::<3, 1>(0, 3 * j + a).copy_from(&col);
                }
            }
        }
    }
    for s in 0..nb {
        let mut dp = vec![Vec3::zeros(); k];
        for j in 0..k {
            let dj = template.joint_shape_dirs[j][s];
            dp[j] = match template.parent[j] {
                None => dj,
                Some(p) => dp[p] + kin.world_rotations[p] * (dj - template.joint_shape_dirs[p][s]),
            };
            jac[j].fixed_view_mut::<3, 1>(0, 3 * k + s).copy_from(&dp[j]);
        }
    }
    for jk in jac.iter_mut() {
        jk.fixed_view_mut::<3, 3>(0, 3 * k + nb).copy_from(&Mat3::identity());
    }
    Ok((joints, jac))
}

/// Residual vector whose squared norm is the weighted cost, and its
/// Jacobian.
fn residuals(template: &BodyTemplate, pose: &Pose, observations: &[ViewObservation], d: &[f64], cfg: &RefineConfig) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (joints, jac) = joint_jacobian(template, pose)?;
    let n = jac.first().map_or(3 * template.num_joints() + template.num_shapes() + 3, |m| m.ncols());
    let mut rows: Vec<(f64, DVector<f64>)> = Vec::new();
    for (obs, w) in observations.iter().zip(d) {
        let sw = w.sqrt();
        let cam = &obs.camera;
        for (j, p) in joints.iter().enumerate() {
            let t = cam.to_camera(p);
            if !obs.valid[j] || t.z <= 0.0 {
                continue;
            }
            let [u, v] = cam.project_camera_point(&t);
            let jp = ewa_jacobian(cam, &t) * cam.rotation;
            let g = jp_rows(&jp, &jac[j]);
            rows.push((sw * (u - obs.joints_2d[j][0]), g.0 * sw));
            rows.push((sw * (v - obs.joints_2d[j][1]), g.1 * sw));
        }
    }
    let wsum: f64 = d.iter().sum();
    let k = template.num_joints();
    let st = (cfg.lambda_theta * wsum).sqrt();
    for j in 0..k {
        for a in 0..3 {
            let mut g = DVector::zeros(n);
            g[3 * j + a] = st;
            rows.push((st * pose.theta[j][a], g));
        }
    }
    let sb = (cfg.lambda_beta * wsum).sqrt();
    for s in 0..template.num_shapes() {
        let mut g = DVector::zeros(n);
        g[3 * k + s] = sb;
        rows.push((sb * pose.beta[s], g));
    }
    let r = DVector::from_iterator(rows.len(), rows.iter().map(|x| x.0));
    let mut jm = DMatrix::zeros(rows.len(), n);
    for (i, (_, g)) in rows.iter().enumerate() {
        jm.row_mut(i).copy_from(&g.transpose());
    }
    Ok((r, jm))
}

fn jp_rows(jp: &nalgebra::Matrix2x3<f64>, jac: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = jac.ncols();
    let mut a = DVector::zeros(n);
    let mut b = DVector::zeros(n);
    for c in 0..n {
        for r in 0..3 {
            a[c] += jp[(0, r)] * jac[(r, c)];
            b[c] += jp[(1, r)] * jac[(r, c)];
        }
    }
    (a, b)
}

/// Weighted cost and its gradient with respect to `(θ, β, b)`, weights held
/// fixed.
pub fn cost_gradient(template: &BodyTemplate, pose: &Pose, observations: &[ViewObservation], d: &[f64], cfg: &RefineConfig) -> Result<(f64, Vec<f64>)> {
    let (r, j) = residuals(template, pose, observations, d, cfg)?;
    let g = j.transpose() * &r * 2.0;
    Ok((r.norm_squared(), g.iter().copied().collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub pose: Pose,
    /// Posed 3D joints of the optimized pose, shared by every view.
    pub joints: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

/// Levenberg-Marquardt on the weighted cost, with a gradient-descent
/// backtracking fallback. View weights are computed once at the initial
/// pose.
pub fn refine(template: &BodyTemplate, initial: &Pose, observations: &[ViewObservation], cfg: &RefineConfig) -> Result<RefineResult> {
    cfg.validate()?;
    if !initial.is_finite() {
        return Err(Error::NonFinite("initial pose".into()));
    }
    for o in observations {
        o.validate(template.num_joints())?;
    }
    let d = view_weights(template, initial, observations, cfg)?;
    let (k, nb) = (template.num_joints(), template.num_shapes());
    let mut x = DVector::from_vec(initial.to_vector());
    let to_pose = |x: &DVector<f64>| Pose::from_vector(x.as_slice(), k, nb);
    let mut cost = weighted_cost(template, initial, observations, &d, cfg)?;
    let mut history = vec![cost];
    let mut mu = cfg.step.max(1e-12);
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let (r, j) = residuals(template, &to_pose(&x)?, observations, &d, cfg)?;
        let g = j.transpose() * &r;
        if g.amax() * 2.0 < cfg.tolerance {
            break;
        }
        iterations += 1;
        let jtj = j.transpose() * &j;
        let mut accepted = None;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu * (jtj[(i, i)] + 1e-9);
            }
            if let Some(ch) = a.cholesky() {
                let cand = &x - ch.solve(&g);
                let c = weighted_cost(template, &to_pose(&cand)?, observations, &d, cfg)?;
                if c.is_finite() && c < cost {
                    accepted = Some((cand, c));
                    mu = (mu / 3.0).max(1e-12);
                    break;
                }
            }
            mu *= 4.0;
        }
        if accepted.is_none() {
            let mut s = 1.0 / (g.norm() + 1e-300);
            for _ in 0..40 {
                let cand = &x - &g * s;
                let c = weighted_cost(template, &to_pose(&cand)?, observations, &d, cfg)?;
                if c.is_finite() && c < cost {
                    accepted = Some((cand, c));
                    break;
                }
                s *= 0.5;
            }
        }
        match accepted {
            Some((cand, c)) => {
                if !c.is_finite() {
                    return Err(Error::NonFinite(format!("pose cost diverged at iteration {iterations}")));
                }
                let done = cost - c <= 1e-15 * cost.max(1.0);
                x = cand;
                cost = c;
                history.push(c);
                if done {
                    break;
                }
            }
            None => break,
        }
    }
    let pose = to_pose(&x)?;
    let joints = posed(template, &pose)?;
    Ok(RefineResult { pose, joints, weights: d, cost_history: history, iterations })
}

/// `λ₁ Σ‖J_reg − J_gt‖ + λ₂ Σ‖p_gt − p_opt‖ + λ₃ ‖H_reg − H_opt‖`.
pub fn hpr_loss(
    j_reg: &[[f64; 2]],
    j_gt: &[[f64; 2]],
    p_opt: &[Vec3],
    p_gt: &[Vec3],
    h_reg: &Pose,
    h_opt: &Pose,
    cfg: &RefineConfig,
) -> Result<f64> {
    if j_reg.len() != j_gt.len() || p_opt.len() != p_gt.len() {
        return Err(Error::DimensionMismatch("joint lists differ in length".into()));
    }
    let l2d: f64 = j_reg.iter().zip(j_gt).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).sum();
    let l3d: f64 = p_gt.iter().zip(p_opt).map(|(a, b)| (a - b).norm()).sum();
    let (a, b) = (h_reg.to_vector(), h_opt.to_vector());
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch("pose vectors differ in length".into()));
    }
    let lh = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Ok(cfg.lambda_1 * l2d + cfg.lambda_2 * l3d + cfg.lambda_3 * lh)
}

/// Stand-in for an image-based regressor: the true pose with Gaussian
/// noise on every joint angle, shape coefficient and the translation.
pub fn noisy_pose<R: Rng>(truth: &Pose, sigma_theta: f64, sigma_beta: f64, sigma_b: f64, rng: &mut R) -> Pose {
    let mut n = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    Pose {
        theta: truth.theta.iter().map(|t| t + Vec3::new(n(sigma_theta), n(sigma_theta), n(sigma_theta))).collect(),
        beta: truth.beta.iter().map(|b| b + n(sigma_beta)).collect(),
        translation: truth.translation + Vec3::new(n(sigma_b), n(sigma_b), n(sigma_b)),
    }
}

/// Detections as exact projections plus pixel noise; joints behind the
/// camera are flagged invalid.
pub fn synthesize_detections<R: Rng>(joints: &[Vec3], cam: &Camera, sigma_px: f64, rng: &mut R) -> (Vec<[f64; 2]>, Vec<bool>) {
    project_joints(joints, cam)
        .into_iter()
        .map(|p| match p {
            Some([u, v]) => {
                let du: f64 = rng.sample(StandardNormal);
                let dv: f64 = rng.sample(StandardNormal);
                ([u + sigma_px * du, v + sigma_px * dv], true)
            }
            None => ([0.0, 0.0], false),
        })
        .unzip()
}

pub fn mean_joint_error(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{generate_toy_body, posed_joints};
    use crate::fixture::camera_ring;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BodyTemplate, Pose, Vec<Camera>) {
        let t = generate_toy_body(12, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = noisy_pose(&Pose::rest(t.num_joints(), t.num_shapes()), 0.3, 0.5, 0.05, &mut rng);
        let cams = camera_ring(6, 3.0, 0.4, Vec3::new(0.0, 0.9, 0.0), 0.1, 0.9, 64, 64);
        (t, truth, cams)
    }

    fn observe(t: &BodyTemplate, pose: &Pose, cams: &[Camera], sigma: f64, seed: u64) -> Vec<ViewObservation> {
        let joints = posed_joints(t, pose).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cams.iter()
            .map(|c| {
                let (joints_2d, valid) = synthesize_detections(&joints, c, sigma, &mut rng);
                ViewObservation { camera: c.clone(), joints_2d, valid, visibility: Visibility::Bits(vec![true; joints.len()]) }
            })
            .collect()
    }

    #[test]
    fn projection_examples() {
        let cam = Camera { rotation: Mat3::identity(), translation: Vec3::zeros(), fx: 100.0, fy: 100.0, cx: 0.0, cy: 0.0, width: 10, height: 10, near: 0.01 };
        assert_eq!(project_joints(&[Vec3::new(1.0, 0.0, 1.0)], &cam)[0], Some([100.0, 0.0]));
        assert_eq!(project_joints(&[Vec3::new(0.0, 0.0, -1.0)], &cam)[0], None);
        let cam2 = Camera { cx: 7.0, cy: 3.0, ..cam };
        assert_eq!(project_joints(&[Vec3::new(0.0, 0.0, 1.0)], &cam2)[0], Some([7.0, 3.0]));
    }

    #[test]
    fn projection_matches_homogeneous_matrix() {
        let (_, _, cams) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in &cams {
            let k = nalgebra::Matrix3::new(c.fx, 0.0, c.cx, 0.0, c.fy, c.cy, 0.0, 0.0, 1.0);
            let w = c.world_to_camera_matrix();
            let p34 = k * w.fixed_view::<3, 4>(0, 0);
            for _ in 0..20 {
                let p = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(0.0..1.8), rng.gen_range(-0.5..0.5));
                let h = p34 * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
                let got = project_joints(&[p], c)[0].unwrap();
                assert!((got[0] - h.x / h.z).abs() < 1e-9 && (got[1] - h.y / h.z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn per_view_cost_examples() {
        let (t, truth, cams) = setup();
        let zero = RefineConfig { lambda_theta: 0.0, lambda_beta: 0.0, ..Default::default() };
        let obs = observe(&t, &truth, &cams[..1], 0.0, 0);
        assert!(per_view_cost(&t, &truth, &obs[0], &zero).unwrap() < 1e-20);

        let rest = Pose::rest(t.num_joints(), t.num_shapes());
        let mut o = observe(&t, &rest, &cams[..1], 0.0, 0).remove(0);
        for j in o.joints_2d.iter_mut() {
            j[0] += 1.0;
        }
        let valid = o.valid.iter().filter(|v| **v).count() as f64;
        assert!((per_view_cost(&t, &rest, &o, &zero).unwrap() - valid).abs() < 1e-9);

        let cfg = RefineConfig::default();
        let obs = observe(&t, &truth, &cams[..1], 0.0, 0);
        let expect = truth.theta.iter().map(|v| v.norm_squared()).sum::<f64>() + 0.001 * truth.beta.iter().map(|b| b * b).sum::<f64>();
        assert!((per_view_cost(&t, &truth, &obs[0], &cfg).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn occlusion_rate_examples() {
        let (t, truth, cams) = setup();
        let mut o = observe(&t, &truth, &cams[..1], 0.0, 0).remove(0);
        let k = t.num_joints();
        o.visibility = Visibility::Mask(Image::filled(64, 64, &[1.0]));
        assert_eq!(occlusion_rate(&t, &truth, &o).unwrap(), 0.0);
        o.visibility = Visibility::Mask(Image::new(64, 64, 1));
        assert_eq!(occlusion_rate(&t, &truth, &o).unwrap(), 1.0);
        o.visibility = Visibility::Bits((0..k).map(|j| j % 2 == 0).collect());
        assert_eq!(occlusion_rate(&t, &truth, &o).unwrap(), 0.5);
    }

    #[test]
    fn dynamic_weight_examples() {
        let d = dynamic_weights(&[0.0, 1.0], 5.0);
        assert!((d[0] - 0.99331).abs() < 1e-5 && (d[1] - 0.00669).abs() < 1e-5);
        let oracle = 1.0 / (1.0 + (-5f64).exp());
        assert!((d[0] - oracle).abs() < 1e-15);
        assert!(dynamic_weights(&[0.3; 4], 5.0).iter().all(|w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn total_cost_examples() {
        let (t, truth, cams) = setup();
        let cfg = RefineConfig::default();
        let obs = observe(&t, &truth, &cams, 2.0, 3);
        let one = total_cost(&t, &truth, &obs[..1], &cfg).unwrap();
        assert!((one - per_view_cost(&t, &truth, &obs[0], &cfg).unwrap()).abs() < 1e-9);
        let d = [0.25, 0.75];
        let e: Vec<f64> = obs[..2].iter().map(|o| per_view_cost(&t, &truth, o, &cfg).unwrap()).collect();
        let got = weighted_cost(&t, &truth, &obs[..2], &d, &cfg).unwrap();
        assert!((got - (0.25 * e[0] + 0.75 * e[1])).abs() < 1e-9);
        assert!(total_cost(&t, &truth, &[], &cfg).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (t, _, cams) = setup();
        let cfg = RefineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let pose = noisy_pose(&Pose::rest(t.num_joints(), t.num_shapes()), 0.4, 0.5, 0.05, &mut rng);
            let obs = observe(&t, &noisy_pose(&pose, 0.1, 0.1, 0.02, &mut rng), &cams, 1.0, rng.gen());
            let d = view_weights(&t, &pose, &obs, &cfg).unwrap();
            let (_, g) = cost_gradient(&t, &pose, &obs, &d, &cfg).unwrap();
            let x = pose.to_vector();
            let h = 1e-6;
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let f = |v: &[f64]| weighted_cost(&t, &Pose::from_vector(v, t.num_joints(), t.num_shapes()).unwrap(), &obs, &d, &cfg).unwrap();
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1.0), "param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn refine_keeps_ground_truth() {
        let (t, truth, cams) = setup();
        let cfg = RefineConfig { lambda_theta: 0.0, lambda_beta: 0.0, ..Default::default() };
        let obs = observe(&t, &truth, &cams, 0.0, 0);
        let r = refine(&t, &truth, &obs, &cfg).unwrap();
        let diff = r.pose.to_vector().iter().zip(truth.to_vector()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn refine_recovers_perturbed_pose() {
        let (t, truth, cams) = setup();
        let cfg = RefineConfig::default();
        let obs = observe(&t, &truth, &cams, 0.0, 0);
        let mut init = truth.clone();
        let five = 5f64.to_radians();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for th in init.theta.iter_mut() {
            let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            *th += axis * five;
        }
        let r = refine(&t, &init, &obs, &cfg).unwrap();
        assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]));
        let err = mean_joint_error(&r.joints, &posed_joints(&t, &truth).unwrap());
        assert!(err < 1e-2, "mean joint error {err}");
    }

    #[test]
    fn hpr_loss_examples() {
        let cfg = RefineConfig::default();
        let p = Pose::rest(2, 1);
        assert_eq!(hpr_loss(&[[0.0, 0.0]], &[[0.0, 0.0]], &[Vec3::zeros()], &[Vec3::zeros()], &p, &p, &cfg).unwrap(), 0.0);
        let mut q = p.clone();
        q.translation.x = 1.0;
        let v = hpr_loss(&[[1.0, 0.0]], &[[0.0, 0.0]], &[Vec3::y()], &[Vec3::zeros()], &p, &q, &cfg).unwrap();
        assert!((v - 10.001).abs() < 1e-12);
    }

    #[test]
    fn observation_file_round_trip() {
        let (t, truth, cams) = setup();
        let dir = tempfile::tempdir().unwrap();
        let obs = observe(&t, &truth, &cams[..2], 1.0, 5);
        let mask = Image::filled(64, 64, &[1.0]);
        mask.save_png(&dir.path().join("m.png")).unwrap();
        let recs = vec![
            ObservationRecord { camera: 0, joints_2d: obs[0].joints_2d.clone(), valid: obs[0].valid.clone(), visible: Some(vec![true; t.num_joints()]), mask: None },
            ObservationRecord { camera: 1, joints_2d: obs[1].joints_2d.clone(), valid: obs[1].valid.clone(), visible: None, mask: Some("m.png".into()) },
        ];
        let path = dir.path().join("obs.json");
        save_observations(&path, &recs).unwrap();
        let back = load_observations(&path, &cams).unwrap();
        assert_eq!(back[0], obs[0]);
        assert_eq!(back[1].visibility, Visibility::Mask(mask));
    }

    proptest! {
        #[test]
        fn weights_normalized_and_monotone(rates in proptest::collection::vec(0.0f64..1.0, 1..8), i in 0usize..8, bump in 0.01f64..0.5) {
            let d = dynamic_weights(&rates, 5.0);
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let i = i % rates.len();
            if rates.len() > 1 {
                let mut r2 = rates.clone();
                r2[i] += bump;
                prop_assert!(dynamic_weights(&r2, 5.0)[i] < d[i]);
            }
            let mut rev = rates.clone();
            rev.reverse();
            let mut dr = dynamic_weights(&rev, 5.0);
            dr.reverse();
            for (a, b) in d.iter().zip(&dr) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
