//! Gaussian primitives, mesh-based initialization, human and object
//! deformation, composition and adaptive density control.

use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::body::{
    blended_rotation, forward_kinematics, lbs_point, modulated_weights, BodyTemplate, JointTransform,
    ModulationNet, Pose,
};
use crate::error::{Error, Result};
use crate::mathcore::{
    positional_encoding, positional_encoding_vjp, rotation_matrix_partials, softmax, softmax_backward, Mat3,
    Quaternion, Vec3,
};
use crate::objtrack::RigidTransform;
use crate::splat::SplatPrimitive;

/// Anisotropic 3D Gaussian with view-independent RGB color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec3,
    /// Orientation; normalized whenever it is turned into a matrix.
    pub rot: Quaternion,
    /// Per-axis standard deviations (positive).
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian {
    pub fn isotropic(mean: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        Self { mean, rot: Quaternion::identity(), scale: Vec3::repeat(scale), opacity, color }
    }

    pub fn unit_rot(&self) -> Quaternion {
        Quaternion::new(self.rot.w, self.rot.x, self.rot.y, self.rot.z)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.unit_rot().to_rotation_matrix()
    }

    /// `Σ = R diag(s)² Rᵀ`.
    pub fn covariance(&self) -> Mat3 {
        let m = self.rotation_matrix() * Mat3::from_diagonal(&self.scale);
        let s = m * m.transpose();
        (s + s.transpose()) * 0.5
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.mean.iter().chain(self.scale.iter()).chain(self.color.iter()).all(|v| v.is_finite())
            && self.rot.to_array().iter().all(|v| v.is_finite());
        if !finite || !self.opacity.is_finite() {
            return Err(Error::NonFinite("gaussian parameter".into()));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::InvalidArgument(format!("opacity {} outside (0, 1]", self.opacity)));
        }
        if self.scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidArgument("scale entries must be positive".into()));
        }
        Ok(())
    }

    pub fn to_primitive(&self) -> SplatPrimitive {
        SplatPrimitive { mean: self.mean, cov: self.covariance(), opacity: self.opacity, color: self.color }
    }

    /// Pulls a symmetric covariance gradient back to the raw quaternion
    /// (through its normalization) and the scales.
    pub fn covariance_vjp(&self, g_sigma: &Mat3) -> ([f64; 4], Vec3) {
        covariance_vjp(&self.rot, &self.scale, g_sigma)
    }

    /// Rebuilds `(rot, scale)` from a symmetric PSD covariance.
    pub fn from_covariance(mean: Vec3, cov: &Mat3, opacity: f64, color: Vec3) -> Self {
        let eig = SymmetricEigen::new(*cov);
        let mut v = eig.eigenvectors;
        if v.determinant() < 0.0 {
            v.set_column(2, &(-v.column(2)));
        }
        Self {
            mean,
            rot: Quaternion::from_rotation_matrix(&v),
            scale: eig.eigenvalues.map(|l| l.max(0.0).sqrt()),
            opacity,
            color,
        }
    }
}

pub fn covariance_vjp(rot: &Quaternion, scale: &Vec3, g_sigma: &Mat3) -> ([f64; 4], Vec3) {
    let n = rot.norm();
    let q = Quaternion { w: rot.w / n, x: rot.x / n, y: rot.y / n, z: rot.z / n };
    let r = q.to_rotation_matrix();
    let m = r * Mat3::from_diagonal(scale);
    let g_m = 2.0 * g_sigma * m;
    let rt_gm = r.transpose() * g_m;
    let d_scale = Vec3::new(rt_gm[(0, 0)], rt_gm[(1, 1)], rt_gm[(2, 2)]);
    let g_r = g_m * Mat3::from_diagonal(scale);
    let partials = rotation_matrix_partials(&q);
    let qa = q.to_array();
    let d_unit: [f64; 4] = std::array::from_fn(|k| g_r.component_mul(&partials[k]).sum());
    let dot: f64 = qa.iter().zip(&d_unit).map(|(a, b)| a * b).sum();
    let d_raw = std::array::from_fn(|k| (d_unit[k] - qa[k] * dot) / n);
    (d_raw, d_scale)
}

/// Human Gaussian stored in canonical space with its template anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanGaussian {
    pub canonical: Gaussian,
    /// Template vertex providing the base skinning weights.
    pub anchor: usize,
}

/// Body model state driving human deformation.
#[derive(Clone, Debug)]
pub struct HumanModel {
    pub template: BodyTemplate,
    pub pose: Pose,
    pub net: ModulationNet,
    transforms: Vec<JointTransform>,
}

impl HumanModel {
    pub fn new(template: BodyTemplate, pose: Pose, net: ModulationNet) -> Result<Self> {
        if net.output_dim() != template.num_joints() {
            return Err(Error::DimensionMismatch(format!(
                "net outputs {} values for {} joints",
                net.output_dim(),
                template.num_joints()
            )));
        }
        let transforms = forward_kinematics(&template, &pose)?;
        Ok(Self { template, pose, net, transforms })
    }

    pub fn transforms(&self) -> &[JointTransform] {
        &self.transforms
    }

    pub fn set_pose(&mut self, pose: Pose) -> Result<()> {
        self.transforms = forward_kinematics(&self.template, &pose)?;
        self.pose = pose;
        Ok(())
    }

    pub fn weights(&self, h: &HumanGaussian) -> Vec<f64> {
        modulated_weights(&h.canonical.mean, &self.template.skin_weights[h.anchor], &self.net)
    }

    /// Posed primitive of one human Gaussian.
    pub fn deform_primitive(&self, h: &HumanGaussian) -> SplatPrimitive {
        let w = self.weights(h);
        let a = blended_rotation(&w, &self.transforms);
        let s = a * h.canonical.covariance() * a.transpose();
        SplatPrimitive {
            mean: lbs_point(&h.canonical.mean, &w, &self.transforms, &self.pose.translation),
            cov: (s + s.transpose()) * 0.5,
            opacity: h.canonical.opacity,
            color: h.canonical.color,
        }
    }
}

/// Reverse of [`HumanModel::deform_primitive`]. `g_mean`/`g_cov` are
/// gradients with respect to the posed mean and covariance. When
/// `net_grad` is given the modulation-network parameter gradient is added
/// into it.
pub fn human_backward(
    model: &HumanModel,
    h: &HumanGaussian,
    g_mean: &Vec3,
    g_cov: &Mat3,
    net_grad: Option<&mut [f64]>,
) -> (Vec3, Mat3) {
    let pc = h.canonical.mean;
    let xs = model.transforms();
    let input = positional_encoding(&pc, model.net.frequencies);
    let trace = model.net.forward_trace(&input);
    let m = trace.pre.last().expect("net has layers");
    let base = &model.template.skin_weights[h.anchor];
    let logits: Vec<f64> = base.iter().zip(m).map(|(b, m)| b + m).collect();
    let w = softmax(&logits);
    let a = blended_rotation(&w, xs);
    let sigma_c = h.canonical.covariance();

    let mut d_pc = a.transpose() * g_mean;
    let g_sym = (g_cov + g_cov.transpose()) * 0.5;
    let d_sigma_c = a.transpose() * g_sym * a;
    let g_a = 2.0 * g_sym * a * sigma_c;
    let d_w: Vec<f64> = xs
        .iter()
        .map(|t| g_mean.dot(&(t.rotation * pc + t.translation)) + g_a.component_mul(&t.rotation).sum())
        .collect();
    let d_logits = softmax_backward(&w, &d_w);
    let d_input = model.net.backward_into(&trace, &d_logits, net_grad);
    d_pc += positional_encoding_vjp(&pc, model.net.frequencies, &d_input);
    (d_pc, d_sigma_c)
}

pub const DEFAULT_OPACITY: f64 = 0.5;
pub const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// One isotropic Gaussian per vertex with scale `0.5 × mean incident edge
/// length`; vertices without edges use the global mean edge length instead.
pub fn init_from_vertices(vertices: &[Vec3], faces: &[[usize; 3]], color: Option<Vec3>) -> Result<Vec<Gaussian>> {
    if vertices.is_empty() {
        return Err(Error::Empty("no vertices to initialize from".into()));
    }
    let mut edges = std::collections::BTreeSet::new();
    for f in faces {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            if a.max(b) >= vertices.len() {
                return Err(Error::InvalidArgument(format!("face {f:?} out of range")));
            }
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let mut sum = vec![0.0; vertices.len()];
    let mut count = vec![0usize; vertices.len()];
    let mut total = 0.0;
    for &(a, b) in &edges {
        let l = (vertices[a] - vertices[b]).norm();
        sum[a] += l;
        sum[b] += l;
        count[a] += 1;
        count[b] += 1;
        total += l;
    }
    let global = if edges.is_empty() {
        return Err(Error::Degenerate("mesh has no edges to derive a scale from".into()));
    } else {
        total / edges.len() as f64
    };
    let color = color.unwrap_or(Vec3::from(DEFAULT_COLOR));
    Ok(vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let edge = if count[i] > 0 { sum[i] / count[i] as f64 } else { global };
            Gaussian::isotropic(*v, 0.5 * edge, DEFAULT_OPACITY, color)
        })
        .collect())
}

/// Human Gaussians at the shaped template vertices, anchored to them.
pub fn init_human(template: &BodyTemplate, beta: &[f64], color: Option<Vec3>) -> Result<Vec<HumanGaussian>> {
    let verts = template.shaped_vertices(beta);
    Ok(init_from_vertices(&verts, &template.faces, color)?
        .into_iter()
        .enumerate()
        .map(|(anchor, canonical)| HumanGaussian { canonical, anchor })
        .collect())
}

/// Posed human Gaussians; covariances are re-factored into rotation and
/// scale by eigen-decomposition.
pub fn deform_human(humans: &[HumanGaussian], model: &HumanModel) -> Vec<Gaussian> {
    humans
        .par_iter()
        .map(|h| {
            let p = model.deform_primitive(h);
            Gaussian::from_covariance(p.mean, &p.cov, p.opacity, p.color)
        })
        .collect()
}

/// Means `v ↦ R v + T`, orientations left-multiplied by `R`.
pub fn deform_object(objects: &[Gaussian], t: &RigidTransform) -> Vec<Gaussian> {
    let qr = Quaternion::from_rotation_matrix(&t.rotation);
    objects
        .iter()
        .map(|g| Gaussian { mean: t.apply(&g.mean), rot: qr.mul(&g.unit_rot()), ..*g })
        .collect()
}

/// Human block first, then object block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComposedScene {
    pub human: Vec<HumanGaussian>,
    pub object: Vec<Gaussian>,
    /// Sorted, unique indices into `human`.
    pub contacts: Vec<usize>,
}

pub fn compose(human: Vec<HumanGaussian>, object: Vec<Gaussian>) -> ComposedScene {
    ComposedScene { human, object, contacts: Vec::new() }
}

impl ComposedScene {
    pub fn len(&self) -> usize {
        self.human.len() + self.object.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_contacts(&mut self, mut contacts: Vec<usize>) -> Result<()> {
        contacts.sort_unstable();
        contacts.dedup();
        if contacts.last().is_some_and(|&c| c >= self.human.len()) {
            return Err(Error::InvalidArgument("contact index out of range".into()));
        }
        self.contacts = contacts;
        Ok(())
    }

    pub fn validate(&self, template_vertices: usize) -> Result<()> {
        for h in &self.human {
            h.canonical.validate()?;
            if h.anchor >= template_vertices {
                return Err(Error::InvalidArgument(format!("anchor {} out of range", h.anchor)));
            }
        }
        for g in &self.object {
            g.validate()?;
        }
        if self.contacts.windows(2).any(|w| w[0] >= w[1]) || self.contacts.last().is_some_and(|&c| c >= self.human.len()) {
            return Err(Error::InvalidArgument("contact set must be sorted, unique and in range".into()));
        }
        Ok(())
    }

    /// Rasterizer input: posed human primitives then object primitives.
    pub fn primitives(&self, model: &HumanModel) -> Vec<SplatPrimitive> {
        let mut out: Vec<SplatPrimitive> = self.human.par_iter().map(|h| model.deform_primitive(h)).collect();
        out.extend(self.object.iter().map(Gaussian::to_primitive));
        out
    }

    /// Posed human means.
    pub fn human_means(&self, model: &HumanModel) -> Vec<Vec3> {
        self.human
            .par_iter()
            .map(|h| lbs_point(&h.canonical.mean, &model.weights(h), model.transforms(), &model.pose.translation))
            .collect()
    }

    pub fn object_means(&self) -> Vec<Vec3> {
        self.object.iter().map(|g| g.mean).collect()
    }

    /// Posed Gaussians of both blocks, in rasterizer order.
    pub fn posed_gaussians(&self, model: &HumanModel) -> Vec<Gaussian> {
        let mut out = deform_human(&self.human, model);
        out.extend_from_slice(&self.object);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean screen-space positional gradient above which a Gaussian is
    /// densified.
    pub grad_threshold: f64,
    /// Opacity below which a Gaussian is pruned.
    pub opacity_threshold: f64,
    /// Max scale separating clone (below) from split (at or above).
    pub scale_threshold: f64,
    /// Max scale above which a Gaussian is pruned, if set.
    pub big_threshold: Option<f64>,
    pub split_factor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            opacity_threshold: 0.005,
            scale_threshold: 0.01,
            big_threshold: None,
            split_factor: 1.6,
        }
    }
}

/// Provenance of each Gaussian after densification, indexing the scene
/// before the call (human block first, then object block).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    Cloned(usize),
    Split(usize),
}

impl Origin {
    pub fn parent(&self) -> usize {
        match *self {
            Origin::Kept(i) | Origin::Cloned(i) | Origin::Split(i) => i,
        }
    }
}

enum Action {
    Keep,
    Prune,
    Clone,
    Split,
}

fn decide(g: &Gaussian, grad: f64, cfg: &DensifyConfig) -> Action {
    let max_scale = g.scale.max();
    if g.opacity < cfg.opacity_threshold || cfg.big_threshold.is_some_and(|b| max_scale > b) {
        Action::Prune
    } else if grad > cfg.grad_threshold {
        if max_scale < cfg.scale_threshold {
            Action::Clone
        } else {
            Action::Split
        }
    } else {
        Action::Keep
    }
}

fn split_pair<R: Rng>(g: &Gaussian, factor: f64, rng: &mut R) -> [Gaussian; 2] {
    let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let offset = g.rotation_matrix() * g.scale.component_mul(&z);
    let child = Gaussian { scale: g.scale / factor, ..*g };
    [Gaussian { mean: g.mean + offset, ..child }, Gaussian { mean: g.mean - offset, ..child }]
}

fn densify_block<T: Copy, R: Rng>(
    items: &[T],
    grads: &[f64],
    offset: usize,
    cfg: &DensifyConfig,
    rng: &mut R,
    gaussian: impl Fn(&T) -> Gaussian,
    rebuild: impl Fn(&T, Gaussian) -> T,
) -> (Vec<T>, Vec<Origin>) {
    let mut kept = Vec::new();
    let mut kept_origin = Vec::new();
    let mut born = Vec::new();
    let mut born_origin = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let g = gaussian(item);
        match decide(&g, grads[i], cfg) {
            Action::Prune => {}
            Action::Keep => {
                kept.push(*item);
                kept_origin.push(Origin::Kept(offset + i));
            }
            Action::Clone => {
                kept.push(*item);
                kept_origin.push(Origin::Kept(offset + i));
                born.push(*item);
                born_origin.push(Origin::Cloned(offset + i));
            }
            Action::Split => {
                for child in split_pair(&g, cfg.split_factor, rng) {
                    born.push(rebuild(item, child));
                    born_origin.push(Origin::Split(offset + i));
                }
            }
        }
    }
    kept.extend(born);
    kept_origin.extend(born_origin);
    (kept, kept_origin)
}

/// Clones, splits and prunes both blocks. `grads` holds one accumulated
/// screen-space gradient magnitude per Gaussian (human block first).
/// Survivors keep their relative order and precede newly created Gaussians
/// in each block; human children keep the parent's anchor and contact
/// membership. Returns the provenance of every resulting Gaussian.
pub fn densify_and_prune<R: Rng>(
    scene: &mut ComposedScene,
    grads: &[f64],
    cfg: &DensifyConfig,
    rng: &mut R,
) -> Result<Vec<Origin>> {
    if grads.len() != scene.len() {
        return Err(Error::DimensionMismatch(format!("{} gradients for {} Gaussians", grads.len(), scene.len())));
    }
    let nh = scene.human.len();
    let (human, h_origin) = densify_block(
        &scene.human,
        &grads[..nh],
        0,
        cfg,
        rng,
        |h| h.canonical,
        |h, g| HumanGaussian { canonical: g, anchor: h.anchor },
    );
    let (object, o_origin) = densify_block(&scene.object, &grads[nh..], nh, cfg, rng, |g| *g, |_, g| g);
    let in_contact: std::collections::HashSet<usize> = scene.contacts.iter().copied().collect();
    let contacts = h_origin.iter().enumerate().filter(|(_, o)| in_contact.contains(&o.parent())).map(|(i, _)| i).collect();
    scene.human = human;
    scene.object = object;
    scene.contacts = contacts;
    Ok(h_origin.into_iter().chain(o_origin).collect())
}

pub const CHECKPOINT_VERSION: u32 = 1;
const RECORD_F64: usize = 14;
const TAG_HUMAN: u32 = 0;
const TAG_OBJECT: u32 = 1;
const NO_ANCHOR: u32 = u32::MAX;

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct CheckpointHeader {
    version: u32,
    n_human: usize,
    n_object: usize,
    record_f64: usize,
    contacts: Vec<usize>,
    /// A trailing block of canonical human Gaussians follows the records.
    canonical_block: bool,
}

fn push_record(out: &mut Vec<u8>, g: &Gaussian) {
    let r = g.rot.to_array();
    let vals = [
        g.mean.x, g.mean.y, g.mean.z, r[0], r[1], r[2], r[3], g.scale.x, g.scale.y, g.scale.z, g.opacity, g.color.x,
        g.color.y, g.color.z,
    ];
    out.extend(binio::f64s_to_bytes(&vals));
}

fn read_record(v: &[f64]) -> Gaussian {
    Gaussian {
        mean: Vec3::new(v[0], v[1], v[2]),
        rot: Quaternion { w: v[3], x: v[4], y: v[5], z: v[6] },
        scale: Vec3::new(v[7], v[8], v[9]),
        opacity: v[10],
        color: Vec3::new(v[11], v[12], v[13]),
    }
}

/// Serialized checkpoint: one posed record per Gaussian (14 `f64`, tag,
/// anchor) followed by the canonical human block needed to resume.
pub fn checkpoint_bytes(scene: &ComposedScene, model: &HumanModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        n_human: scene.human.len(),
        n_object: scene.object.len(),
        record_f64: RECORD_F64,
        contacts: scene.contacts.clone(),
        canonical_block: true,
    };
    let posed = deform_human(&scene.human, model);
    let mut payload = Vec::new();
    for (g, h) in posed.iter().zip(&scene.human) {
        push_record(&mut payload, g);
        payload.extend(TAG_HUMAN.to_le_bytes());
        payload.extend((h.anchor as u32).to_le_bytes());
    }
    for g in &scene.object {
        push_record(&mut payload, g);
        payload.extend(TAG_OBJECT.to_le_bytes());
        payload.extend(NO_ANCHOR.to_le_bytes());
    }
    for h in &scene.human {
        push_record(&mut payload, &h.canonical);
    }
    binio::encode(&header, &payload)
}

pub fn save_checkpoint(path: &Path, scene: &ComposedScene, model: &HumanModel) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(scene, model)?)?;
    Ok(())
}

/// Restores a scene from its canonical block; posed human records are
/// returned alongside for inspection.
pub fn load_checkpoint(path: &Path) -> Result<(ComposedScene, Vec<Gaussian>)> {
    parse_checkpoint(&std::fs::read(path)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ComposedScene, Vec<Gaussian>)> {
    let (h, payload): (CheckpointHeader, _) = binio::decode(bytes)?;
    if h.version != CHECKPOINT_VERSION || h.record_f64 != RECORD_F64 || !h.canonical_block {
        return Err(Error::Format(format!("unsupported checkpoint version {}", h.version)));
    }
    let rec = RECORD_F64 * 8 + 8;
    let n = h.n_human + h.n_object;
    let expected = n * rec + h.n_human * RECORD_F64 * 8;
    if payload.len() != expected {
        return Err(Error::Format(format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    let mut posed = Vec::with_capacity(h.n_human);
    let mut anchors = Vec::with_capacity(h.n_human);
    let mut object = Vec::with_capacity(h.n_object);
    for i in 0..n {
        let chunk = &payload[i * rec..(i + 1) * rec];
        let g = read_record(&binio::bytes_to_f64s(&chunk[..RECORD_F64 * 8], RECORD_F64)?);
        let tag = u32::from_le_bytes(chunk[RECORD_F64 * 8..RECORD_F64 * 8 + 4].try_into().expect("4 bytes"));
        let anchor = u32::from_le_bytes(chunk[RECORD_F64 * 8 + 4..].try_into().expect("4 bytes"));
        match (tag, i < h.n_human) {
            (TAG_HUMAN, true) => {
                posed.push(g);
                anchors.push(anchor as usize);
            }
            (TAG_OBJECT, false) => object.push(g),
            _ => return Err(Error::Format(format!("record {i} has unexpected tag {tag}"))),
        }
    }
    let canon = binio::bytes_to_f64s(&payload[n * rec..], h.n_human * RECORD_F64)?;
    let human = canon
        .chunks_exact(RECORD_F64)
        .zip(anchors)
        .map(|(v, anchor)| HumanGaussian { canonical: read_record(v), anchor })
        .collect();
    let mut scene = ComposedScene { human, object, contacts: Vec::new() };
    scene.set_contacts(h.contacts)?;
    Ok((scene, posed))
}
