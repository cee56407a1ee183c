//! Contact-set physics terms (attraction to the object, repulsion out of
//! its SDF), the weighted total objective and the scene optimizer.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gscene::{covariance_vjp, densify_and_prune, human_backward, ComposedScene, DensifyConfig, Gaussian, HumanModel, Origin};
use crate::mathcore::{logit, sigmoid, sorted_sum, Mat3, Quaternion, Vec3};
use crate::objtrack::TriMesh;
use crate::sdfgrid::{Bvh, SdfGrid};
use crate::splat::{self, Camera, Image, PrimitiveGrad};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    /// Accepted for completeness; the perceptual term is always zero.
    pub lambda_lpips: f64,
    pub lambda_mask: f64,
    pub lambda_attr: f64,
    pub lambda_rep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ssim: 0.5, lambda_lpips: 0.1, lambda_mask: 0.3, lambda_attr: 0.01, lambda_rep: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ssim, self.lambda_lpips, self.lambda_mask, self.lambda_attr, self.lambda_rep];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub image: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub mask: f64,
    pub attr: f64,
    pub rep: f64,
}

/// `L_image + λ_ssim L_ssim + λ_lpips·0 + λ_mask L_mask + λ_attr L_attr + λ_rep L_rep`.
/// The perceptual term needs a pretrained network and contributes nothing.
pub fn total_loss(t: &LossTerms, w: &LossWeights) -> f64 {
    let lpips = 0.0 * t.lpips;
    t.image + w.lambda_ssim * t.ssim + w.lambda_lpips * lpips + w.lambda_mask * t.mask + w.lambda_attr * t.attr + w.lambda_rep * t.rep
}

/// Sorted, duplicate-free indices into the human Gaussian list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactSet {
    indices: Vec<usize>,
}

impl ContactSet {
    pub fn new(mut indices: Vec<usize>, num_human: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.last().is_some_and(|&i| i >= num_human) {
            return Err(Error::InvalidArgument("contact index out of range".into()));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.indices
    }
}

/// Human means within unsigned distance `d_c` of the object surface.
pub fn contact_oracle(human_means: &[Vec3], object: &TriMesh, d_c: f64) -> Result<ContactSet> {
    if !(d_c > 0.0) {
        return Err(Error::InvalidArgument("contact distance must be positive".into()));
    }
    let bvh = Bvh::new(object);
    let d2 = d_c * d_c;
    let indices = human_means
        .par_iter()
        .enumerate()
        .filter(|(_, p)| bvh.nearest_dist2(p) <= d2)
        .map(|(i, _)| i)
        .collect();
    ContactSet::new(indices, human_means.len())
}

/// Nearest point of `set` to `p`; lowest index wins ties.
fn nearest(p: &Vec3, set: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in set.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    (best.0, best.1.sqrt())
}

fn unit_or_zero(v: Vec3, len: f64) -> Vec3 {
    if len > 0.0 {
        v / len
    } else {
        Vec3::zeros()
    }
}

/// Loss value with gradients for every human mean (zero outside the
/// contact set) and every object mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsTerm {
    pub loss: f64,
    pub grad_human: Vec<Vec3>,
    pub grad_object: Vec<Vec3>,
}

/// Two-sided nearest-neighbour distance between contact means and object
/// means, each side averaged over its own set.
pub fn attraction_loss(human_means: &[Vec3], object_means: &[Vec3], contacts: &[usize]) -> PhysicsTerm {
    let mut grad_human = vec![Vec3::zeros(); human_means.len()];
    let mut grad_object = vec![Vec3::zeros(); object_means.len()];
    if contacts.is_empty() || object_means.is_empty() {
        return PhysicsTerm { loss: 0.0, grad_human, grad_object };
    }
    let c: Vec<Vec3> = contacts.iter().map(|&i| human_means[i]).collect();
    let (nc, no) = (c.len() as f64, object_means.len() as f64);

    let forward: Vec<(usize, f64)> = c.par_iter().map(|p| nearest(p, object_means)).collect();
    let backward: Vec<(usize, f64)> = object_means.par_iter().map(|q| nearest(q, &c)).collect();

    for (k, &(j, d)) in forward.iter().enumerate() {
        let g = unit_or_zero(c[k] - object_means[j], d) / nc;
        grad_human[contacts[k]] += g;
        grad_object[j] -= g;
    }
    for (j, &(k, d)) in backward.iter().enumerate() {
        let g = unit_or_zero(object_means[j] - c[k], d) / no;
        grad_object[j] += g;
        grad_human[contacts[k]] -= g;
    }
    let loss = forward.iter().map(|x| x.1).sum::<f64>() / nc + backward.iter().map(|x| x.1).sum::<f64>() / no;
    PhysicsTerm { loss, grad_human, grad_object }
}

/// Mean over the contact set of `max(0, −δ)·‖n‖²`, sampled from the grid.
pub fn repulsion_loss(human_means: &[Vec3], contacts: &[usize], grid: &SdfGrid) -> PhysicsTerm {
    let mut grad_human = vec![Vec3::zeros(); human_means.len()];
    if contacts.is_empty() {
        return PhysicsTerm { loss: 0.0, grad_human, grad_object: Vec::new() };
    }
    let nc = contacts.len() as f64;
    let terms: Vec<(f64, Vec3)> = contacts
        .par_iter()
        .map(|&i| {
            let p = &human_means[i];
            let s = grid.sample(p);
            if s.distance >= 0.0 {
                return (0.0, Vec3::zeros());
            }
            let n2 = s.normal.norm_squared();
            (-s.distance * n2, -grid.distance_gradient(p) * n2)
        })
        .collect();
    for (&i, (_, g)) in contacts.iter().zip(&terms) {
        grad_human[i] = g / nc;
    }
    let loss = terms.iter().map(|t| t.0).sum::<f64>() / nc;
    PhysicsTerm { loss, grad_human, grad_object: Vec::new() }
}

/// Mean of `max(0, −δ)` over the contact set.
pub fn mean_penetration(human_means: &[Vec3], contacts: &[usize], grid: &SdfGrid) -> f64 {
    if contacts.is_empty() {
        return 0.0;
    }
    sorted_sum(contacts.iter().map(|&i| (-grid.distance(&human_means[i])).max(0.0))) / contacts.len() as f64
}

/// Fraction of contact means deeper than `depth` inside the object.
pub fn penetration_fraction(human_means: &[Vec3], contacts: &[usize], grid: &SdfGrid, depth: f64) -> f64 {
    if contacts.is_empty() {
        return 0.0;
    }
    contacts.iter().filter(|&&i| grid.distance(&human_means[i]) < -depth).count() as f64 / contacts.len() as f64
}

/// Mean distance from each contact mean to its nearest object mean.
pub fn mean_contact_distance(human_means: &[Vec3], object_means: &[Vec3], contacts: &[usize]) -> f64 {
    if contacts.is_empty() || object_means.is_empty() {
        return 0.0;
    }
    contacts.iter().map(|&i| nearest(&human_means[i], object_means).1).sum::<f64>() / contacts.len() as f64
}

/// One training view.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    /// Single-channel foreground mask.
    pub mask: Image,
}

/// Step sizes per parameter class. Means use an exponentially decaying
/// rate scaled by the scene extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    /// Modulation network parameters; 0 freezes the network.
    pub net: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            color: 2.5e-3,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
            net: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifySchedule {
    pub config: DensifyConfig,
    pub start: usize,
    pub interval: usize,
}

impl Default for DensifySchedule {
    fn default() -> Self {
        Self { config: DensifyConfig::default(), start: 100, interval: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub weights: LossWeights,
    pub lr: LearningRates,
    /// Scene radius multiplying the position step size.
    pub extent: f64,
    /// Fraction of iterations that are photometric only.
    pub warmup_fraction: f64,
    /// Fraction over which the physics weights ramp linearly to full.
    pub ramp_fraction: f64,
    /// Densification runs only during warm-up.
    pub densify: Option<DensifySchedule>,
    pub background: [f64; 3],
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            weights: LossWeights::default(),
            lr: LearningRates::default(),
            extent: 1.0,
            warmup_fraction: 0.3,
            ramp_fraction: 0.1,
            densify: Some(DensifySchedule::default()),
            background: [0.0; 3],
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let fr = [self.warmup_fraction, self.ramp_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || !(self.extent > 0.0) {
            return Err(Error::InvalidArgument("schedule fractions must lie in [0, 1] and extent be positive".into()));
        }
        if self.densify.is_some_and(|d| d.interval == 0) {
            return Err(Error::InvalidArgument("densify interval must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier on the physics weights at `iter`.
    pub fn physics_scale(&self, iter: usize) -> f64 {
        let n = self.iterations as f64;
        let start = self.warmup_fraction * n;
        let ramp = self.ramp_fraction * n;
        let t = iter as f64;
        if t < start {
            0.0
        } else if ramp <= 0.0 || t >= start + ramp {
            1.0
        } else {
            (t - start) / ramp
        }
    }

    fn in_warmup(&self, iter: usize) -> bool {
        (iter as f64) < self.warmup_fraction * self.iterations as f64
    }

    fn position_lr(&self, iter: usize) -> f64 {
        let t = if self.iterations > 1 { iter as f64 / (self.iterations - 1) as f64 } else { 0.0 };
        let (a, b) = (self.lr.position_init, self.lr.position_final);
        (a.ln() * (1.0 - t) + b.ln() * t).exp() * self.extent
    }
}

/// Scene radius in the 3DGS sense: 1.1 times the largest distance of a
/// camera centre from the mean centre.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let c = cameras.iter().map(|c| c.center()).sum::<Vec3>() / cameras.len() as f64;
    let r = cameras.iter().map(|cam| (cam.center() - c).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub terms: LossTerms,
    pub physics_scale: f64,
    pub total: f64,
    pub gaussians: usize,
}

/// Optimizer parameters of one Gaussian: mean, raw quaternion, log scale,
/// logit opacity, color.
pub type Raw = [f64; 14];

const MIN_OPACITY: f64 = 1e-6;

pub fn to_raw(g: &Gaussian) -> Raw {
    let q = g.rot.to_array();
    let o = g.opacity.clamp(MIN_OPACITY, 1.0 - MIN_OPACITY);
    [
        g.mean.x,
        g.mean.y,
        g.mean.z,
        q[0],
        q[1],
        q[2],
        q[3],
        g.scale.x.ln(),
        g.scale.y.ln(),
        g.scale.z.ln(),
        logit(o),
        g.color.x,
        g.color.y,
        g.color.z,
    ]
}

pub fn from_raw(r: &Raw) -> Gaussian {
    Gaussian {
        mean: Vec3::new(r[0], r[1], r[2]),
        rot: Quaternion::from_array([r[3], r[4], r[5], r[6]]),
        scale: Vec3::new(r[7].exp(), r[8].exp(), r[9].exp()),
        opacity: sigmoid(r[10]),
        color: Vec3::new(r[11].clamp(0.0, 1.0), r[12].clamp(0.0, 1.0), r[13].clamp(0.0, 1.0)),
    }
}

/// Raw-parameter gradient from mean / covariance / opacity / color
/// gradients.
fn raw_grad(g: &Gaussian, d_mean: &Vec3, d_cov: &Mat3, d_opacity: f64, d_color: &Vec3) -> Raw {
    let (dq, ds) = covariance_vjp(&g.rot, &g.scale, d_cov);
    let o = g.opacity.clamp(MIN_OPACITY, 1.0 - MIN_OPACITY);
    [
        d_mean.x,
        d_mean.y,
        d_mean.z,
        dq[0],
        dq[1],
        dq[2],
        dq[3],
        ds.x * g.scale.x,
        ds.y * g.scale.y,
        ds.z * g.scale.z,
        d_opacity * o * (1.0 - o),
        d_color.x,
        d_color.y,
        d_color.z,
    ]
}

#[derive(Clone, Debug)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(&mut self, i: usize, x: &mut f64, g: f64, lr: f64, t: i32, b1: f64, b2: f64, eps: f64) {
        self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
        self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
        let mh = self.m[i] / (1.0 - b1.powi(t));
        let vh = self.v[i] / (1.0 - b2.powi(t));
        *x -= lr * mh / (vh.sqrt() + eps);
    }

    /// Carries moments of survivors along; newborn Gaussians start at zero.
    fn remap(&self, origins: &[Origin], width: usize) -> Self {
        let mut out = Self::new(origins.len() * width);
        for (k, o) in origins.iter().enumerate() {
            if let Origin::Kept(p) = o {
                out.m[k * width..(k + 1) * width].copy_from_slice(&self.m[p * width..(p + 1) * width]);
                out.v[k * width..(k + 1) * width].copy_from_slice(&self.v[p * width..(p + 1) * width]);
            }
        }
        out
    }
}

/// Everything the backward pass of one iteration produces.
pub struct SceneGradient {
    pub terms: LossTerms,
    pub total: f64,
    /// Raw-parameter gradients, human block first.
    pub raw: Vec<Raw>,
    pub net: Vec<f64>,
    /// Accumulated screen-space mean gradient norm and visibility count.
    pub screen: Vec<(f64, usize)>,
}

const NET_CHUNK: usize = 64;

/// Loss terms and gradients of the full objective at the current state.
/// `physics_scale` multiplies both physics weights.
pub fn scene_gradient(
    scene: &ComposedScene,
    model: &HumanModel,
    views: &[View],
    grid: Option<&SdfGrid>,
    weights: &LossWeights,
    physics_scale: f64,
    background: Vec3,
    with_net: bool,
) -> Result<SceneGradient> {
    if views.is_empty() {
        return Err(Error::Empty("no training views".into()));
    }
    let prims = scene.primitives(model);
    let n = prims.len();
    let nh = scene.human.len();
    let mut acc = vec![PrimitiveGrad::default(); n];
    let mut screen = vec![(0.0, 0usize); n];
    let mut terms = LossTerms::default();
    let inv = 1.0 / views.len() as f64;
    for view in views {
        let r = splat::rasterize(&prims, &view.camera, background);
        terms.image += splat::loss_l1(&r.color, &view.image)? * inv;
        let (l_ssim, g_ssim) = splat::loss::loss_ssim_with_grad(&r.color, &view.image)?;
        terms.ssim += l_ssim * inv;
        terms.mask += splat::loss_mask(&r.alpha, &view.mask)? * inv;
        let mut d_color = splat::loss_l1_grad(&r.color, &view.image)?;
        for (a, b) in d_color.data.iter_mut().zip(&g_ssim.data) {
            *a = (*a + weights.lambda_ssim * b) * inv;
        }
        let mut d_alpha = splat::loss_mask_grad(&r.alpha, &view.mask)?;
        for a in d_alpha.data.iter_mut() {
            *a *= weights.lambda_mask * inv;
        }
        let grads = splat::backward(&prims, &view.camera, &r, &d_color, Some(&d_alpha))?;
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.mean += g.mean;
            a.cov += g.cov;
            a.opacity += g.opacity;
            a.color += g.color;
        }
        for p in r.order() {
            let g = &grads[p.index];
            screen[p.index].0 += (g.mean2d[0] * g.mean2d[0] + g.mean2d[1] * g.mean2d[1]).sqrt();
            screen[p.index].1 += 1;
        }
    }

    let human_means: Vec<Vec3> = prims[..nh].iter().map(|p| p.mean).collect();
    let object_means = scene.object_means();
    let attr = attraction_loss(&human_means, &object_means, &scene.contacts);
    terms.attr = attr.loss;
    let wa = weights.lambda_attr * physics_scale;
    if wa != 0.0 {
        for (a, g) in acc[..nh].iter_mut().zip(&attr.grad_human) {
            a.mean += g * wa;
        }
        for (a, g) in acc[nh..].iter_mut().zip(&attr.grad_object) {
            a.mean += g * wa;
        }
    }
    if let Some(grid) = grid {
        let rep = repulsion_loss(&human_means, &scene.contacts, grid);
        terms.rep = rep.loss;
        let wr = weights.lambda_rep * physics_scale;
        if wr != 0.0 {
            for (a, g) in acc[..nh].iter_mut().zip(&rep.grad_human) {
                a.mean += g * wr;
            }
        }
    }
    let scaled = LossWeights { lambda_attr: wa, lambda_rep: weights.lambda_rep * physics_scale, ..*weights };
    let total = total_loss(&terms, &scaled);

    // Human block: through skinning to canonical parameters. The network
    // gradient is reduced over fixed-size chunks so the sum order does not
    // depend on the thread count.
    let np = if with_net { model.net.num_parameters() } else { 0 };
    let chunks: Vec<(Vec<Raw>, Vec<f64>)> = scene
        .human
        .par_chunks(NET_CHUNK)
        .enumerate()
        .map(|(c, hs)| {
            let mut net = vec![0.0; np];
            let raws = hs
                .iter()
                .enumerate()
                .map(|(k, h)| {
                    let g = &acc[c * NET_CHUNK + k];
                    let (d_pc, d_sc) = human_backward(model, h, &g.mean, &g.cov, with_net.then_some(&mut net[..]));
                    raw_grad(&h.canonical, &d_pc, &d_sc, g.opacity, &g.color)
                })
                .collect();
            (raws, net)
        })
        .collect();
    let mut raw = Vec::with_capacity(n);
    let mut net = vec![0.0; np];
    for (r, g) in chunks {
        raw.extend(r);
        for (a, b) in net.iter_mut().zip(&g) {
            *a += b;
        }
    }
    raw.extend(scene.object.iter().zip(&acc[nh..]).map(|(o, g)| raw_grad(o, &g.mean, &g.cov, g.opacity, &g.color)));
    Ok(SceneGradient { terms, total, raw, net, screen })
}

/// Adam over all Gaussian parameters (and the modulation network when its
/// step size is non-zero) with photometric warm-up, a linear physics ramp
/// and warm-up-only densification. One JSON line per iteration goes to
/// `metrics` when given.
pub fn optimize(
    scene: &mut ComposedScene,
    model: &mut HumanModel,
    views: &[View],
    grid: Option<&SdfGrid>,
    config: &OptimizeConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<IterationRecord>> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::Empty("no training views".into()));
    }
    let background = Vec3::from(config.background);
    let with_net = config.lr.net > 0.0;
    let mut adam = Adam::new(scene.len() * 14);
    let mut net_adam = Adam::new(if with_net { model.net.num_parameters() } else { 0 });
    let mut net_params = model.net.parameters();
    let mut screen_acc = vec![(0.0, 0usize); scene.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.iterations);
    let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);

    for it in 0..config.iterations {
        let scale = config.physics_scale(it);
        let g = scene_gradient(scene, model, views, grid, &config.weights, scale, background, with_net)?;
        let record = IterationRecord { iteration: it, terms: g.terms, physics_scale: scale, total: g.total, gaussians: scene.len() };
        if !g.total.is_finite() || g.raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("optimization diverged: {}", serde_json::to_string(&record)?)));
        }
        if let Some(w) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        history.push(record);

        let t = it as i32 + 1;
        let lr_pos = config.position_lr(it);
        let lr = config.lr;
        let rates = [lr_pos, lr_pos, lr_pos, lr.rotation, lr.rotation, lr.rotation, lr.rotation, lr.scale, lr.scale, lr.scale, lr.opacity, lr.color, lr.color, lr.color];
        let nh = scene.human.len();
        let step_one = |k: usize, gauss: &Gaussian, adam: &mut Adam| -> Gaussian {
            let mut r = to_raw(gauss);
            for d in 0..14 {
                adam.step(k * 14 + d, &mut r[d], g.raw[k][d], rates[d], t, b1, b2, eps);
            }
            from_raw(&r)
        };
        for k in 0..nh {
            scene.human[k].canonical = step_one(k, &scene.human[k].canonical, &mut adam);
        }
        for k in 0..scene.object.len() {
            scene.object[k] = step_one(nh + k, &scene.object[k], &mut adam);
        }
        if with_net {
            for (i, (p, d)) in net_params.iter_mut().zip(&g.net).enumerate() {
                net_adam.step(i, p, *d, lr.net, t, b1, b2, eps);
            }
            model.net.set_parameters(&net_params)?;
        }

        for (a, s) in screen_acc.iter_mut().zip(&g.screen) {
            a.0 += s.0;
            a.1 += s.1;
        }
        if let Some(d) = &config.densify {
            let due = it >= d.start && (it + 1 - d.start) % d.interval == 0;
            if due && config.in_warmup(it) {
                let grads: Vec<f64> = screen_acc.iter().map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect();
                let origins = densify_and_prune(scene, &grads, &d.config, &mut rng)?;
                adam = adam.remap(&origins, 14);
                screen_acc = vec![(0.0, 0); scene.len()];
            }
        }
    }
    Ok(history)
}

/// Moving average with the given window; used for the loss trend check.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    values.windows(w.min(values.len()).max(1)).map(|s| s.iter().sum::<f64>() / s.len() as f64).collect()
}
