//! Multi-view contact prediction: cross-view self-attention over per-view
//! features, view averaging and a per-vertex sigmoid classifier.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::body::{kinematics, limb_tip, posed_vertices, BodyTemplate, Pose};
use crate::error::{Error, Result};
use crate::fixture::icosphere;
use crate::mathcore::{sigmoid, softmax_backward, softmax_order_independent, sorted_sum, Vec3};
use crate::objtrack::TriMesh;
use crate::physics::{contact_oracle, ContactSet};

pub const DEFAULT_FEATURE_DIM: usize = 128;
pub const DEFAULT_PROJ_DIM: usize = 32;
pub const DEFAULT_TAU: f64 = 0.5;

/// `N × D` per-view features, one row per view.
pub type FeatureSet = DMatrix<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    /// `D' × V`.
    pub cls_w: DMatrix<f64>,
    pub cls_b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    version: u32,
    feature_dim: usize,
    proj_dim: usize,
    vertices: usize,
}

impl AttentionWeights {
    /// Xavier-style random projections and a zero classifier.
    pub fn new(feature_dim: usize, proj_dim: usize, vertices: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 / feature_dim as f64).sqrt();
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let wq = m(feature_dim, proj_dim);
        let wk = m(feature_dim, proj_dim);
        let wv = m(feature_dim, proj_dim);
        Self { wq, wk, wv, cls_w: DMatrix::zeros(proj_dim, vertices), cls_b: vec![0.0; vertices] }
    }

    pub fn feature_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn proj_dim(&self) -> usize {
        self.wq.ncols()
    }

    pub fn vertices(&self) -> usize {
        self.cls_b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, p) = (self.feature_dim(), self.proj_dim());
        let ok = self.wk.shape() == (d, p) && self.wv.shape() == (d, p) && self.cls_w.shape() == (p, self.vertices());
        if !ok {
            return Err(Error::DimensionMismatch("attention weight shapes are inconsistent".into()));
        }
        Ok(())
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.wq, &self.wk, &self.wv, &self.cls_w] {
            out.extend(m.iter());
        }
        out.extend(&self.cls_b);
        out
    }

    fn set_flat(&mut self, v: &[f64]) {
        let mut o = 0;
        for m in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.cls_w] {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&v[o..o + n]);
            o += n;
        }
        self.cls_b.copy_from_slice(&v[o..]);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let h = WeightsHeader { version: 1, feature_dim: self.feature_dim(), proj_dim: self.proj_dim(), vertices: self.vertices() };
        binio::write(path, &h, &binio::f64s_to_bytes(&self.flat()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (h, payload): (WeightsHeader, _) = binio::decode(&bytes)?;
        if h.version != 1 {
            return Err(Error::Format(format!("unsupported weights version {}", h.version)));
        }
        let mut w = Self::new(h.feature_dim, h.proj_dim, h.vertices, 0);
        let n = w.flat().len();
        w.set_flat(&binio::bytes_to_f64s(payload, n)?);
        Ok(w)
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Row-stochastic attention matrix.
    pub attn: DMatrix<f64>,
    pub out: DMatrix<f64>,
}

fn check_features(f: &FeatureSet, w: &AttentionWeights) -> Result<()> {
    if f.nrows() == 0 {
        return Err(Error::Empty("feature set has no views".into()));
    }
    if f.ncols() != w.feature_dim() {
        return Err(Error::DimensionMismatch(format!("features have {} dims, weights expect {}", f.ncols(), w.feature_dim())));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √D') V`. Reductions over the view axis are
/// order-independent, so permuting views permutes rows bit-exactly.
pub fn attention_trace(f: &FeatureSet, w: &AttentionWeights) -> Result<AttentionTrace> {
    w.validate()?;
    check_features(f, w)?;
    let n = f.nrows();
    let q = f * &w.wq;
    let k = f * &w.wk;
    let v = f * &w.wv;
    let scale = 1.0 / (w.proj_dim() as f64).sqrt();
    let scores = &q * k.transpose() * scale;
    let mut attn = DMatrix::zeros(n, n);
    for i in 0..n {
        let row: Vec<f64> = scores.row(i).iter().copied().collect();
        for (j, a) in softmax_order_independent(&row).into_iter().enumerate() {
            attn[(i, j)] = a;
        }
    }
    let out = DMatrix::from_fn(n, w.proj_dim(), |i, c| sorted_sum((0..n).map(|j| attn[(i, j)] * v[(j, c)])));
    Ok(AttentionTrace { q, k, v, attn, out })
}

pub fn cross_view_attention(f: &FeatureSet, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    Ok(attention_trace(f, w)?.out)
}

/// Column means over views.
pub fn fuse(att: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = att.nrows();
    if n == 0 {
        return Err(Error::Empty("no views to fuse".into()));
    }
    Ok((0..att.ncols()).map(|c| sorted_sum(att.column(c).iter().copied()) / n as f64).collect())
}

fn logits(fused: &[f64], w: &AttentionWeights) -> Vec<f64> {
    (0..w.vertices())
        .map(|v| w.cls_b[v] + fused.iter().enumerate().map(|(d, x)| x * w.cls_w[(d, v)]).sum::<f64>())
        .collect()
}

/// Per-vertex contact probabilities and the set `{i | P_i > τ}`.
pub fn classify(fused: &[f64], w: &AttentionWeights, tau: f64) -> Result<(Vec<f64>, ContactSet)> {
    if fused.len() != w.proj_dim() {
        return Err(Error::DimensionMismatch("fused feature length differs from the projection size".into()));
    }
    let p: Vec<f64> = logits(fused, w).into_iter().map(sigmoid).collect();
    let c = threshold(&p, tau);
    let n = p.len();
    Ok((p, ContactSet::new(c, n)?))
}

pub fn threshold(p: &[f64], tau: f64) -> Vec<usize> {
    p.iter().enumerate().filter(|(_, x)| **x > tau).map(|(i, _)| i).collect()
}

/// Full forward: attention, fusion and classification.
pub fn predict(f: &FeatureSet, w: &AttentionWeights, tau: f64) -> Result<(Vec<f64>, ContactSet)> {
    let fused = fuse(&cross_view_attention(f, w)?)?;
    classify(&fused, w, tau)
}

#[derive(Clone, Debug)]
pub struct ContactSample {
    pub features: FeatureSet,
    /// Oracle contact vertices.
    pub labels: Vec<usize>,
}

fn dense_labels(labels: &[usize], v: usize) -> Vec<f64> {
    let mut y = vec![0.0; v];
    for &i in labels {
        y[i] = 1.0;
    }
    y
}

const PROB_EPS: f64 = 1e-12;

/// Mean per-vertex binary cross-entropy and its gradient with respect to
/// every trainable weight (same layout as the weights).
pub fn bce_and_gradient(sample: &ContactSample, w: &AttentionWeights) -> Result<(f64, AttentionWeights)> {
    let t = attention_trace(&sample.features, w)?;
    let n = sample.features.nrows();
    let nv = w.vertices();
    let fused = fuse(&t.out)?;
    let z = logits(&fused, w);
    let y = dense_labels(&sample.labels, nv);
    let mut loss = 0.0;
    let mut dz = vec![0.0; nv];
    for v in 0..nv {
        let p = sigmoid(z[v]);
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= y[v] * pc.ln() + (1.0 - y[v]) * (1.0 - pc).ln();
        dz[v] = (p - y[v]) / nv as f64;
    }
    loss /= nv as f64;

    let dz_m = DMatrix::from_row_slice(1, nv, &dz);
    let fused_m = DMatrix::from_column_slice(w.proj_dim(), 1, &fused);
    let cls_w = &fused_m * &dz_m;
    let d_fused = &w.cls_w * dz_m.transpose();
    let d_out = DMatrix::from_fn(n, w.proj_dim(), |_, c| d_fused[(c, 0)] / n as f64);
    let d_attn = &d_out * t.v.transpose();
    let d_v = t.attn.transpose() * &d_out;
    let scale = 1.0 / (w.proj_dim() as f64).sqrt();
    let mut d_scores = DMatrix::zeros(n, n);
    for i in 0..n {
        let a: Vec<f64> = t.attn.row(i).iter().copied().collect();
        let da: Vec<f64> = d_attn.row(i).iter().copied().collect();
        for (j, g) in softmax_backward(&a, &da).into_iter().enumerate() {
            d_scores[(i, j)] = g * scale;
        }
    }
    let d_q = &d_scores * &t.k;
    let d_k = d_scores.transpose() * &t.q;
    let ft = sample.features.transpose();
    let grad = AttentionWeights { wq: &ft * d_q, wk: &ft * d_k, wv: &ft * d_v, cls_w, cls_b: dz };
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for ContactTrainConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 5e-3, tau: DEFAULT_TAU }
    }
}

/// Full-batch Adam on mean BCE. Features are read only. Returns the
/// trained weights and the per-epoch training loss.
pub fn train_contact(data: &[ContactSample], init: &AttentionWeights, cfg: &ContactTrainConfig) -> Result<(AttentionWeights, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty("contact dataset".into()));
    }
    let mut w = init.clone();
    let mut x = w.flat();
    let (mut m, mut v) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let per: Vec<(f64, Vec<f64>)> = data
            .par_iter()
            .map(|s| bce_and_gradient(s, &w).map(|(l, g)| (l, g.flat())))
            .collect::<Result<_>>()?;
        let inv = 1.0 / data.len() as f64;
        let loss = per.iter().map(|p| p.0).sum::<f64>() * inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("contact loss at epoch {epoch}")));
        }
        history.push(loss);
        let mut g = vec![0.0; x.len()];
        for (_, gs) in &per {
            for (a, b) in g.iter_mut().zip(gs) {
                *a += b * inv;
            }
        }
        let t = epoch as i32 + 1;
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - f64::powi(b1, t));
            let vh = v[i] / (1.0 - f64::powi(b2, t));
            x[i] -= cfg.lr * mh / (vh.sqrt() + eps);
        }
        w.set_flat(&x);
    }
    Ok((w, history))
}

/// Precision/recall F1 of predicted against true index sets; two empty sets
/// score 1.
pub fn f1_score(pred: &[usize], truth: &[usize]) -> f64 {
    let p: std::collections::BTreeSet<_> = pred.iter().collect();
    let t: std::collections::BTreeSet<_> = truth.iter().collect();
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    let tp = p.intersection(&t).count() as f64;
    2.0 * tp / (p.len() + t.len()) as f64
}

/// Micro-averaged F1 over a dataset.
pub fn dataset_f1(data: &[ContactSample], w: &AttentionWeights, tau: f64) -> Result<f64> {
    let (mut tp, mut np, mut nt) = (0usize, 0usize, 0usize);
    for s in data {
        let (_, c) = predict(&s.features, w, tau)?;
        let t: std::collections::BTreeSet<_> = s.labels.iter().collect();
        tp += c.indices().iter().filter(|i| t.contains(i)).count();
        np += c.len();
        nt += t.len();
    }
    Ok(if np + nt == 0 { 1.0 } else { 2.0 * tp as f64 / (np + nt) as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticContactConfig {
    pub views: usize,
    pub feature_dim: usize,
    /// Oracle contact distance.
    pub contact_distance: f64,
    /// Per-view feature noise.
    pub noise: f64,
    /// Upper bound of the per-view fraction of vertices hidden from a view.
    pub max_dropout: f64,
    /// Joint-angle noise of the random frame poses.
    pub pose_noise: f64,
}

impl Default for SyntheticContactConfig {
    fn default() -> Self {
        Self { views: 6, feature_dim: DEFAULT_FEATURE_DIM, contact_distance: 0.08, noise: 0.05, max_dropout: 0.6, pose_noise: 0.15 }
    }
}

/// Frames of the body touching small balls placed just beyond randomly
/// chosen limb ends. Labels come from the geometric oracle on the posed template;
/// each view sees a fixed random projection of the contact indicator with
/// a view-specific subset of vertices dropped and additive noise, so no
/// single view carries the full label.
pub fn synthetic_contact_dataset(template: &BodyTemplate, frames: usize, cfg: &SyntheticContactConfig, seed: u64) -> Result<Vec<ContactSample>> {
    let nv = template.num_vertices();
    // The projection is a property of the stand-in encoder, fixed for all
    // datasets built from the same template.
    let proj = encoder_projection(nv, cfg.feature_dim);
    let children = template.children();
    let leaves: Vec<usize> = (0..template.num_joints()).filter(|&j| children[j].is_empty()).collect();
    let ball = icosphere(2, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut pose = Pose::rest(template.num_joints(), template.num_shapes());
        for t in pose.theta.iter_mut().skip(1) {
            *t = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * cfg.pose_noise;
        }
        let verts = posed_vertices(template, &pose)?;
        let kin = kinematics(template, &pose)?;
        let mut chosen: Vec<usize> = leaves.iter().copied().filter(|_| rng.gen_bool(0.35)).collect();
        if chosen.is_empty() {
            chosen.push(leaves[rng.gen_range(0..leaves.len())]);
        }
        let mut labels = Vec::new();
        for leaf in chosen {
            // Ball just beyond the limb end, roughly along the last bone.
            let (tip, bone) = limb_tip(template, &kin, &pose.translation, &verts, leaf);
            let jitter = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * 0.1;
            let dir = (bone + jitter).normalize();
            let radius = rng.gen_range(0.08..0.1);
            let centre = tip + dir * (radius + rng.gen_range(0.0..0.01));
            let mesh = TriMesh { vertices: ball.vertices.iter().map(|v| v * radius + centre).collect(), faces: ball.faces.clone() };
            labels.extend(contact_oracle(&verts, &mesh, cfg.contact_distance)?.into_vec());
        }
        labels.sort_unstable();
        labels.dedup();
        let features = encode_labels(&proj, &labels, cfg, &mut rng);
        out.push(ContactSample { features, labels });
    }
    Ok(out)
}

/// Fixed random projection from per-vertex labels to features, shared by
/// every dataset built for a template with `vertices` vertices.
pub fn encoder_projection(vertices: usize, feature_dim: usize) -> DMatrix<f64> {
    let mut prng = ChaCha8Rng::seed_from_u64(0x5eed);
    DMatrix::from_fn(feature_dim, vertices, |_, _| prng.sample::<f64, _>(StandardNormal) / (vertices as f64).sqrt())
}

/// Stand-in image encoder: each view sees the label set with a random
/// dropout rate, projected and perturbed by noise. Returns `views × D`.
pub fn encode_labels<R: Rng>(proj: &DMatrix<f64>, labels: &[usize], cfg: &SyntheticContactConfig, rng: &mut R) -> DMatrix<f64> {
    let nv = proj.ncols();
    let y = dense_labels(labels, nv);
    let mut features = DMatrix::zeros(cfg.views, cfg.feature_dim);
    for i in 0..cfg.views {
        let drop = rng.gen::<f64>() * cfg.max_dropout;
        let seen: Vec<f64> = y.iter().map(|v| if rng.gen::<f64>() < drop { 0.0 } else { *v }).collect();
        let f = proj * DMatrix::from_column_slice(nv, 1, &seen);
        for d in 0..cfg.feature_dim {
            features[(i, d)] = f[(d, 0)] + cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    features
}
