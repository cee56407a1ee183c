//! Rigid object tracking: triangle meshes, Kabsch alignment and
//! point-to-point ICP against a template mesh.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !crate::mathcore::is_rotation(&self.rotation, 1e-9) {
            return Err(Error::InvalidArgument("rotation is not orthonormal with det +1".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_error(&self, other: &RigidTransform) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let m = Self { vertices, faces };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertex".into()));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&k| k >= self.vertices.len()) {
                return Err(Error::InvalidArgument(format!("face {i} index out of range")));
            }
            if self.face_area(i) <= 0.0 {
                return Err(Error::Degenerate(format!("face {i} has zero area")));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let f = self.faces[i];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    pub fn face_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Edges not shared by exactly two faces.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let mut bad: Vec<_> = counts.into_iter().filter(|(_, c)| *c != 2).map(|(e, _)| e).collect();
        bad.sort_unstable();
        bad
    }

    pub fn check_watertight(&self) -> Result<()> {
        let bad = self.boundary_edges();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::NotWatertight(bad))
        }
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    /// Length of the bounding-box diagonal.
    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Signed volume by the divergence theorem; positive for outward faces.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parses vertices and triangular faces; other records are ignored.
    /// Face tokens may carry `/vt/vn` suffixes and negative indices.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
                    if c.len() != 3 {
                        return Err(Error::Format(format!("line {}: vertex needs 3 coordinates", ln + 1)));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head
                                .parse()
                                .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
                            let n = vertices.len() as i64;
                            let k = if i < 0 { n + i } else { i - 1 };
                            if k < 0 || k >= n {
                                return Err(Error::Format(format!("line {}: index {i} out of range", ln + 1)));
                            }
                            Ok(k as usize)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(Error::Format(format!(
                            "line {}: only triangles are supported, got {} indices",
                            ln + 1,
                            idx.len()
                        )));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        Self::from_obj(&std::fs::read_to_string(path)?)
    }
}

pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn load_markers(path: &Path) -> Result<Vec<Vec3>> {
    let raw: Vec<[f64; 3]> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(raw.into_iter().map(Vec3::from).collect())
}

pub fn save_markers(path: &Path, markers: &[Vec3]) -> Result<()> {
    let raw: Vec<[f64; 3]> = markers.iter().map(|m| [m.x, m.y, m.z]).collect();
    std::fs::write(path, serde_json::to_string(&raw)?)?;
    Ok(())
}

/// Least-squares rigid transform with `R p_i + T ≈ q_i`.
pub fn kabsch(p: &[Vec3], q: &[Vec3]) -> Result<RigidTransform> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} points", p.len(), q.len())));
    }
    if p.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 pairs, got {}", p.len())));
    }
    if p.iter().chain(q).any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("kabsch input".into()));
    }
    let n = p.len() as f64;
    let cp = p.iter().sum::<Vec3>() / n;
    let cq = q.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (a - cp) * (b - cq).transpose();
    }
    let svd = SVD::new(h, true, true);
    let s = svd.singular_values;
    let scale = s[0].max(f64::MIN_POSITIVE);
    if s[1] <= 1e-12 * scale {
        return Err(Error::Degenerate("cross-covariance has rank below 2 (collinear points)".into()));
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let corr = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = v * corr * u.transpose();
    Ok(RigidTransform { rotation, translation: cq - rotation * cp })
}

/// Exact nearest-neighbour lookup with lowest-index tie breaking. Small
/// sets use brute force; larger ones hash points into a uniform grid.
#[derive(Clone, Debug)]
pub struct NearestIndex {
    points: Vec<Vec3>,
    grid: Option<Grid>,
}

#[derive(Clone, Debug)]
struct Grid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl Grid {
    fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            let v = ((p[a] - self.origin[a]) / self.cell).floor() as i64;
            c[a] = v.clamp(0, self.dims[a] as i64 - 1);
        }
        c
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }
}

impl NearestIndex {
    pub const BRUTE_FORCE_LIMIT: usize = 5000;

    pub fn new(points: &[Vec3]) -> Self {
        let grid = (points.len() >= Self::BRUTE_FORCE_LIMIT).then(|| Self::build_grid(points));
        Self { points: points.to_vec(), grid }
    }

    fn build_grid(points: &[Vec3]) -> Grid {
        let (lo, hi) = bounding_box(points);
        let ext = (hi - lo).map(|e| e.max(1e-9));
        // Aim for about two points per occupied cell on a surface-like set.
        let cell = (ext.x * ext.y * ext.z / (points.len() as f64 / 2.0)).cbrt().max(ext.max() / 256.0);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).ceil() as usize).max(1));
        let mut grid = Grid { origin: lo, cell, dims, starts: Vec::new(), items: Vec::new() };
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let flat: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &f in &flat {
            counts[f + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; points.len()];
        for (i, &f) in flat.iter().enumerate() {
            items[fill[f]] = i;
            fill[f] += 1;
        }
        grid.starts = counts;
        grid.items = items;
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// `(index, squared distance)` of the closest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        match &self.grid {
            None => brute_nearest(&self.points, q),
            Some(g) => Some(self.grid_nearest(g, q)),
        }
    }

    fn grid_nearest(&self, g: &Grid, q: &Vec3) -> (usize, f64) {
        let c = g.cell_of(q);
        // Distance from q to the clamped cell box bounds how far shells must grow.
        let outside = {
            let mut d2 = 0.0;
            for a in 0..3 {
                let lo = g.origin[a] + c[a] as f64 * g.cell;
                let hi = lo + g.cell;
                let e = if q[a] < lo { lo - q[a] } else if q[a] > hi { q[a] - hi } else { 0.0 };
                d2 += e * e;
            }
            d2.sqrt()
        };
        let max_r = *g.dims.iter().max().expect("3 dims") as i64;
        let mut best = (f64::INFINITY, usize::MAX);
        for r in 0..=max_r {
            for x in c[0] - r..=c[0] + r {
                for y in c[1] - r..=c[1] + r {
                    for z in c[2] - r..=c[2] + r {
                        let on_shell = (x - c[0]).abs() == r || (y - c[1]).abs() == r || (z - c[2]).abs() == r;
                        if !on_shell {
                            continue;
                        }
                        if x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        let cc = [x, y, z];
                        if (0..3).any(|a| cc[a] >= g.dims[a] as i64) {
                            continue;
                        }
                        let f = g.flat(cc);
                        for &i in &g.items[g.starts[f]..g.starts[f + 1]] {
                            let d = (self.points[i] - q).norm_squared();
                            if d < best.0 || (d == best.0 && i < best.1) {
                                best = (d, i);
                            }
                        }
                    }
                }
            }
            // Every point in a shell beyond r is at least r·cell − outside away.
            let reach = r as f64 * g.cell - outside;
            if best.1 != usize::MAX && reach > 0.0 && reach * reach > best.0 {
                break;
            }
        }
        (best.1, best.0)
    }
}

fn brute_nearest(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Stop once the RMS residual changes by less than this.
    pub tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// RMS residual after each correspondence step, starting with the
    /// initial estimate.
    pub rms_history: Vec<f64>,
    pub iterations: usize,
}

impl IcpResult {
    pub fn final_rms(&self) -> f64 {
        *self.rms_history.last().expect("history is never empty")
    }
}

fn correspondences(index: &NearestIndex, markers: &[Vec3], t: &RigidTransform) -> (Vec<usize>, f64) {
    let inv = t.inverse();
    let hits: Vec<(usize, f64)> = markers
        .par_iter()
        .map(|m| index.nearest(&inv.apply(m)).expect("non-empty template"))
        .collect();
    let rms = (hits.iter().map(|h| h.1).sum::<f64>() / markers.len() as f64).sqrt();
    (hits.into_iter().map(|h| h.0).collect(), rms)
}

/// Point-to-point ICP estimating `T` with `markers ≈ T(template)`.
pub fn icp_rigid(
    markers: &[Vec3],
    template: &TriMesh,
    init: &RigidTransform,
    options: &IcpOptions,
) -> Result<IcpResult> {
    if markers.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 markers, got {}", markers.len())));
    }
    if template.vertices.is_empty() {
        return Err(Error::Empty("template mesh has no vertices".into()));
    }
    if markers.iter().any(|m| !m.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("marker".into()));
    }
    init.validate()?;
    let index = NearestIndex::new(&template.vertices);
    let mut t = *init;
    let (mut corr, mut rms) = correspondences(&index, markers, &t);
    let mut history = vec![rms];
    let mut iterations = 0;
    for _ in 0..options.max_iters {
        iterations += 1;
        let src: Vec<Vec3> = corr.iter().map(|&i| template.vertices[i]).collect();
        let next = kabsch(&src, markers)?;
        let (next_corr, next_rms) = correspondences(&index, markers, &next);
        // Kabsch cannot increase the residual for fixed pairs and re-pairing
        // cannot either; guard against round-off anyway.
        if next_rms > rms {
            break;
        }
        let change = rms - next_rms;
        t = next;
        corr = next_corr;
        rms = next_rms;
        history.push(rms);
        if change < options.tol {
            break;
        }
    }
    Ok(IcpResult { transform: t, rms_history: history, iterations })
}

fn centroid_and_axes(points: &[Vec3]) -> (Vec3, Mat3) {
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let cov = points.iter().fold(Mat3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes = Mat3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (c, axes)
}

/// ICP from several starts, keeping the lowest final RMS (earliest start
/// on ties). The starts are the centroid offset with identity rotation and
/// the four proper rotations mapping the template's principal axes onto
/// the markers'. Assumes the markers cover the whole template.
pub fn icp_global(markers: &[Vec3], template: &TriMesh, options: &IcpOptions) -> Result<(RigidTransform, IcpResult)> {
    if markers.len() < 3 || template.vertices.is_empty() {
        return Err(Error::InvalidArgument("need at least 3 markers and a non-empty template".into()));
    }
    let (cm, am) = centroid_and_axes(markers);
    let (ct, at) = centroid_and_axes(&template.vertices);
    let mut rotations = vec![Mat3::identity()];
    for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let mut s = Mat3::from_diagonal(&Vec3::new(sx, sy, 1.0));
        let r = am * s * at.transpose();
        if r.determinant() < 0.0 {
            s[(2, 2)] = -1.0;
        }
        rotations.push(am * s * at.transpose());
    }
    let mut best: Option<(RigidTransform, IcpResult)> = None;
    for r in rotations {
        let init = RigidTransform::new(r, cm - r * ct)?;
        let res = icp_rigid(markers, template, &init, options)?;
        if best.as_ref().map_or(true, |(_, b)| res.final_rms() < b.final_rms()) {
            best = Some((init, res));
        }
    }
    Ok(best.expect("at least one start"))
}

pub fn apply_transform(mesh: &TriMesh, t: &RigidTransform) -> TriMesh {
    TriMesh { vertices: mesh.vertices.iter().map(|v| t.apply(v)).collect(), faces: mesh.faces.clone() }
}
