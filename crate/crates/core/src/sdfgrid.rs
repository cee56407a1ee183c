//! Signed distance field of a watertight triangle mesh sampled at voxel
//! centres, with trilinear value and normal lookup.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{Error, Result};
use crate::mathcore::Vec3;
use crate::objtrack::TriMesh;

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self { lo: Vec3::repeat(f64::INFINITY), hi: Vec3::repeat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn dist2(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let e = (self.lo[a] - p[a]).max(0.0).max(p[a] - self.hi[a]);
            d += e * e;
        }
        d
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over triangles for closest-point and
/// axis-line queries.
#[derive(Clone, Debug)]
pub struct Bvh {
    tris: Vec<[Vec3; 3]>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let mut tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|i| mesh.triangle(i)).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            let n = tris.len();
            Self::build(&mut tris, 0, n, &mut nodes);
        }
        Self { tris, nodes }
    }

    fn build(tris: &mut [[Vec3; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
        let mut bounds = Aabb::empty();
        let mut centroids = Aabb::empty();
        for t in &tris[start..end] {
            for p in t {
                bounds.grow(p);
            }
            centroids.grow(&((t[0] + t[1] + t[2]) / 3.0));
        }
        let id = nodes.len();
        if end - start <= LEAF_SIZE {
            nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        nodes.push(Node::Leaf { bounds, start, end });
        let ext = centroids.hi - centroids.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z { 0 } else if ext.y >= ext.z { 1 } else { 2 };
        let mid = (start + end) / 2;
        tris[start..end].select_nth_unstable_by(mid - start, |a, b| {
            let ca = a[0][axis] + a[1][axis] + a[2][axis];
            let cb = b[0][axis] + b[1][axis] + b[2][axis];
            ca.total_cmp(&cb)
        });
        let left = Self::build(tris, start, mid, nodes);
        let right = Self::build(tris, mid, end, nodes);
        nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    /// Squared distance from `p` to the closest triangle.
    pub fn nearest_dist2(&self, p: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        if self.nodes.is_empty() {
            return best;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds().dist2(p) >= best {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for t in &self.tris[*start..*end] {
                        let d = (closest_point_on_triangle(p, t) - p).norm_squared();
                        if d < best {
                            best = d;
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().dist2(p);
                    let dr = self.nodes[*right].bounds().dist2(p);
                    // Visit the nearer child first (pushed last).
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best
    }

    /// Coordinates along `axis` where the axis-parallel line through
    /// `(u, v)` (the other two coordinates in cyclic order) pierces the mesh.
    pub fn line_crossings(&self, axis: usize, u: f64, v: f64) -> Vec<f64> {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let bb = node.bounds();
            if u < bb.lo[b] || u > bb.hi[b] || v < bb.lo[c] || v > bb.hi[c] {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for t in &self.tris[*start..*end] {
                        if let Some(s) = axis_line_hit(t, axis, u, v) {
                            out.push(s);
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(*left);
                    stack.push(*right);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }
}

/// Closest point on a triangle (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, t: &[Vec3; 3]) -> Vec3 {
    let [a, b, c] = *t;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Strict-interior hit of an axis-parallel line; grazing hits on edges are
/// ignored and left to the majority vote.
fn axis_line_hit(t: &[Vec3; 3], axis: usize, u: f64, v: f64) -> Option<f64> {
    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
    let p: [(f64, f64); 3] = std::array::from_fn(|i| (t[i][b] - u, t[i][c] - v));
    let e = |i: usize, j: usize| p[i].0 * p[j].1 - p[i].1 * p[j].0;
    let (w0, w1, w2) = (e(1, 2), e(2, 0), e(0, 1));
    let pos = w0 > 0.0 && w1 > 0.0 && w2 > 0.0;
    let neg = w0 < 0.0 && w1 < 0.0 && w2 < 0.0;
    if !(pos || neg) {
        return None;
    }
    let s = w0 + w1 + w2;
    Some((w0 * t[0][axis] + w1 * t[1][axis] + w2 * t[2][axis]) / s)
}

pub const DEFAULT_DIMS: [usize; 3] = [64, 64, 64];
pub const DEFAULT_PAD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    /// Corner of the grid; cell `(i, j, k)` is centred at
    /// `origin + (idx + 0.5)·h`.
    pub origin: Vec3,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub pad: f64,
    /// x-fastest signed distances.
    pub values: Vec<f32>,
    pub mesh_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub distance: f64,
    /// Unit normal (+x when the gradient vanishes).
    pub normal: Vec3,
    pub degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    origin: [f64; 3],
    voxel: f64,
    dims: [usize; 3],
    pad: f64,
    mesh_hash: String,
}

pub fn mesh_hash(mesh: &TriMesh) -> String {
    let mut h = Sha256::new();
    for v in &mesh.vertices {
        for c in v.iter() {
            h.update(c.to_le_bytes());
        }
    }
    for f in &mesh.faces {
        for i in f {
            h.update((*i as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Voxelizes the signed distance of a watertight mesh over its bounding box
/// scaled by `1 + 2·pad` about the centre. Voxels are cubic; the axis with
/// the largest extent-to-cells ratio fixes `h`.
pub fn build_sdf(mesh: &TriMesh, dims: [usize; 3], pad: f64) -> Result<SdfGrid> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument(format!("grid dims {dims:?} must be at least 2")));
    }
    if !(pad >= 0.0) {
        return Err(Error::InvalidArgument("pad must be non-negative".into()));
    }
    if mesh.faces.is_empty() {
        return Err(Error::Empty("mesh has no faces".into()));
    }
    mesh.validate()?;
    mesh.check_watertight()?;
    let (lo, hi) = mesh.bounding_box();
    let centre = (lo + hi) / 2.0;
    let ext = (hi - lo) * (1.0 + 2.0 * pad);
    let voxel = (0..3).map(|a| ext[a] / dims[a] as f64).fold(0.0, f64::max);
    if !(voxel > 0.0) {
        return Err(Error::Degenerate("mesh has zero extent".into()));
    }
    let origin = centre - Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * (voxel / 2.0);
    let bvh = Bvh::new(mesh);
    let [nx, ny, nz] = dims;
    let centre_of = |i: usize, a: usize| origin[a] + (i as f64 + 0.5) * voxel;

    let unsigned: Vec<f64> = (0..nx * ny * nz)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let p = Vec3::new(centre_of(i, 0), centre_of(j, 1), centre_of(k, 2));
            bvh.nearest_dist2(&p).sqrt()
        })
        .collect();

    // Inside votes from parity along each axis; one grid line at a time.
    let mut votes = vec![0u8; nx * ny * nz];
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let (n_b, n_c) = (dims[b], dims[c]);
        let lines: Vec<Vec<bool>> = (0..n_b * n_c)
            .into_par_iter()
            .map(|l| {
                let (ib, ic) = (l % n_b, l / n_b);
                let hits = bvh.line_crossings(axis, centre_of(ib, b), centre_of(ic, c));
                let mut inside = Vec::with_capacity(dims[axis]);
                let mut count = 0;
                for ia in 0..dims[axis] {
                    let s = centre_of(ia, axis);
                    while count < hits.len() && hits[count] < s {
                        count += 1;
                    }
                    inside.push(count % 2 == 1);
                }
                inside
            })
            .collect();
        for (l, inside) in lines.iter().enumerate() {
            let (ib, ic) = (l % n_b, l / n_b);
            for (ia, &ins) in inside.iter().enumerate() {
                let mut ijk = [0usize; 3];
                ijk[axis] = ia;
                ijk[b] = ib;
                ijk[c] = ic;
                if ins {
                    votes[ijk[0] + nx * (ijk[1] + ny * ijk[2])] += 1;
                }
            }
        }
    }
    let values = unsigned
        .iter()
        .zip(&votes)
        .map(|(d, v)| if *v >= 2 { -(*d as f32) } else { *d as f32 })
        .collect();
    Ok(SdfGrid { origin, voxel, dims, pad, values, mesh_hash: mesh_hash(mesh) })
}

impl SdfGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)] as f64
    }

    pub fn cell_centre(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel
    }

    pub fn extent(&self) -> (Vec3, Vec3) {
        let size = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.voxel;
        (self.origin, self.origin + size)
    }

    /// Base cell and fractional offsets; coordinates are clamped to the
    /// span of cell centres.
    fn locate(&self, p: &Vec3) -> ([usize; 3], [f64; 3], [bool; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut inside = [true; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.voxel - 0.5;
            let max = (self.dims[a] - 1) as f64;
            let uc = u.clamp(0.0, max);
            inside[a] = u > 0.0 && u < max;
            let i0 = (uc.floor() as usize).min(self.dims[a] - 2);
            base[a] = i0;
            frac[a] = uc - i0 as f64;
        }
        (base, frac, inside)
    }

    fn corners(&self, base: [usize; 3]) -> [f64; 8] {
        std::array::from_fn(|c| self.value(base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1)))
    }

    /// Trilinear distance.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let (base, f, _) = self.locate(p);
        trilinear(&self.corners(base), f)
    }

    /// Derivative of the trilinear distance with respect to `p`; zero along
    /// clamped axes.
    pub fn distance_gradient(&self, p: &Vec3) -> Vec3 {
        let (base, f, inside) = self.locate(p);
        let v = self.corners(base);
        let mut g = Vec3::zeros();
        for a in 0..3 {
            if !inside[a] {
                continue;
            }
            let mut acc = 0.0;
            for (c, val) in v.iter().enumerate() {
                let mut w = 1.0;
                for b in 0..3 {
                    let bit = (c >> b) & 1;
                    if b == a {
                        w *= if bit == 1 { 1.0 } else { -1.0 };
                    } else {
                        w *= if bit == 1 { f[b] } else { 1.0 - f[b] };
                    }
                }
                acc += w * val;
            }
            g[a] = acc / self.voxel;
        }
        g
    }

    /// Central-difference gradient at a cell, one-sided on the border.
    pub fn cell_gradient(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let idx = [i, j, k];
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let lo = idx[a].saturating_sub(1);
            let hi = (idx[a] + 1).min(self.dims[a] - 1);
            let mut il = idx;
            il[a] = lo;
            let mut ih = idx;
            ih[a] = hi;
            let span = (hi - lo) as f64 * self.voxel;
            g[a] = (self.value(ih[0], ih[1], ih[2]) - self.value(il[0], il[1], il[2])) / span;
        }
        g
    }

    pub fn sample(&self, p: &Vec3) -> SdfSample {
        let (base, f, _) = self.locate(p);
        let distance = trilinear(&self.corners(base), f);
        let mut grad = Vec3::zeros();
        for c in 0..8 {
            let (i, j, k) = (base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1));
            let w = (0..3).fold(1.0, |acc, b| acc * if (c >> b) & 1 == 1 { f[b] } else { 1.0 - f[b] });
            if w != 0.0 {
                grad += self.cell_gradient(i, j, k) * w;
            }
        }
        let n = grad.norm();
        if n < 1e-12 || !n.is_finite() {
            SdfSample { distance, normal: Vec3::x(), degenerate: true }
        } else {
            SdfSample { distance, normal: grad / n, degenerate: false }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            origin: [self.origin.x, self.origin.y, self.origin.z],
            voxel: self.voxel,
            dims: self.dims,
            pad: self.pad,
            mesh_hash: self.mesh_hash.clone(),
        };
        binio::write(path, &header, &binio::f32s_to_bytes(&self.values))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (h, payload): (CacheHeader, _) = binio::decode(&bytes)?;
        let values = binio::bytes_to_f32s(payload, h.dims.iter().product())?;
        Ok(Self { origin: Vec3::from(h.origin), voxel: h.voxel, dims: h.dims, pad: h.pad, values, mesh_hash: h.mesh_hash })
    }

    /// Loads a cached grid if it matches the mesh and parameters, otherwise
    /// builds and caches a fresh one.
    pub fn load_or_build(path: &Path, mesh: &TriMesh, dims: [usize; 3], pad: f64) -> Result<Self> {
        if let Ok(g) = Self::load(path) {
            if g.mesh_hash == mesh_hash(mesh) && g.dims == dims && g.pad == pad {
                return Ok(g);
            }
            log::info!("SDF cache at {} is stale; rebuilding", path.display());
        }
        let g = build_sdf(mesh, dims, pad)?;
        g.save(path)?;
        Ok(g)
    }
}

fn trilinear(v: &[f64; 8], f: [f64; 3]) -> f64 {
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(v[0], v[1], f[0]);
    let x10 = lerp(v[2], v[3], f[0]);
    let x01 = lerp(v[4], v[5], f[0]);
    let x11 = lerp(v[6], v[7], f[0]);
    lerp(lerp(x00, x10, f[1]), lerp(x01, x11, f[1]), f[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::icosphere;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn sphere_grid() -> &'static (TriMesh, SdfGrid) {
        static G: OnceLock<(TriMesh, SdfGrid)> = OnceLock::new();
        G.get_or_init(|| {
            let m = icosphere(3, 1.0);
            let g = build_sdf(&m, [32, 32, 32], 0.1).unwrap();
            (m, g)
        })
    }

    #[test]
    fn closest_point_regions() {
        let t = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!((closest_point_on_triangle(&Vec3::new(0.2, 0.2, 1.0), &t) - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &t), Vec3::zeros());
        assert_eq!(closest_point_on_triangle(&Vec3::new(2.0, -0.5, 0.0), &t), Vec3::x());
        let p = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &t);
        assert!((p - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
        let p = closest_point_on_triangle(&Vec3::new(0.5, -1.0, 0.3), &t);
        assert!((p - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let m = icosphere(2, 1.0);
        let bvh = Bvh::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let brute = (0..m.faces.len())
                .map(|i| (closest_point_on_triangle(&p, &m.triangle(i)) - p).norm_squared())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(bvh.nearest_dist2(&p), brute);
        }
    }

    #[test]
    fn sphere_values_close_to_analytic() {
        let (_, g) = sphere_grid();
        let mut worst: f64 = 0.0;
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let c = g.cell_centre(i, j, k);
                    worst = worst.max((g.value(i, j, k) - (c.norm() - 1.0)).abs());
                }
            }
        }
        assert!(worst <= 0.02, "max deviation {worst}");
    }

    #[test]
    fn centroid_is_inside() {
        let (_, g) = sphere_grid();
        assert!(g.distance(&Vec3::zeros()) < 0.0);
    }

    #[test]
    fn padding_arithmetic() {
        let (m, g) = sphere_grid();
        let (lo, hi) = m.bounding_box();
        let (glo, ghi) = g.extent();
        let centre = (lo + hi) / 2.0;
        for a in 0..3 {
            let expected = (hi[a] - lo[a]) * 1.2;
            assert!(((ghi[a] - glo[a]) - expected).abs() < 1e-12);
            assert!(((glo[a] + ghi[a]) / 2.0 - centre[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_collapses_at_centres_and_midpoints() {
        let (_, g) = sphere_grid();
        let c = g.cell_centre(10, 12, 7);
        assert_eq!(g.distance(&c), g.value(10, 12, 7));
        let mid = (g.cell_centre(10, 12, 7) + g.cell_centre(11, 12, 7)) / 2.0;
        let expected = 0.5 * (g.value(10, 12, 7) + g.value(11, 12, 7));
        assert!((g.distance(&mid) - expected).abs() < 1e-12);
    }

    #[test]
    fn open_mesh_is_rejected_with_edges() {
        let mut m = icosphere(1, 1.0);
        m.faces.pop();
        match build_sdf(&m, [8, 8, 8], 0.1) {
            Err(Error::NotWatertight(edges)) => assert_eq!(edges.len(), 3),
            other => panic!("expected NotWatertight, got {other:?}"),
        }
    }

    #[test]
    fn no_negative_cells_outside_the_mesh_box() {
        let (m, g) = sphere_grid();
        let (lo, hi) = m.bounding_box();
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let c = g.cell_centre(i, j, k);
                    let outside = (0..3).any(|a| c[a] < lo[a] || c[a] > hi[a]);
                    if outside {
                        assert!(g.value(i, j, k) > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_field_normal_is_flagged() {
        let g = SdfGrid {
            origin: Vec3::zeros(),
            voxel: 1.0,
            dims: [3, 3, 3],
            pad: 0.0,
            values: vec![0.5; 27],
            mesh_hash: String::new(),
        };
        let s = g.sample(&Vec3::new(1.2, 1.4, 1.5));
        assert!(s.degenerate);
        assert_eq!(s.normal, Vec3::x());
    }

    #[test]
    fn cache_round_trip_and_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sdf.bin");
        let m = icosphere(1, 1.0);
        let g = SdfGrid::load_or_build(&path, &m, [8, 8, 8], 0.1).unwrap();
        assert_eq!(SdfGrid::load(&path).unwrap(), g);
        let moved = crate::objtrack::apply_transform(
            &m,
            &crate::objtrack::RigidTransform { rotation: crate::mathcore::Mat3::identity(), translation: Vec3::x() },
        );
        let g2 = SdfGrid::load_or_build(&path, &moved, [8, 8, 8], 0.1).unwrap();
        assert_ne!(g2.mesh_hash, g.mesh_hash);
        assert_eq!(SdfGrid::load(&path).unwrap().mesh_hash, mesh_hash(&moved));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (_, g) = sphere_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let an = g.distance_gradient(&p);
            for a in 0..3 {
                let h = 1e-7;
                let mut pp = p;
                pp[a] += h;
                let mut pm = p;
                pm[a] -= h;
                // Skip samples straddling a cell boundary.
                let u = (p[a] - g.origin[a]) / g.voxel - 0.5;
                if (u - u.round()).abs() < 1e-4 {
                    continue;
                }
                let fd = (g.distance(&pp) - g.distance(&pm)) / (2.0 * h);
                assert!((fd - an[a]).abs() < 1e-6, "{fd} vs {}", an[a]);
            }
        }
    }

    proptest! {
        #[test]
        fn trilinear_is_lipschitz(x in -1.2f64..1.2, y in -1.2f64..1.2, z in -1.2f64..1.2,
                                  dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0) {
            let (_, g) = sphere_grid();
            let mut l: f64 = 0.0;
            for k in 0..g.dims[2] {
                for j in 0..g.dims[1] {
                    for i in 0..g.dims[0] - 1 {
                        l = l.max((g.value(i + 1, j, k) - g.value(i, j, k)).abs());
                    }
                }
            }
            for k in 0..g.dims[2] {
                for j in 0..g.dims[1] - 1 {
                    for i in 0..g.dims[0] {
                        l = l.max((g.value(i, j + 1, k) - g.value(i, j, k)).abs());
                    }
                }
            }
            for k in 0..g.dims[2] - 1 {
                for j in 0..g.dims[1] {
                    for i in 0..g.dims[0] {
                        l = l.max((g.value(i, j, k + 1) - g.value(i, j, k)).abs());
                    }
                }
            }
            let lip = l / g.voxel;
            let p = Vec3::new(x, y, z);
            let q = p + Vec3::new(dx, dy, dz) * 1e-3;
            // Per-axis Lipschitz bound summed over axes (L1 norm of the step).
            let step = (q - p).abs().sum();
            prop_assert!((g.distance(&p) - g.distance(&q)).abs() <= lip * step + 1e-12);
        }

        #[test]
        fn exactly_linear_between_adjacent_centres(i in 0usize..31, j in 0usize..32, k in 0usize..32, t in 0.0f64..1.0) {
            let (_, g) = sphere_grid();
            let a = g.cell_centre(i, j, k);
            let b = g.cell_centre(i + 1, j, k);
            let expected = g.value(i, j, k) * (1.0 - t) + g.value(i + 1, j, k) * t;
            prop_assert!((g.distance(&(a + (b - a) * t)) - expected).abs() < 1e-12);
        }
    }
}
