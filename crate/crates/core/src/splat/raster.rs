//! EWA projection, tile-based front-to-back compositing and its exact
//! reverse-mode derivative.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use super::camera::Camera;
use super::image::Image;
use crate::error::Result;
use crate::mathcore::{Mat3, Vec3};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.999;
pub const T_MIN: f64 = 1e-4;
pub const DILATION: f64 = 0.3;
pub const MAX_CONDITION: f64 = 1e12;

/// What the rasterizer consumes: a world-space mean and covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatPrimitive {
    pub mean: Vec3,
    pub cov: Mat3,
    pub opacity: f64,
    pub color: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub index: usize,
    pub cam_point: Vec3,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub depth: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the 3σ box, clipped.
    pub rect: [usize; 4],
}

impl Projection {
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.rect[0] && x <= self.rect[1] && y >= self.rect[2] && y <= self.rect[3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProjectionOutcome {
    Visible(Projection),
    /// Behind the near plane.
    Culled,
    /// 3σ box misses the image.
    Offscreen,
    /// Ill-conditioned screen covariance.
    Singular,
}

pub fn ewa_jacobian(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * t.x * iz2, 0.0, cam.fy * iz, -cam.fy * t.y * iz2)
}

/// Screen-space mean, covariance and depth of a primitive.
pub fn project(index: usize, p: &SplatPrimitive, cam: &Camera) -> ProjectionOutcome {
    let t = cam.to_camera(&p.mean);
    if t.z <= cam.near {
        return ProjectionOutcome::Culled;
    }
    let j = ewa_jacobian(cam, &t);
    let tm = j * cam.rotation;
    let mut cov2d = tm * p.cov * tm.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += DILATION;
    cov2d[(1, 1)] += DILATION;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let mid = 0.5 * (a + c);
    let disc = (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let (l_max, l_min) = (mid + disc, mid - disc);
    if !(l_min > 0.0) || !l_max.is_finite() || l_max / l_min > MAX_CONDITION {
        return ProjectionOutcome::Singular;
    }
    let det = a * c - b * b;
    let conic = Matrix2::new(c / det, -b / det, -b / det, a / det);
    let [mx, my] = cam.project_camera_point(&t);
    let r = 3.0 * l_max.sqrt();
    // Pixel centres sit at integer + 0.5.
    let lo_x = (mx - r - 0.5).ceil();
    let hi_x = (mx + r - 0.5).floor();
    let lo_y = (my - r - 0.5).ceil();
    let hi_y = (my + r - 0.5).floor();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if !(hi_x >= 0.0 && lo_x <= w - 1.0 && hi_y >= 0.0 && lo_y <= h - 1.0 && lo_x <= hi_x && lo_y <= hi_y) {
        return ProjectionOutcome::Offscreen;
    }
    let rect = [
        lo_x.max(0.0) as usize,
        hi_x.min(w - 1.0) as usize,
        lo_y.max(0.0) as usize,
        hi_y.min(h - 1.0) as usize,
    ];
    ProjectionOutcome::Visible(Projection {
        index,
        cam_point: t,
        mean2d: Vector2::new(mx, my),
        cov2d,
        conic,
        jacobian: j,
        depth: t.z,
        rect,
    })
}

#[derive(Clone, Debug)]
struct Records {
    /// Visible projections in front-to-back order.
    order: Vec<Projection>,
    /// Per tile, positions into `order`.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    background: Vec3,
    /// Primitive opacities and colors by primitive index.
    opacity: Vec<f64>,
    color: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Image,
    /// Primitives dropped for an ill-conditioned screen covariance.
    pub skipped_singular: usize,
    pub culled: usize,
    pub visible: usize,
    records: Records,
}

/// One blended contribution at a pixel.
#[derive(Clone, Copy, Debug)]
struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    /// Transmittance in front of this primitive.
    t_before: f64,
    d: Vector2<f64>,
}

fn blend_pixel(rec: &Records, list: &[u32], x: usize, y: usize, out: &mut Vec<Contribution>) -> f64 {
    out.clear();
    let mut t = 1.0;
    let centre = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
    for &slot in list {
        let p = &rec.order[slot as usize];
        if !p.covers(x, y) {
            continue;
        }
        let d = centre - p.mean2d;
        let q = &p.conic;
        let power = -0.5 * (q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y);
        let gauss = power.exp();
        let raw = rec.opacity[p.index] * gauss;
        let (alpha, clamped) = if raw > ALPHA_MAX { (ALPHA_MAX, true) } else { (raw, false) };
        out.push(Contribution { slot: slot as usize, alpha, gauss, clamped, t_before: t, d });
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    t
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Projections of visible primitives in compositing order.
    pub fn order(&self) -> &[Projection] {
        &self.records.order
    }

    /// Transmittance after each successive contribution at a pixel.
    pub fn transmittance_trace(&self, x: usize, y: usize) -> Vec<f64> {
        let list = &self.records.tiles[(y / TILE) * self.records.tiles_x + x / TILE];
        let mut c = Vec::new();
        let t_final = blend_pixel(&self.records, list, x, y, &mut c);
        let mut out: Vec<f64> = c.iter().skip(1).map(|k| k.t_before).collect();
        if !c.is_empty() {
            out.push(t_final);
        }
        out
    }
}

/// Renders primitives with front-to-back alpha compositing over `background`.
pub fn rasterize(prims: &[SplatPrimitive], cam: &Camera, background: Vec3) -> RenderOutput {
    let outcomes: Vec<ProjectionOutcome> =
        prims.par_iter().enumerate().map(|(i, p)| project(i, p, cam)).collect();
    let (mut culled, mut singular) = (0, 0);
    let mut order = Vec::new();
    for o in outcomes {
        match o {
            ProjectionOutcome::Visible(p) => order.push(p),
            ProjectionOutcome::Culled => culled += 1,
            ProjectionOutcome::Singular => singular += 1,
            ProjectionOutcome::Offscreen => {}
        }
    }
    order.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (slot, p) in order.iter().enumerate() {
        for ty in p.rect[2] / TILE..=p.rect[3] / TILE {
            for tx in p.rect[0] / TILE..=p.rect[1] / TILE {
                tiles[ty * tiles_x + tx].push(slot as u32);
            }
        }
    }
    let records = Records {
        order,
        tiles,
        tiles_x,
        background,
        opacity: prims.iter().map(|p| p.opacity).collect(),
        color: prims.iter().map(|p| p.color).collect(),
    };

    let (w, h) = (cam.width, cam.height);
    let tile_pixels: Vec<Vec<(usize, usize, Vec3, f64)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &records.tiles[tile];
            let mut contribs = Vec::new();
            let mut out = Vec::with_capacity(TILE * TILE);
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let t = blend_pixel(&records, list, x, y, &mut contribs);
                    let mut c = Vec3::zeros();
                    for k in &contribs {
                        c += records.color[records.order[k.slot].index] * (k.alpha * k.t_before);
                    }
                    out.push((x, y, c + background * t, 1.0 - t));
                }
            }
            out
        })
        .collect();
    let mut color = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    for px in tile_pixels.into_iter().flatten() {
        color.pixel_mut(px.0, px.1).copy_from_slice(px.2.as_slice());
        alpha.pixel_mut(px.0, px.1)[0] = px.3;
    }
    let visible = records.order.len();
    RenderOutput { color, alpha, skipped_singular: singular, culled, visible, records }
}

/// Gradient of a scalar loss with respect to one primitive.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub mean: Vec3,
    /// Symmetric gradient with respect to the world covariance.
    pub cov: Mat3,
    pub opacity: f64,
    pub color: Vec3,
    /// Gradient with respect to the projected pixel-space mean.
    pub mean2d: [f64; 2],
}

/// Per-projection screen-space gradient: mean2d (2), conic a/b/c (3),
/// opacity, color (3).
type ScreenGrad = [f64; 9];

/// Reverse pass of [`rasterize`] for `dL/dcolor` and optional `dL/dalpha`.
pub fn backward(
    prims: &[SplatPrimitive],
    cam: &Camera,
    render: &RenderOutput,
    d_color: &Image,
    d_alpha: Option<&Image>,
) -> Result<Vec<PrimitiveGrad>> {
    render.color.same_shape(d_color)?;
    if let Some(da) = d_alpha {
        render.alpha.same_shape(da)?;
    }
    let rec = &render.records;
    let (w, h) = (render.width(), render.height());
    let tiles_y = h.div_ceil(TILE);

    let per_tile: Vec<Vec<ScreenGrad>> = (0..rec.tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % rec.tiles_x, tile / rec.tiles_x);
            let list = &rec.tiles[tile];
            let mut local = vec![[0.0; 9]; list.len()];
            if list.is_empty() {
                return local;
            }
            // Tile lists are ascending in slot, so positions are recoverable.
            let lookup = |slot: usize| -> usize { list.binary_search(&(slot as u32)).expect("slot in tile list") };
            let mut contribs = Vec::new();
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let t_final = blend_pixel(rec, list, x, y, &mut contribs);
                    let gc = Vec3::from_column_slice(d_color.pixel(x, y));
                    let ga = d_alpha.map_or(0.0, |a| a.pixel(x, y)[0]);
                    if gc == Vec3::zeros() && ga == 0.0 {
                        continue;
                    }
                    let mut behind = rec.background * t_final;
                    for k in contribs.iter().rev() {
                        let p = &rec.order[k.slot];
                        let c = rec.color[p.index];
                        let one_minus = 1.0 - k.alpha;
                        let d_alpha_c = c * k.t_before - behind / one_minus;
                        let dl_dalpha = gc.dot(&d_alpha_c) + ga * t_final / one_minus;
                        let g = &mut local[lookup(k.slot)];
                        let dc = gc * (k.alpha * k.t_before);
                        g[6] += dc.x;
                        g[7] += dc.y;
                        g[8] += dc.z;
                        behind += c * (k.alpha * k.t_before);
                        if k.clamped {
                            continue;
                        }
                        g[5] += dl_dalpha * k.gauss;
                        let dl_dpower = dl_dalpha * k.alpha;
                        let q = &p.conic;
                        let d = k.d;
                        g[0] += dl_dpower * (q[(0, 0)] * d.x + q[(0, 1)] * d.y);
                        g[1] += dl_dpower * (q[(0, 1)] * d.x + q[(1, 1)] * d.y);
                        g[2] += dl_dpower * (-0.5 * d.x * d.x);
                        g[3] += dl_dpower * (-d.x * d.y);
                        g[4] += dl_dpower * (-0.5 * d.y * d.y);
                    }
                }
            }
            local
        })
        .collect();

    // Fixed reduction order: tiles in index order, entries in list order.
    let mut screen = vec![[0.0; 9]; rec.order.len()];
    for (tile, local) in per_tile.iter().enumerate() {
        for (k, g) in local.iter().enumerate() {
            let s = &mut screen[rec.tiles[tile][k] as usize];
            for i in 0..9 {
                s[i] += g[i];
            }
        }
    }

    let chained: Vec<(usize, PrimitiveGrad)> = rec
        .order
        .par_iter()
        .zip(screen.par_iter())
        .map(|(p, s)| (p.index, chain_projection(cam, p, &prims[p.index].cov, s)))
        .collect();
    let mut out = vec![PrimitiveGrad::default(); prims.len()];
    for (i, g) in chained {
        out[i] = g;
    }
    Ok(out)
}

fn chain_projection(cam: &Camera, p: &Projection, sigma: &Mat3, s: &ScreenGrad) -> PrimitiveGrad {
    let g_mean2d = Vector2::new(s[0], s[1]);
    let g_conic = Matrix2::new(s[2], 0.5 * s[3], 0.5 * s[3], s[4]);
    let g_cov2d = -(p.conic * g_conic * p.conic);
    let j = p.jacobian;
    let tm = j * cam.rotation;
    let g_sigma = tm.transpose() * g_cov2d * tm;
    let g_tm = 2.0 * g_cov2d * tm * sigma;
    let g_j = g_tm * cam.rotation.transpose();

    let t = p.cam_point;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = j.transpose() * g_mean2d;
    g_t.x += g_j[(0, 2)] * (-cam.fx * iz2);
    g_t.y += g_j[(1, 2)] * (-cam.fy * iz2);
    g_t.z += g_j[(0, 0)] * (-cam.fx * iz2)
        + g_j[(0, 2)] * (2.0 * cam.fx * t.x * iz3)
        + g_j[(1, 1)] * (-cam.fy * iz2)
        + g_j[(1, 2)] * (2.0 * cam.fy * t.y * iz3);

    PrimitiveGrad {
        mean: cam.rotation.transpose() * g_t,
        cov: 0.5 * (g_sigma + g_sigma.transpose()),
        opacity: s[5],
        color: Vec3::new(s[6], s[7], s[8]),
        mean2d: [s[0], s[1]],
    }
}
