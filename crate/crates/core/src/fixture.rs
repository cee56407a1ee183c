//! Procedural meshes and camera layouts used by synthetic scenes and tests.

use std::collections::HashMap;

use crate::mathcore::Vec3;
use crate::objtrack::TriMesh;
use crate::splat::Camera;

/// Subdivided icosahedron projected to a sphere; `20·4^subdivisions` faces,
/// outward-wound.
pub fn icosphere(subdivisions: usize, radius: f64) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vs: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                vs.push(((vs[a] + vs[b]) / 2.0).normalize());
                vs.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh { vertices: vertices.into_iter().map(|v| v * radius).collect(), faces }
}

/// Star-shaped closed blob with no rotational symmetry: an icosphere whose
/// radius varies with direction. Scaled so its half-extent is about `size`.
pub fn asymmetric_object(size: f64, centre: Vec3) -> TriMesh {
    let mut m = icosphere(2, 1.0);
    let a = Vec3::new(1.0, 0.3, 0.2).normalize();
    let b = Vec3::new(-0.2, 1.0, 0.5).normalize();
    for v in m.vertices.iter_mut() {
        let d = *v;
        let r = 1.0 + 0.35 * d.dot(&a).max(0.0).powi(2) + 0.2 * d.dot(&b).powi(3) + 0.1 * d.x * d.z;
        *v = Vec3::new(d.x * 1.2, d.y * 0.8, d.z) * (r * size / 1.4) + centre;
    }
    m
}

/// Axis-aligned box with outward winding.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriMesh {
    let v = |i: usize| Vec3::new(if i & 1 == 0 { lo.x } else { hi.x }, if i & 2 == 0 { lo.y } else { hi.y }, if i & 4 == 0 { lo.z } else { hi.z });
    let vertices = (0..8).map(v).collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    TriMesh { vertices, faces }
}

/// `n` cameras evenly spaced on a horizontal circle around `target`,
/// starting at angle `phase` (radians) and all looking at the target.
pub fn camera_ring(n: usize, radius: f64, height: f64, target: Vec3, phase: f64, fov_x: f64, width: usize, height_px: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let ang = phase + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = target + Vec3::new(radius * ang.sin(), height, radius * ang.cos());
            Camera::look_at(eye, target, Vec3::y(), fov_x, width, height_px).expect("ring cameras are non-degenerate")
        })
        .collect()
}

/// Training and held-out rings: held-out cameras sit halfway between
/// consecutive training cameras.
pub fn interleaved_rings(n: usize, radius: f64, height: f64, target: Vec3, fov_x: f64, width: usize, height_px: usize) -> (Vec<Camera>, Vec<Camera>) {
    let train = camera_ring(n, radius, height, target, 0.0, fov_x, width, height_px);
    let held = camera_ring(n, radius, height, target, std::f64::consts::PI / n as f64, fov_x, width, height_px);
    (train, held)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts_and_closure() {
        for s in 0..4 {
            let m = icosphere(s, 2.0);
            assert_eq!(m.faces.len(), 20 * 4usize.pow(s as u32));
            assert_eq!(m.vertices.len(), 10 * 4usize.pow(s as u32) + 2);
            m.check_watertight().unwrap();
            assert!(m.signed_volume() > 0.0);
            for v in &m.vertices {
                assert!((v.norm() - 2.0).abs() < 1e-12);
            }
        }
        assert_eq!(icosphere(3, 1.0).faces.len(), 1280);
    }

    #[test]
    fn box_is_closed_and_outward() {
        let m = box_mesh(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0));
        m.check_watertight().unwrap();
        assert!((m.signed_volume() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn object_is_closed_and_outward() {
        let m = asymmetric_object(0.2, Vec3::new(0.3, 0.5, 0.0));
        m.check_watertight().unwrap();
        m.validate().unwrap();
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn ring_cameras_face_the_target() {
        let target = Vec3::new(0.0, 0.8, 0.0);
        let cams = camera_ring(6, 3.0, 0.5, target, 0.0, 0.8, 64, 64);
        assert_eq!(cams.len(), 6);
        for c in &cams {
            let t = c.to_camera(&target);
            let [u, v] = c.project_camera_point(&t);
            assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9 && t.z > 0.0);
        }
    }
}
