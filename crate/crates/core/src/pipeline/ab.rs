//! Paired runs isolating one physics term: both arms start from the same
//! perturbed ground-truth scene and differ only in that term's weight.

use serde::{Deserialize, Serialize};

use crate::body::{blended_rotation, lbs_point};
use crate::error::{Error, Result};
use crate::gscene::{ComposedScene, HumanModel};
use crate::mathcore::Vec3;
use crate::objtrack::apply_transform;
use crate::physics::{camera_extent, mean_contact_distance, mean_penetration, optimize, penetration_fraction, OptimizeConfig};
use crate::sdfgrid::{build_sdf, SdfGrid};

use super::synth::Fixture;
use super::RunConfig;

/// Moves each contact Gaussian so its posed mean sits `offset` from the
/// object surface along the SDF normal (negative: inside). Canonical means
/// are recovered by inverting the blended skinning transform.
pub fn displace_contacts(scene: &mut ComposedScene, model: &HumanModel, grid: &SdfGrid, offset: f64) -> Result<()> {
    for &i in &scene.contacts.clone() {
        let h = scene.human[i];
        let w = model.weights(&h);
        let mut p = lbs_point(&h.canonical.mean, &w, model.transforms(), &model.pose.translation);
        for _ in 0..4 {
            let s = grid.sample(&p);
            p += s.normal * (offset - s.distance);
        }
        let a = blended_rotation(&w, model.transforms());
        let t = lbs_point(&Vec3::zeros(), &w, model.transforms(), &model.pose.translation);
        let inv = a.try_inverse().ok_or_else(|| Error::Degenerate(format!("blended rotation of Gaussian {i} is singular")))?;
        scene.human[i].canonical.mean = inv * (p - t);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbArm {
    pub mean_penetration: f64,
    /// Fraction of contact means deeper than one voxel.
    pub deep_fraction: f64,
    pub mean_contact_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbOutcome {
    pub voxel: f64,
    pub before: AbArm,
    pub on: AbArm,
    pub off: AbArm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Attraction,
    Repulsion,
}

fn measure(scene: &ComposedScene, model: &HumanModel, grid: &SdfGrid) -> AbArm {
    let hm = scene.human_means(model);
    AbArm {
        mean_penetration: mean_penetration(&hm, &scene.contacts, grid),
        deep_fraction: penetration_fraction(&hm, &scene.contacts, grid, grid.voxel),
        mean_contact_distance: mean_contact_distance(&hm, &scene.object_means(), &scene.contacts),
    }
}

/// Starts from the fixture's ground-truth scene with contacts displaced by
/// `offset_voxels` voxels from the surface, then runs `base` twice with
/// the other physics term disabled and the tested term on or off.
pub fn paired_run(fx: &Fixture, cfg: &RunConfig, base: &OptimizeConfig, term: Term, offset_voxels: f64) -> Result<AbOutcome> {
    let grid = build_sdf(&apply_transform(&fx.object, &fx.truth.object), [cfg.grid_dims; 3], cfg.grid_pad)?;
    let model = fx.truth_model()?;
    let mut start = fx.truth_scene.clone();
    if start.contacts.is_empty() {
        return Err(Error::Empty("fixture has no contacts".into()));
    }
    displace_contacts(&mut start, &model, &grid, offset_voxels * grid.voxel)?;
    let before = measure(&start, &model, &grid);
    let mut config = base.clone();
    config.extent = camera_extent(&fx.cameras(super::synth::Ring::Train));
    config.densify = None;
    let arm = |enabled: bool| -> Result<AbArm> {
        let mut c = config.clone();
        let w = if enabled { base.weights } else { crate::physics::LossWeights { lambda_attr: 0.0, lambda_rep: 0.0, ..base.weights } };
        c.weights = match term {
            Term::Attraction => crate::physics::LossWeights { lambda_rep: 0.0, ..w },
            Term::Repulsion => crate::physics::LossWeights { lambda_attr: 0.0, ..w },
        };
        let mut scene = start.clone();
        let mut m = model.clone();
        optimize(&mut scene, &mut m, &fx.train, Some(&grid), &c, None)?;
        Ok(measure(&scene, &m, &grid))
    };
    Ok(AbOutcome { voxel: grid.voxel, before, on: arm(true)?, off: arm(false)? })
}
