//! Seeded synthetic capture: a toy body holding an object, ring cameras,
//! ground-truth renders and the noisy observations the pipeline starts from.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::body::{generate_toy_body, kinematics, limb_tip, posed_joints, posed_vertices, BodyTemplate, ModulationNet, Pose};
use crate::contact::{encode_labels, encoder_projection};
use crate::error::{Error, Result};
use crate::fixture::{asymmetric_object, interleaved_rings};
use crate::gscene::{deform_object, init_from_vertices, init_human, compose, ComposedScene, HumanModel};
use crate::mathcore::{axis_angle_to_rotation, AxisAngle, Vec3};
use crate::objtrack::{apply_transform, save_markers, RigidTransform, TriMesh};
use crate::physics::{contact_oracle, View};
use crate::poseref::{noisy_pose, synthesize_detections, ObservationRecord};
use crate::sdfgrid::Bvh;
use crate::splat::{rasterize, Camera, Image};

use super::RunConfig;

/// Which camera ring a file belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ring {
    Train,
    Heldout,
}

impl Ring {
    fn tag(self) -> &'static str {
        match self {
            Ring::Train => "train",
            Ring::Heldout => "heldout",
        }
    }
}

/// File layout of a fixture directory.
#[derive(Clone, Debug)]
pub struct FixturePaths(pub PathBuf);

impl FixturePaths {
    pub fn manifest(&self) -> PathBuf {
        self.0.join("manifest.json")
    }
    pub fn template(&self) -> PathBuf {
        self.0.join("template.json")
    }
    pub fn object(&self) -> PathBuf {
        self.0.join("object.obj")
    }
    pub fn markers(&self) -> PathBuf {
        self.0.join("markers.json")
    }
    pub fn camera(&self, ring: Ring, i: usize) -> PathBuf {
        self.0.join(format!("cameras/{}_{i:02}.json", ring.tag()))
    }
    /// Raw `f64` image; the PNG next to it is for viewing.
    pub fn image(&self, ring: Ring, i: usize) -> PathBuf {
        self.0.join(format!("images/{}_{i:02}.bin", ring.tag()))
    }
    pub fn mask(&self, ring: Ring, i: usize) -> PathBuf {
        self.0.join(format!("masks/{}_{i:02}.bin", ring.tag()))
    }
    /// Human-visibility mask referenced by the observations.
    pub fn visibility_name(i: usize) -> String {
        format!("visibility/train_{i:02}.png")
    }
    pub fn observations(&self) -> PathBuf {
        self.0.join("observations.json")
    }
    pub fn initial_pose(&self) -> PathBuf {
        self.0.join("initial_pose.json")
    }
    pub fn contact_features(&self) -> PathBuf {
        self.0.join("contact_features.bin")
    }
    pub fn truth(&self) -> PathBuf {
        self.0.join("gt/truth.json")
    }
    pub fn truth_scene(&self) -> PathBuf {
        self.0.join("gt/scene.bin")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

/// Ground truth kept beside the fixture for evaluation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Pose of every frame; the last one is rendered.
    pub trajectory: Vec<Pose>,
    pub object: RigidTransform,
    /// Template vertices within the contact distance of the object.
    pub contacts: Vec<usize>,
}

impl Truth {
    pub fn pose(&self) -> &Pose {
        self.trajectory.last().expect("trajectory is never empty")
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    views: usize,
    dim: usize,
}

pub fn save_features(path: &Path, f: &DMatrix<f64>) -> Result<()> {
    let row_major: Vec<f64> = (0..f.nrows()).flat_map(|i| (0..f.ncols()).map(move |j| f[(i, j)])).collect();
    binio::write(path, &FeatureHeader { views: f.nrows(), dim: f.ncols() }, &binio::f64s_to_bytes(&row_major))
}

pub fn load_features(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = std::fs::read(path)?;
    let (h, payload): (FeatureHeader, _) = binio::decode(&bytes)?;
    let v = binio::bytes_to_f64s(payload, h.views * h.dim)?;
    Ok(DMatrix::from_row_slice(h.views, h.dim, &v))
}

/// Everything `synth` writes, in memory.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub manifest: Manifest,
    pub template: BodyTemplate,
    /// Object mesh in its own frame.
    pub object: TriMesh,
    pub markers: Vec<Vec3>,
    pub train: Vec<View>,
    pub heldout: Vec<View>,
    pub visibility: Vec<Image>,
    pub observations: Vec<ObservationRecord>,
    pub initial_pose: Pose,
    pub contact_features: DMatrix<f64>,
    pub truth: Truth,
    pub truth_scene: ComposedScene,
}

impl Fixture {
    /// Body model of the rendered frame with a zero modulation network.
    pub fn truth_model(&self) -> Result<HumanModel> {
        let k = self.template.num_joints();
        HumanModel::new(
            self.template.clone(),
            self.truth.pose().clone(),
            ModulationNet::zeros(ModulationNet::DEFAULT_FREQUENCIES, ModulationNet::DEFAULT_HIDDEN, k),
        )
    }

    pub fn cameras(&self, ring: Ring) -> Vec<Camera> {
        let v = if ring == Ring::Train { &self.train } else { &self.heldout };
        v.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = FixturePaths(dir.to_path_buf());
        for sub in ["cameras", "images", "masks", "visibility", "gt"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        std::fs::write(p.manifest(), serde_json::to_string_pretty(&self.manifest)?)?;
        self.template.save(&p.template())?;
        self.object.save_obj(&p.object())?;
        save_markers(&p.markers(), &self.markers)?;
        for (ring, views) in [(Ring::Train, &self.train), (Ring::Heldout, &self.heldout)] {
            for (i, v) in views.iter().enumerate() {
                v.camera.save(&p.camera(ring, i))?;
                v.image.save_raw(&p.image(ring, i))?;
                v.image.save_png(&p.image(ring, i).with_extension("png"))?;
                v.mask.save_raw(&p.mask(ring, i))?;
                v.mask.save_png(&p.mask(ring, i).with_extension("png"))?;
            }
        }
        for (i, m) in self.visibility.iter().enumerate() {
            m.save_png(&dir.join(FixturePaths::visibility_name(i)))?;
        }
        crate::poseref::save_observations(&p.observations(), &self.observations)?;
        std::fs::write(p.initial_pose(), serde_json::to_string_pretty(&self.initial_pose)?)?;
        save_features(&p.contact_features(), &self.contact_features)?;
        std::fs::write(p.truth(), serde_json::to_string_pretty(&self.truth)?)?;
        crate::gscene::save_checkpoint(&p.truth_scene(), &self.truth_scene, &self.truth_model()?)?;
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(FixturePaths(dir.to_path_buf()).manifest())?)?)
}

pub fn load_cameras(p: &FixturePaths, ring: Ring, n: usize) -> Result<Vec<Camera>> {
    (0..n).map(|i| Camera::load(&p.camera(ring, i))).collect()
}

pub fn load_views(p: &FixturePaths, ring: Ring, n: usize) -> Result<Vec<View>> {
    (0..n)
        .map(|i| {
            Ok(View {
                camera: Camera::load(&p.camera(ring, i))?,
                image: Image::load_raw(&p.image(ring, i))?,
                mask: Image::load_raw(&p.mask(ring, i))?,
            })
        })
        .collect()
}

fn gaussian3<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma
}

fn human_color(p: &Vec3) -> Vec3 {
    Vec3::new(
        0.55 + 0.3 * (6.0 * p.y + 2.0 * p.x).sin(),
        0.45 + 0.25 * (5.0 * p.x + 1.0).cos(),
        0.5 + 0.3 * (4.0 * p.y - 3.0 * p.z + 0.5).sin(),
    )
}

fn object_color(p: &Vec3) -> Vec3 {
    Vec3::new(0.85, 0.55 + 0.2 * (25.0 * p.x).sin(), 0.2 + 0.15 * (25.0 * p.y).cos())
}

/// Leaf joint whose rest position lies furthest along +x (the right hand
/// of the toy body).
fn right_hand(template: &BodyTemplate) -> usize {
    let children = template.children();
    (0..template.num_joints())
        .filter(|&j| children[j].is_empty())
        .max_by(|&a, &b| template.joints[a].x.total_cmp(&template.joints[b].x).then(b.cmp(&a)))
        .expect("template has joints")
}

/// Places the object beyond the hand along the last bone, sliding it in
/// from far away until the closest body vertex is `gap` from its surface.
fn place_object(template: &BodyTemplate, pose: &Pose, local: &TriMesh, rotation: &nalgebra::Matrix3<f64>, gap: f64, size: f64) -> Result<RigidTransform> {
    let hand = right_hand(template);
    let kin = kinematics(template, pose)?;
    let verts = posed_vertices(template, pose)?;
    let (tip, dir) = limb_tip(template, &kin, &pose.translation, &verts, hand);
    let step = 0.0005;
    let mut s = 4.0 * size;
    loop {
        let t = RigidTransform::new(*rotation, tip + dir * s)?;
        let bvh = Bvh::new(&apply_transform(local, &t));
        let d = verts.iter().map(|v| bvh.nearest_dist2(v)).fold(f64::INFINITY, f64::min).sqrt();
        if d <= gap || s <= 0.0 {
            return Ok(t);
        }
        s -= step;
    }
}

/// Builds the full synthetic capture from `cfg.seed`.
pub fn generate(cfg: &RunConfig) -> Result<Fixture> {
    let sc = &cfg.scene;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = generate_toy_body(sc.joints, sc.shapes, cfg.seed)?;
    let k = template.num_joints();

    let mut end = Pose::rest(k, template.num_shapes());
    end.theta[0] = Vec3::new(0.0, rng.gen_range(-0.4..0.4), 0.0);
    for t in end.theta.iter_mut().skip(1) {
        *t = gaussian3(&mut rng, sc.pose_sigma);
    }
    for b in end.beta.iter_mut() {
        *b = rng.sample::<f64, _>(StandardNormal) * 0.5;
    }
    let frames = sc.frames.max(1);
    let trajectory: Vec<Pose> = (1..=frames)
        .map(|f| {
            let s = f as f64 / frames as f64;
            Pose { theta: end.theta.iter().map(|t| t * s).collect(), beta: end.beta.clone(), translation: end.translation }
        })
        .collect();
    let pose = trajectory.last().expect("at least one frame").clone();

    let local = asymmetric_object(sc.object_size, Vec3::zeros());
    let axis = gaussian3(&mut rng, 1.0).normalize() * rng.gen_range(0.0..0.5);
    let object_tf = place_object(&template, &pose, &local, &axis_angle_to_rotation(&AxisAngle::new(axis)), sc.contact_gap, sc.object_size)?;
    let world_object = apply_transform(&local, &object_tf);

    let verts = posed_vertices(&template, &pose)?;
    let contacts = contact_oracle(&verts, &world_object, cfg.contact.synthetic.contact_distance)?.into_vec();

    // Ground-truth Gaussians: template vertices and object vertices with
    // smooth color patterns and scales enlarged for closed surfaces.
    let mut human = init_human(&template, &pose.beta, None)?;
    for h in human.iter_mut() {
        h.canonical.color = human_color(&h.canonical.mean);
        h.canonical.opacity = sc.truth_opacity;
        h.canonical.scale *= sc.truth_scale;
    }
    let mut object = init_from_vertices(&local.vertices, &local.faces, None)?;
    for g in object.iter_mut() {
        g.color = object_color(&g.mean);
        g.opacity = sc.truth_opacity;
        g.scale *= sc.truth_scale;
    }
    let object = deform_object(&object, &object_tf);
    let mut truth_scene = compose(human, object);
    truth_scene.set_contacts(contacts.clone())?;
    let model = HumanModel::new(template.clone(), pose.clone(), ModulationNet::zeros(ModulationNet::DEFAULT_FREQUENCIES, ModulationNet::DEFAULT_HIDDEN, k))?;

    let target = Vec3::from(sc.target);
    let (train_cams, held_cams) = interleaved_rings(cfg.views, sc.ring_radius, sc.ring_height, target, sc.fov_x, sc.width, sc.height);
    let background = Vec3::from(cfg.optimize.background);
    let prims = truth_scene.primitives(&model);
    let render = |cams: &[Camera]| -> Vec<View> {
        cams.iter()
            .map(|c| {
                let out = rasterize(&prims, c, background);
                let mask = out.alpha.map(|a| if a > 0.5 { 1.0 } else { 0.0 });
                View { camera: c.clone(), image: out.color, mask }
            })
            .collect()
    };
    let train = render(&train_cams);
    let heldout = render(&held_cams);

    // Human visibility: white human, black object, black background.
    let mut vis_prims = prims.clone();
    for (i, p) in vis_prims.iter_mut().enumerate() {
        p.color = if i < truth_scene.human.len() { Vec3::repeat(1.0) } else { Vec3::zeros() };
    }
    let visibility: Vec<Image> = train_cams
        .iter()
        .map(|c| rasterize(&vis_prims, c, Vec3::zeros()).color.channel(0).map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
        .collect();

    let joints = posed_joints(&template, &pose)?;
    let mut observations = Vec::with_capacity(cfg.views);
    let mut visibility_out = visibility;
    for (i, cam) in train_cams.iter().enumerate() {
        let (mut joints_2d, valid) = synthesize_detections(&joints, cam, sc.detection_noise_px, &mut rng);
        if sc.occluded_views.contains(&i) {
            for j in joints_2d.iter_mut() {
                j[0] += rng.gen_range(-1.0..1.0) * sc.corruption_px;
                j[1] += rng.gen_range(-1.0..1.0) * sc.corruption_px;
            }
            visibility_out[i] = Image::new(cam.width, cam.height, 1);
        }
        observations.push(ObservationRecord { camera: i, joints_2d, valid, visible: None, mask: Some(FixturePaths::visibility_name(i)) });
    }

    let [s_theta, s_beta, s_b] = sc.initial_noise;
    let initial_pose = noisy_pose(&pose, s_theta, s_beta, s_b, &mut rng);

    let diag = local.diagonal();
    let markers: Vec<Vec3> = world_object.vertices.iter().map(|v| v + gaussian3(&mut rng, sc.marker_noise * diag)).collect();

    let mut syn = cfg.contact.synthetic;
    syn.views = cfg.views;
    let contact_features = encode_labels(&encoder_projection(template.num_vertices(), syn.feature_dim), &contacts, &syn, &mut rng);

    Ok(Fixture {
        manifest: Manifest { views: cfg.views, width: sc.width, height: sc.height, seed: cfg.seed },
        template,
        object: local,
        markers,
        train,
        heldout,
        visibility: visibility_out,
        observations,
        initial_pose,
        contact_features,
        truth: Truth { trajectory, object: object_tf, contacts },
        truth_scene,
    })
}

/// Reads a fixture back; the inverse of [`Fixture::write`].
pub fn load(dir: &Path) -> Result<Fixture> {
    let p = FixturePaths(dir.to_path_buf());
    let manifest = read_manifest(dir)?;
    let template = BodyTemplate::load(&p.template())?;
    let truth: Truth = serde_json::from_str(&std::fs::read_to_string(p.truth())?)?;
    let (truth_scene, _) = crate::gscene::load_checkpoint(&p.truth_scene())?;
    let visibility = (0..manifest.views)
        .map(|i| Image::load_png(&dir.join(FixturePaths::visibility_name(i)), 1))
        .collect::<Result<Vec<_>>>()?;
    let observations: Vec<ObservationRecord> = serde_json::from_str(&std::fs::read_to_string(p.observations())?)?;
    if observations.len() != manifest.views {
        return Err(Error::Format(format!("{} observations for {} views", observations.len(), manifest.views)));
    }
    Ok(Fixture {
        template,
        object: TriMesh::load_obj(&p.object())?,
        markers: crate::objtrack::load_markers(&p.markers())?,
        train: load_views(&p, Ring::Train, manifest.views)?,
        heldout: load_views(&p, Ring::Heldout, manifest.views)?,
        visibility,
        observations,
        initial_pose: serde_json::from_str(&std::fs::read_to_string(p.initial_pose())?)?,
        contact_features: load_features(&p.contact_features())?,
        truth,
        truth_scene,
        manifest,
    })
}
