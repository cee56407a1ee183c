//! Staged end-to-end run over a synthetic capture.
//!
//! Stages write into `<out>/stages/<name>/` and record a key hashed from
//! every file and config section they read. A stage whose key and outputs
//! are already on disk is skipped, so editing one input re-runs only the
//! stages downstream of it.

pub mod ab;
pub mod synth;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{posed_joints, BodyTemplate, ModulationNet, Pose};
use crate::contact::{dataset_f1, f1_score, predict, synthetic_contact_dataset, train_contact, AttentionWeights, ContactTrainConfig, SyntheticContactConfig, DEFAULT_PROJ_DIM};
use crate::error::{Error, Result};
use crate::gscene::{compose, deform_object, init_from_vertices, init_human, load_checkpoint, save_checkpoint, ComposedScene, HumanModel};
use crate::mathcore::Vec3;
use crate::objtrack::{apply_transform, icp_global, load_markers, IcpOptions, RigidTransform, TriMesh};
use crate::physics::{camera_extent, mean_contact_distance, mean_penetration, optimize, penetration_fraction, OptimizeConfig};
use crate::poseref::{load_observations, mean_joint_error, refine, RefineConfig, RefineResult};
use crate::sdfgrid::{build_sdf, SdfGrid, DEFAULT_PAD};
use crate::splat::{psnr, rasterize, ssim, Camera, SplatPrimitive};

use synth::{load_cameras, load_features, load_views, read_manifest, FixturePaths, Ring, Truth};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub joints: usize,
    pub shapes: usize,
    pub width: usize,
    pub height: usize,
    pub fov_x: f64,
    pub ring_radius: f64,
    /// Camera height above the look-at target.
    pub ring_height: f64,
    pub target: [f64; 3],
    pub object_size: f64,
    /// Distance between the object surface and the closest body vertex.
    pub contact_gap: f64,
    /// Frames in the ground-truth trajectory; the last one is rendered.
    pub frames: usize,
    /// Joint-angle spread of the ground-truth pose.
    pub pose_sigma: f64,
    pub detection_noise_px: f64,
    /// Views whose detections are corrupted and whose visibility mask is
    /// empty.
    pub occluded_views: Vec<usize>,
    /// Uniform pixel offset applied to corrupted detections.
    pub corruption_px: f64,
    /// Joint-angle, shape and translation noise of the initial pose.
    pub initial_noise: [f64; 3],
    /// Marker noise as a fraction of the object bounding-box diagonal.
    pub marker_noise: f64,
    /// Ground-truth Gaussian scale relative to the initial scale.
    pub truth_scale: f64,
    pub truth_opacity: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            joints: 16,
            shapes: 4,
            width: 64,
            height: 64,
            fov_x: 0.75,
            ring_radius: 3.0,
            ring_height: 0.4,
            target: [0.0, 0.9, 0.0],
            object_size: 0.12,
            contact_gap: 0.003,
            frames: 4,
            pose_sigma: 0.2,
            detection_noise_px: 1.0,
            occluded_views: Vec::new(),
            corruption_px: 15.0,
            initial_noise: [0.08, 0.2, 0.03],
            marker_noise: 0.001,
            truth_scale: 1.0,
            truth_opacity: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactStageConfig {
    pub train_frames: usize,
    pub proj_dim: usize,
    pub train: ContactTrainConfig,
    pub synthetic: SyntheticContactConfig,
}

impl Default for ContactStageConfig {
    fn default() -> Self {
        Self { train_frames: 64, proj_dim: DEFAULT_PROJ_DIM, train: ContactTrainConfig::default(), synthetic: SyntheticContactConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fps_gaussians: usize,
    pub fps_size: usize,
    pub fps_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { fps_gaussians: 10_000, fps_size: 256, fps_frames: 100 }
    }
}

/// One JSON document configuring every stage. Stage seeds are derived
/// from `seed` and the optimizer extent from the training cameras; the
/// corresponding fields inside module sections are overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub views: usize,
    pub fixture: PathBuf,
    pub out: PathBuf,
    pub physics: bool,
    pub grid_dims: usize,
    pub grid_pad: f64,
    pub scene: SceneConfig,
    pub icp: IcpOptions,
    pub refine: RefineConfig,
    pub contact: ContactStageConfig,
    pub optimize: OptimizeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            views: 6,
            fixture: PathBuf::from("fixture"),
            out: PathBuf::from("out"),
            physics: true,
            grid_dims: 64,
            grid_pad: DEFAULT_PAD,
            scene: SceneConfig::default(),
            icp: IcpOptions::default(),
            refine: RefineConfig::default(),
            contact: ContactStageConfig::default(),
            optimize: OptimizeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.views == 0 {
            return bad("views must be at least 1");
        }
        if self.grid_dims < 2 || !(self.grid_pad >= 0.0) {
            return bad("grid needs at least 2 cells per axis and a non-negative pad");
        }
        let s = &self.scene;
        if s.width == 0 || s.height == 0 || s.joints < 2 || !(s.fov_x > 0.0 && s.fov_x < 3.0) || !(s.object_size > 0.0) {
            return bad("scene needs a positive image size, object size and field of view and at least 2 joints");
        }
        if s.occluded_views.iter().any(|&v| v >= self.views) {
            return bad("occluded view index out of range");
        }
        if self.contact.train_frames == 0 || self.contact.proj_dim == 0 || !(self.contact.train.tau > 0.0 && self.contact.train.tau < 1.0) {
            return bad("contact stage needs training frames, a projection dimension and tau in (0, 1)");
        }
        if self.eval.fps_frames < 100 || self.eval.fps_size == 0 {
            return bad("throughput is measured over at least 100 frames");
        }
        self.refine.validate()?;
        self.optimize.validate()
    }

    /// Checks that the fixture the stages read from is present and matches
    /// the configured view count.
    pub fn check_fixture(&self) -> Result<()> {
        let m = read_manifest(&self.fixture)
            .map_err(|e| Error::InvalidArgument(format!("fixture {} is unreadable: {e}", self.fixture.display())))?;
        if m.views != self.views {
            return Err(Error::InvalidArgument(format!("fixture has {} views, config asks for {}", m.views, self.views)));
        }
        Ok(())
    }

    fn fixture_paths(&self) -> FixturePaths {
        FixturePaths(self.fixture.clone())
    }
}

/// Generates the synthetic fixture into `dir`.
pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    synth::generate(cfg)?.write(dir)
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(Error),
    #[error("stage {stage} failed: {source}\ninputs: {inputs}")]
    Stage { stage: &'static str, inputs: String, source: Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageName {
    Track,
    FitPose,
    BuildSdf,
    Contact,
    Optimize,
    Eval,
}

impl StageName {
    pub const ALL: [StageName; 6] = [Self::Track, Self::FitPose, Self::BuildSdf, Self::Contact, Self::Optimize, Self::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Track => "track",
            Self::FitPose => "fit-pose",
            Self::BuildSdf => "build-sdf",
            Self::Contact => "contact",
            Self::Optimize => "optimize",
            Self::Eval => "eval",
        }
    }

    /// Stages that must run before this one, itself included, in order.
    pub fn closure(self) -> Vec<StageName> {
        use StageName::*;
        match self {
            Track => vec![Track],
            FitPose => vec![FitPose],
            BuildSdf => vec![Track, BuildSdf],
            Contact => vec![Contact],
            Optimize => vec![Track, FitPose, BuildSdf, Contact, Optimize],
            Eval => Self::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub name: String,
    pub skipped: bool,
    /// Wall-clock of the run that produced the cached outputs.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub initial: RigidTransform,
    pub transform: RigidTransform,
    pub rms_history: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactPrediction {
    pub probabilities: Vec<f64>,
    pub contacts: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub train_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Deterministic part of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// False marks the physics-free baseline of an A/B pair.
    pub physics_enabled: bool,
    pub human_gaussians: usize,
    pub object_gaussians: usize,
    pub train: Vec<ViewMetrics>,
    pub heldout: Vec<ViewMetrics>,
    pub mean_train_psnr: f64,
    pub mean_train_ssim: f64,
    pub mean_heldout_psnr: f64,
    pub mean_heldout_ssim: f64,
    pub voxel: f64,
    pub contacts: usize,
    pub mean_penetration: f64,
    /// Fraction of contact Gaussians deeper than one voxel.
    pub deep_penetration_fraction: f64,
    pub mean_contact_distance: f64,
    pub contact_f1: f64,
    pub joint_error_initial: f64,
    pub joint_error_refined: f64,
    pub view_weights: Vec<f64>,
    pub object_rotation_error: f64,
    pub object_translation_error: f64,
    pub icp_rms: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: BTreeMap<String, f64>,
    pub fps: f64,
    pub fps_frames: usize,
    pub fps_gaussians: usize,
    pub fps_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: EvalMetrics,
    pub timing: Timing,
}

impl MetricsReport {
    pub fn is_finite(&self) -> bool {
        let v = serde_json::to_value(self).expect("report serializes");
        fn finite(v: &serde_json::Value) -> bool {
            match v {
                serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
                serde_json::Value::Array(a) => a.iter().all(finite),
                serde_json::Value::Object(o) => o.values().all(finite),
                _ => true,
            }
        }
        // Non-finite floats serialize as null.
        finite(&v) && !v.to_string().contains("null")
    }
}

/// Result of a pipeline invocation.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub stages: Vec<StageStatus>,
    pub report: Option<MetricsReport>,
}

fn stage_dir(out: &Path, name: StageName) -> PathBuf {
    out.join("stages").join(name.as_str())
}

struct Key(Sha256);

impl Key {
    fn new(name: StageName) -> Self {
        let mut h = Sha256::new();
        h.update(name.as_str().as_bytes());
        Key(h)
    }

    fn bytes(&mut self, label: &str, b: &[u8]) {
        self.0.update((label.len() as u64).to_le_bytes());
        self.0.update(label.as_bytes());
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
    }

    fn file(&mut self, path: &Path) -> Result<()> {
        let b = std::fs::read(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        self.bytes(&path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(), &b);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, label: &str, v: &T) -> Result<()> {
        self.bytes(label, serde_json::to_string(v)?.as_bytes());
        Ok(())
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// What a stage reads: config sections plus files, from which both its
/// cache key and its reproduction record are derived.
struct Inputs {
    name: StageName,
    config: serde_json::Value,
    files: Vec<PathBuf>,
}

impl Inputs {
    fn new(name: StageName, config: serde_json::Value) -> Self {
        Self { name, config, files: Vec::new() }
    }

    fn file(mut self, p: PathBuf) -> Self {
        self.files.push(p);
        self
    }

    fn files(mut self, ps: impl IntoIterator<Item = PathBuf>) -> Self {
        self.files.extend(ps);
        self
    }

    fn key(&self) -> Result<String> {
        let mut k = Key::new(self.name);
        k.json("config", &self.config)?;
        for f in &self.files {
            k.file(f)?;
        }
        Ok(k.finish())
    }

    fn describe(&self, key: &str) -> String {
        serde_json::json!({
            "stage": self.name.as_str(),
            "key": key,
            "config": self.config,
            "files": self.files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        })
        .to_string()
    }
}

#[derive(Serialize, Deserialize)]
struct StageTiming {
    seconds: f64,
}

fn run_stage(out: &Path, inputs: Inputs, outputs: &[&str], body: impl FnOnce(&Path) -> Result<()>) -> std::result::Result<StageStatus, PipelineError> {
    let name = inputs.name;
    let key = inputs.key().map_err(PipelineError::Config)?;
    let dir = stage_dir(out, name);
    let fail = |source: Error| PipelineError::Stage { stage: name.as_str(), inputs: inputs.describe(&key), source };
    let cached = std::fs::read_to_string(dir.join("key.txt")).is_ok_and(|k| k == key) && outputs.iter().all(|o| dir.join(o).exists());
    if cached {
        let seconds = std::fs::read_to_string(dir.join("timing.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<StageTiming>(&s).ok())
            .map_or(0.0, |t| t.seconds);
        log::info!("{}: cached", name.as_str());
        return Ok(StageStatus { name: name.as_str().into(), skipped: true, seconds });
    }
    log::info!("{}: running", name.as_str());
    let prepare = || -> Result<()> {
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(())
    };
    prepare().map_err(&fail)?;
    let t0 = Instant::now();
    body(&dir).map_err(&fail)?;
    let seconds = t0.elapsed().as_secs_f64();
    let finish = || -> Result<()> {
        std::fs::write(dir.join("timing.json"), serde_json::to_string(&StageTiming { seconds })?)?;
        std::fs::write(dir.join("key.txt"), &key)?;
        Ok(())
    };
    finish().map_err(&fail)?;
    Ok(StageStatus { name: name.as_str().into(), skipped: false, seconds })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn ring_files(p: &FixturePaths, ring: Ring, n: usize, images: bool) -> Vec<PathBuf> {
    (0..n)
        .flat_map(|i| {
            let mut v = vec![p.camera(ring, i)];
            if images {
                v.push(p.image(ring, i));
                v.push(p.mask(ring, i));
            }
            v
        })
        .collect()
}

/// Seed of one pipeline stage (1 contact data, 2 attention init, 3 network
/// init, 4 optimizer, 5 throughput scene).
pub fn derived_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
}

fn config_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn stage_track(cfg: &RunConfig) -> std::result::Result<StageStatus, PipelineError> {
    let p = cfg.fixture_paths();
    let inputs = Inputs::new(StageName::Track, config_json(&cfg.icp)).file(p.object()).file(p.markers());
    run_stage(&cfg.out, inputs, &["object.json"], |dir| {
        let mesh = TriMesh::load_obj(&p.object())?;
        let markers = load_markers(&p.markers())?;
        let (initial, r) = icp_global(&markers, &mesh, &cfg.icp)?;
        write_json(&dir.join("object.json"), &TrackOutput { initial, transform: r.transform, rms_history: r.rms_history, iterations: r.iterations })
    })
}

fn stage_fit_pose(cfg: &RunConfig) -> std::result::Result<StageStatus, PipelineError> {
    let p = cfg.fixture_paths();
    let visibility = (0..cfg.views).map(|i| cfg.fixture.join(FixturePaths::visibility_name(i)));
    let inputs = Inputs::new(StageName::FitPose, config_json(&cfg.refine))
        .file(p.template())
        .file(p.observations())
        .file(p.initial_pose())
        .files(ring_files(&p, Ring::Train, cfg.views, false))
        .files(visibility);
    run_stage(&cfg.out, inputs, &["pose.json"], |dir| {
        let template = BodyTemplate::load(&p.template())?;
        let cams = load_cameras(&p, Ring::Train, cfg.views)?;
        let obs = load_observations(&p.observations(), &cams)?;
        let initial: Pose = read_json(&p.initial_pose())?;
        let r = refine(&template, &initial, &obs, &cfg.refine)?;
        write_json(&dir.join("pose.json"), &r)
    })
}

fn stage_build_sdf(cfg: &RunConfig) -> std::result::Result<StageStatus, PipelineError> {
    let p = cfg.fixture_paths();
    let track = stage_dir(&cfg.out, StageName::Track).join("object.json");
    let inputs = Inputs::new(StageName::BuildSdf, serde_json::json!({ "dims": cfg.grid_dims, "pad": cfg.grid_pad })).file(p.object()).file(track.clone());
    run_stage(&cfg.out, inputs, &["sdf.bin"], |dir| {
        let t: TrackOutput = read_json(&track)?;
        let mesh = apply_transform(&TriMesh::load_obj(&p.object())?, &t.transform);
        build_sdf(&mesh, [cfg.grid_dims; 3], cfg.grid_pad)?.save(&dir.join("sdf.bin"))
    })
}

fn stage_contact(cfg: &RunConfig) -> std::result::Result<StageStatus, PipelineError> {
    let p = cfg.fixture_paths();
    let inputs = Inputs::new(StageName::Contact, serde_json::json!({ "contact": cfg.contact, "seed": cfg.seed, "views": cfg.views }))
        .file(p.template())
        .file(p.contact_features());
    run_stage(&cfg.out, inputs, &["weights.bin", "prediction.json"], |dir| {
        let template = BodyTemplate::load(&p.template())?;
        let features = load_features(&p.contact_features())?;
        let mut syn = cfg.contact.synthetic;
        syn.views = cfg.views;
        let data = synthetic_contact_dataset(&template, cfg.contact.train_frames, &syn, derived_seed(cfg.seed, 1))?;
        let init = AttentionWeights::new(syn.feature_dim, cfg.contact.proj_dim, template.num_vertices(), derived_seed(cfg.seed, 2));
        let (w, train_loss) = train_contact(&data, &init, &cfg.contact.train)?;
        let train_f1 = dataset_f1(&data, &w, cfg.contact.train.tau)?;
        let (probabilities, set) = predict(&features, &w, cfg.contact.train.tau)?;
        w.save(&dir.join("weights.bin"))?;
        write_json(&dir.join("prediction.json"), &ContactPrediction { probabilities, contacts: set.into_vec(), train_loss, train_f1 })
    })
}

/// Initial composed scene and body model for the optimize stage.
pub fn initial_scene(template: &BodyTemplate, pose: &Pose, object: &TriMesh, transform: &RigidTransform, contacts: Vec<usize>, seed: u64) -> Result<(ComposedScene, HumanModel)> {
    let human = init_human(template, &pose.beta, None)?;
    let object = deform_object(&init_from_vertices(&object.vertices, &object.faces, None)?, transform);
    let mut scene = compose(human, object);
    scene.set_contacts(contacts)?;
    let net = ModulationNet::new(ModulationNet::DEFAULT_FREQUENCIES, ModulationNet::DEFAULT_HIDDEN, template.num_joints(), seed);
    let model = HumanModel::new(template.clone(), pose.clone(), net)?;
    Ok((scene, model))
}

fn stage_optimize(cfg: &RunConfig) -> std::result::Result<StageStatus, PipelineError> {
    let p = cfg.fixture_paths();
    let up = |s: StageName, f: &str| stage_dir(&cfg.out, s).join(f);
    let (pose_f, track_f, sdf_f, contact_f) = (up(StageName::FitPose, "pose.json"), up(StageName::Track, "object.json"), up(StageName::BuildSdf, "sdf.bin"), up(StageName::Contact, "prediction.json"));
    let inputs = Inputs::new(StageName::Optimize, serde_json::json!({ "optimize": cfg.optimize, "physics": cfg.physics, "seed": cfg.seed }))
        .file(p.template())
        .file(p.object())
        .files([pose_f.clone(), track_f.clone(), sdf_f.clone(), contact_f.clone()])
        .files(ring_files(&p, Ring::Train, cfg.views, true));
    run_stage(&cfg.out, inputs, &["scene.bin", "net.json", "metrics.jsonl"], |dir| {
        let template = BodyTemplate::load(&p.template())?;
        let pose: RefineResult = read_json(&pose_f)?;
        let track: TrackOutput = read_json(&track_f)?;
        let contacts: ContactPrediction = read_json(&contact_f)?;
        let grid = SdfGrid::load(&sdf_f)?;
        let views = load_views(&p, Ring::Train, cfg.views)?;
        let object = TriMesh::load_obj(&p.object())?;
        let (mut scene, mut model) = initial_scene(&template, &pose.pose, &object, &track.transform, contacts.contacts, derived_seed(cfg.seed, 3))?;
        let mut opt = cfg.optimize.clone();
        opt.seed = derived_seed(cfg.seed, 4);
        opt.extent = camera_extent(&views.iter().map(|v| v.camera.clone()).collect::<Vec<_>>());
        if !cfg.physics {
            opt.weights.lambda_attr = 0.0;
            opt.weights.lambda_rep = 0.0;
        }
        let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        optimize(&mut scene, &mut model, &views, cfg.physics.then_some(&grid), &opt, Some(&mut log))?;
        log.flush()?;
        save_checkpoint(&dir.join("scene.bin"), &scene, &model)?;
        write_json(&dir.join("net.json"), &model.net)
    })
}

/// Rasterizer input of a checkpoint: posed human records then object.
pub fn checkpoint_primitives(path: &Path) -> Result<(ComposedScene, Vec<SplatPrimitive>)> {
    let (scene, posed) = load_checkpoint(path)?;
    let prims = posed.iter().chain(&scene.object).map(|g| g.to_primitive()).collect();
    Ok((scene, prims))
}

/// Deterministic `n`-primitive scene drawn from `base` with small jitter,
/// used for throughput measurement.
pub fn benchmark_primitives(base: &[SplatPrimitive], n: usize, seed: u64) -> Vec<SplatPrimitive> {
    if base.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut p = base[i % base.len()];
            p.mean += Vec3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
            p
        })
        .collect()
}

/// Steady-state frames per second: one warm-up frame, then `frames`
/// timed renders.
pub fn measure_fps(prims: &[SplatPrimitive], cam: &Camera, background: Vec3, frames: usize) -> f64 {
    let _ = rasterize(prims, cam, background);
    let t0 = Instant::now();
    for _ in 0..frames {
        std::hint::black_box(rasterize(prims, cam, background));
    }
    frames as f64 / t0.elapsed().as_secs_f64().max(1e-12)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn stage_eval(cfg: &RunConfig, timings: &BTreeMap<String, f64>) -> std::result::Result<StageStatus, PipelineError> {
    let p = cfg.fixture_paths();
    let up = |s: StageName, f: &str| stage_dir(&cfg.out, s).join(f);
    let files = [
        up(StageName::Optimize, "scene.bin"),
        up(StageName::Optimize, "metrics.jsonl"),
        up(StageName::FitPose, "pose.json"),
        up(StageName::Track, "object.json"),
        up(StageName::BuildSdf, "sdf.bin"),
        up(StageName::Contact, "prediction.json"),
    ];
    let inputs = Inputs::new(StageName::Eval, serde_json::json!({ "eval": cfg.eval, "physics": cfg.physics, "background": cfg.optimize.background }))
        .file(p.template())
        .file(p.truth())
        .file(p.initial_pose())
        .files(files.clone())
        .files(ring_files(&p, Ring::Train, cfg.views, true))
        .files(ring_files(&p, Ring::Heldout, cfg.views, true));
    let t0 = Instant::now();
    run_stage(&cfg.out, inputs, &["metrics.json", "report.json"], |dir| {
        let [scene_f, log_f, pose_f, track_f, sdf_f, contact_f] = &files;
        let (scene, prims) = checkpoint_primitives(scene_f)?;
        let background = Vec3::from(cfg.optimize.background);
        std::fs::create_dir_all(dir.join("renders"))?;
        let score = |ring: Ring| -> Result<Vec<ViewMetrics>> {
            load_views(&p, ring, cfg.views)?
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let img = rasterize(&prims, &v.camera, background).color;
                    img.save_png(&dir.join(format!("renders/{}_{i:02}.png", if ring == Ring::Train { "train" } else { "heldout" })))?;
                    Ok(ViewMetrics { view: i, psnr: psnr(&img, &v.image)?, ssim: ssim(&img, &v.image)? })
                })
                .collect()
        };
        let train = score(Ring::Train)?;
        let heldout = score(Ring::Heldout)?;

        let template = BodyTemplate::load(&p.template())?;
        let truth: Truth = read_json(&p.truth())?;
        let pose: RefineResult = read_json(pose_f)?;
        let track: TrackOutput = read_json(track_f)?;
        let grid = SdfGrid::load(sdf_f)?;
        let prediction: ContactPrediction = read_json(contact_f)?;
        let nh = scene.human.len();
        let human_means: Vec<Vec3> = prims[..nh].iter().map(|p| p.mean).collect();
        let object_means = scene.object_means();
        let initial: Pose = read_json(&p.initial_pose())?;
        let gt_joints = posed_joints(&template, truth.pose())?;
        let final_loss = std::fs::read_to_string(log_f)?
            .lines()
            .last()
            .map(|l| serde_json::from_str::<crate::physics::IterationRecord>(l).map(|r| r.total))
            .transpose()?
            .unwrap_or(0.0);
        let metrics = EvalMetrics {
            physics_enabled: cfg.physics,
            human_gaussians: nh,
            object_gaussians: scene.object.len(),
            mean_train_psnr: mean(train.iter().map(|v| v.psnr)),
            mean_train_ssim: mean(train.iter().map(|v| v.ssim)),
            mean_heldout_psnr: mean(heldout.iter().map(|v| v.psnr)),
            mean_heldout_ssim: mean(heldout.iter().map(|v| v.ssim)),
            train,
            heldout,
            voxel: grid.voxel,
            contacts: scene.contacts.len(),
            mean_penetration: mean_penetration(&human_means, &scene.contacts, &grid),
            deep_penetration_fraction: penetration_fraction(&human_means, &scene.contacts, &grid, grid.voxel),
            mean_contact_distance: if scene.contacts.is_empty() { 0.0 } else { mean_contact_distance(&human_means, &object_means, &scene.contacts) },
            contact_f1: f1_score(&prediction.contacts, &truth.contacts),
            joint_error_initial: mean_joint_error(&posed_joints(&template, &initial)?, &gt_joints),
            joint_error_refined: mean_joint_error(&pose.joints, &gt_joints),
            view_weights: pose.weights,
            object_rotation_error: track.transform.rotation_error(&truth.object),
            object_translation_error: track.transform.translation_error(&truth.object),
            icp_rms: *track.rms_history.last().unwrap_or(&0.0),
            final_loss,
        };

        let cam = Camera::load(&p.camera(Ring::Train, 0))?.resized(cfg.eval.fps_size, cfg.eval.fps_size);
        let bench = benchmark_primitives(&prims, cfg.eval.fps_gaussians, derived_seed(cfg.seed, 5));
        let fps = measure_fps(&bench, &cam, background, cfg.eval.fps_frames);
        let mut stages = timings.clone();
        stages.insert(StageName::Eval.as_str().into(), t0.elapsed().as_secs_f64());
        let report = MetricsReport {
            metrics,
            timing: Timing { stages, fps, fps_frames: cfg.eval.fps_frames, fps_gaussians: bench.len(), fps_size: cfg.eval.fps_size },
        };
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("report: {}", serde_json::to_string(&report)?)));
        }
        write_json(&dir.join("metrics.json"), &report.metrics)?;
        write_json(&dir.join("report.json"), &report)
    })
}

/// Runs `target` and every stage it depends on, reusing cached outputs.
/// For [`StageName::Eval`] the report is copied to `<out>/report.json`
/// and its deterministic part to `<out>/metrics.json`.
pub fn run(cfg: &RunConfig, target: StageName) -> std::result::Result<RunSummary, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    cfg.check_fixture().map_err(PipelineError::Config)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::Config(e.into()))?;
    let mut stages = Vec::new();
    let mut timings = BTreeMap::new();
    for s in target.closure() {
        let status = match s {
            StageName::Track => stage_track(cfg)?,
            StageName::FitPose => stage_fit_pose(cfg)?,
            StageName::BuildSdf => stage_build_sdf(cfg)?,
            StageName::Contact => stage_contact(cfg)?,
            StageName::Optimize => stage_optimize(cfg)?,
            StageName::Eval => stage_eval(cfg, &timings)?,
        };
        timings.insert(status.name.clone(), status.seconds);
        stages.push(status);
    }
    let report = if target == StageName::Eval {
        let dir = stage_dir(&cfg.out, StageName::Eval);
        let copy = || -> Result<MetricsReport> {
            std::fs::copy(dir.join("report.json"), cfg.out.join("report.json"))?;
            std::fs::copy(dir.join("metrics.json"), cfg.out.join("metrics.json"))?;
            read_json(&dir.join("report.json"))
        };
        Some(copy().map_err(|source| PipelineError::Stage { stage: "eval", inputs: "report copy".into(), source })?)
    } else {
        None
    };
    Ok(RunSummary { stages, report })
}

/// Full pipeline: every stage through evaluation.
pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<RunSummary, PipelineError> {
    run(cfg, StageName::Eval)
}

/// Worker count from `HOGS_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("HOGS_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

/// Runs `f` on a dedicated pool of `threads` workers (rayon's default
/// when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
