use super::raster::{ALPHA_MAX, DILATION};
use super::*;
use crate::mathcore::{rodrigues, Mat3, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn axis_camera(size: usize, f: f64) -> Camera {
    Camera {
        rotation: Mat3::identity(),
        translation: Vec3::zeros(),
        fx: f,
        fy: f,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        near: 0.01,
    }
}

fn iso(mean: Vec3, s: f64, opacity: f64, color: Vec3) -> SplatPrimitive {
    SplatPrimitive { mean, cov: Mat3::identity() * (s * s), opacity, color }
}

fn random_scene(seed: u64, n: usize) -> Vec<SplatPrimitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = rodrigues(&Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
            let s = Vec3::new(rng.gen_range(0.03..0.15), rng.gen_range(0.03..0.15), rng.gen_range(0.03..0.15));
            let cov = r * Mat3::from_diagonal(&s.component_mul(&s)) * r.transpose();
            SplatPrimitive {
                mean: Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(1.5..2.5)),
                cov,
                opacity: rng.gen_range(0.2..0.9),
                color: Vec3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
            }
        })
        .collect()
}

fn visible(o: ProjectionOutcome) -> Projection {
    match o {
        ProjectionOutcome::Visible(p) => p,
        other => panic!("expected a visible projection, got {other:?}"),
    }
}

#[test]
fn on_axis_projection_closed_form() {
    let f = 50.0;
    let sigma = 0.1;
    let cam = axis_camera(64, f);
    let p = visible(project(0, &iso(Vec3::new(0.0, 0.0, 1.0), sigma, 1.0, Vec3::zeros()), &cam));
    let expected = f * f * sigma * sigma + DILATION;
    assert!((p.cov2d - nalgebra::Matrix2::identity() * expected).abs().max() < 1e-12);
    assert!((p.mean2d - nalgebra::Vector2::new(32.0, 32.0)).norm() < 1e-12);
    assert_eq!(p.depth, 1.0);
}

#[test]
fn doubling_depth_quarters_screen_covariance() {
    let cam = axis_camera(64, 50.0);
    let a = visible(project(0, &iso(Vec3::new(0.0, 0.0, 1.0), 0.1, 1.0, Vec3::zeros()), &cam));
    let b = visible(project(0, &iso(Vec3::new(0.0, 0.0, 2.0), 0.1, 1.0, Vec3::zeros()), &cam));
    let undilate = |m: nalgebra::Matrix2<f64>| m - nalgebra::Matrix2::identity() * DILATION;
    assert!((undilate(b.cov2d) * 4.0 - undilate(a.cov2d)).abs().max() < 1e-12);
}

#[test]
fn behind_camera_is_culled() {
    let cam = axis_camera(32, 30.0);
    assert_eq!(project(0, &iso(Vec3::new(0.0, 0.0, -1.0), 0.1, 1.0, Vec3::zeros()), &cam), ProjectionOutcome::Culled);
    assert_eq!(project(0, &iso(Vec3::new(0.0, 0.0, 0.005), 0.1, 1.0, Vec3::zeros()), &cam), ProjectionOutcome::Culled);
}

#[test]
fn ill_conditioned_covariance_is_skipped() {
    let cam = axis_camera(32, 30.0);
    let mut g = iso(Vec3::new(0.0, 0.0, 1.0), 0.1, 1.0, Vec3::zeros());
    g.cov = Mat3::from_diagonal(&Vec3::new(1e12, 0.0, 0.0));
    assert_eq!(project(0, &g, &cam), ProjectionOutcome::Singular);
    let out = rasterize(&[g], &cam, Vec3::zeros());
    assert_eq!(out.skipped_singular, 1);
}

#[test]
fn empty_scene_is_background() {
    let cam = axis_camera(20, 20.0);
    let bg = Vec3::new(0.1, 0.2, 0.3);
    let out = rasterize(&[], &cam, bg);
    for y in 0..20 {
        for x in 0..20 {
            assert_eq!(out.color.pixel(x, y), bg.as_slice());
            assert_eq!(out.alpha.pixel(x, y)[0], 0.0);
        }
    }
}

#[test]
fn single_opaque_gaussian_peak() {
    let cam = axis_camera(32, 40.0);
    let c = Vec3::new(0.9, 0.4, 0.1);
    // Mean projects onto the centre of pixel (16, 16).
    let out = rasterize(&[iso(Vec3::new(0.5 / 40.0, 0.5 / 40.0, 1.0), 0.1, 1.0, c)], &cam, Vec3::zeros());
    let px = out.color.pixel(16, 16);
    for k in 0..3 {
        assert!((px[k] - c[k]).abs() < 1e-3);
    }
    assert_eq!(out.alpha.pixel(16, 16)[0], ALPHA_MAX);
}

#[test]
fn two_layer_compositing_by_hand() {
    // Very wide Gaussians so α at the centre pixel equals the opacity.
    let cam = axis_camera(16, 10.0);
    let red = Vec3::new(1.0, 0.0, 0.0);
    let blue = Vec3::new(0.0, 0.0, 1.0);
    let bg = Vec3::new(0.2, 0.7, 0.5);
    let mut front = iso(Vec3::new(0.0, 0.0, 1.0), 1.0, 0.6, red);
    let mut back = iso(Vec3::new(0.0, 0.0, 2.0), 2.0, 0.6, blue);
    front.mean.x = 0.5 / 10.0; // project exactly onto the centre of pixel (8, 8)
    front.mean.y = 0.5 / 10.0;
    back.mean.x = 2.0 * 0.5 / 10.0;
    back.mean.y = 2.0 * 0.5 / 10.0;
    let out = rasterize(&[back, front], &cam, bg);
    let expected = red * 0.6 + blue * (0.4 * 0.6) + bg * 0.16;
    let px = out.color.pixel(8, 8);
    for k in 0..3 {
        assert!((px[k] - expected[k]).abs() < 1e-12, "{px:?} vs {expected:?}");
    }
    assert!((out.alpha.pixel(8, 8)[0] - 0.84).abs() < 1e-12);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let cam = axis_camera(16, 20.0);
    let scene = random_scene(1, 8);
    let out = rasterize(&scene, &cam, Vec3::zeros());
    let grads = backward(&scene, &cam, &out, &Image::new(16, 16, 3), Some(&Image::new(16, 16, 1))).unwrap();
    assert!(grads.iter().all(|g| *g == PrimitiveGrad::default()));
}

#[test]
fn mismatched_gradient_image_is_rejected() {
    let cam = axis_camera(16, 20.0);
    let scene = random_scene(1, 3);
    let out = rasterize(&scene, &cam, Vec3::zeros());
    assert!(backward(&scene, &cam, &out, &Image::new(8, 16, 3), None).is_err());
}

/// Objective `Σ wc·color + Σ wa·alpha` with fixed random weights.
struct Probe {
    wc: Image,
    wa: Image,
}

impl Probe {
    fn new(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wc = Image::from_data(size, size, 3, (0..size * size * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let wa = Image::from_data(size, size, 1, (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        Self { wc, wa }
    }

    fn eval(&self, scene: &[SplatPrimitive], cam: &Camera, bg: Vec3) -> f64 {
        let out = rasterize(scene, cam, bg);
        out.color.data.iter().zip(&self.wc.data).map(|(a, b)| a * b).sum::<f64>()
            + out.alpha.data.iter().zip(&self.wa.data).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let size = 16;
    let cam = Camera::look_at(Vec3::new(0.3, -0.2, -2.0), Vec3::zeros(), Vec3::y(), 0.9, size, size).unwrap();
    let mut scene = random_scene(7, 10);
    for g in &mut scene {
        g.mean.z -= 2.0;
    }
    let bg = Vec3::new(0.3, 0.1, 0.6);
    let probe = Probe::new(3, size);
    let out = rasterize(&scene, &cam, bg);
    let grads = backward(&scene, &cam, &out, &probe.wc, Some(&probe.wa)).unwrap();
    let h = 1e-6;
    let fd = |f: &dyn Fn(&mut Vec<SplatPrimitive>, f64)| {
        let mut p = scene.clone();
        f(&mut p, h);
        let mut m = scene.clone();
        f(&mut m, -h);
        (probe.eval(&p, &cam, bg) - probe.eval(&m, &cam, bg)) / (2.0 * h)
    };
    let (mut a_mean, mut n_mean, mut a_cov, mut n_cov) = (vec![], vec![], vec![], vec![]);
    let (mut a_op, mut n_op, mut a_col, mut n_col) = (vec![], vec![], vec![], vec![]);
    for i in 0..scene.len() {
        for k in 0..3 {
            a_mean.push(grads[i].mean[k]);
            n_mean.push(fd(&|s, e| s[i].mean[k] += e));
            a_col.push(grads[i].color[k]);
            n_col.push(fd(&|s, e| s[i].color[k] += e));
        }
        for r in 0..3 {
            for c in r..3 {
                // Perturb the symmetric pair together; the analytic gradient
                // of the symmetric parameter is G_rc + G_cr.
                let factor = if r == c { 1.0 } else { 2.0 };
                a_cov.push(grads[i].cov[(r, c)] * factor);
                n_cov.push(fd(&|s, e| {
                    s[i].cov[(r, c)] += e;
                    if r != c {
                        s[i].cov[(c, r)] += e;
                    }
                }));
            }
        }
        a_op.push(grads[i].opacity);
        n_op.push(fd(&|s, e| s[i].opacity += e));
    }
    for (name, a, n) in [("mean", &a_mean, &n_mean), ("cov", &a_cov, &n_cov), ("opacity", &a_op, &n_op), ("color", &a_col, &n_col)] {
        let e = max_rel(a, n);
        assert!(e < 1e-4, "{name}: relative error {e}");
    }
}

#[test]
fn single_gaussian_mean_pixel_color_gradient() {
    let size = 16;
    let cam = axis_camera(size, 20.0);
    let scene = vec![iso(Vec3::new(0.02, -0.01, 1.0), 0.15, 0.7, Vec3::new(0.2, 0.5, 0.8))];
    let n = (size * size * 3) as f64;
    let d = Image::filled(size, size, &[1.0 / n; 3]);
    let out = rasterize(&scene, &cam, Vec3::zeros());
    let g = backward(&scene, &cam, &out, &d, None).unwrap()[0];
    let mean_px = |s: &[SplatPrimitive]| rasterize(s, &cam, Vec3::zeros()).color.data.iter().sum::<f64>() / n;
    for k in 0..3 {
        let h = 1e-4;
        let mut p = scene.clone();
        p[0].color[k] += h;
        let mut m = scene.clone();
        m[0].color[k] -= h;
        let fd = (mean_px(&p) - mean_px(&m)) / (2.0 * h);
        assert!((fd - g.color[k]).abs() <= 1e-4 * fd.abs());
    }
}

#[test]
fn rendering_is_bitwise_identical_across_thread_counts() {
    let cam = axis_camera(48, 40.0);
    let scene = random_scene(9, 60);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(6).build().unwrap();
    let probe = Probe::new(1, 48);
    let run = |pool: &rayon::ThreadPool| {
        pool.install(|| {
            let out = rasterize(&scene, &cam, Vec3::zeros());
            let g = backward(&scene, &cam, &out, &probe.wc, Some(&probe.wa)).unwrap();
            (out.color.data, g)
        })
    };
    let (a, ga) = run(&one);
    let (b, gb) = run(&many);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga, gb);
}

proptest! {
    #[test]
    fn permuting_input_order_gives_identical_image(seed in 0u64..100, swaps in proptest::collection::vec((0usize..12, 0usize..12), 0..10)) {
        let cam = axis_camera(24, 30.0);
        let scene = random_scene(seed, 12);
        let mut shuffled = scene.clone();
        for (a, b) in swaps {
            shuffled.swap(a, b);
        }
        let a = rasterize(&scene, &cam, Vec3::new(0.1, 0.1, 0.1));
        let b = rasterize(&shuffled, &cam, Vec3::new(0.1, 0.1, 0.1));
        prop_assert_eq!(a.color.data, b.color.data);
        prop_assert_eq!(a.alpha.data, b.alpha.data);
    }

    #[test]
    fn transmittance_is_monotone_and_alpha_bounded(seed in 0u64..100, x in 0usize..24, y in 0usize..24) {
        let cam = axis_camera(24, 30.0);
        let scene = random_scene(seed, 15);
        let out = rasterize(&scene, &cam, Vec3::zeros());
        let trace = out.transmittance_trace(x, y);
        let mut prev = 1.0;
        for t in trace {
            prop_assert!(t <= prev);
            prev = t;
        }
        prop_assert!(out.alpha.data.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}
