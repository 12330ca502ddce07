use exposim::scene::*;
use exposim::sensor::{FluxSequence, SensorSpec};
use exposim::tape::Tensor;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

const FOCAL: f64 = 200.0;

fn translation(dx: f64, dy: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0)
}

fn step_edge(side: usize, level: f64) -> Tensor {
    Tensor::from_fn_2d(side, side, |_, x| if x < side / 2 { 0.1 * level } else { level })
}

/// Pans about the vertical axis at a constant rate, shifting the image
/// horizontally by roughly `FOCAL * rate` render pixels per sample.
fn constant_pan(samples: usize, side: usize, rate: f64) -> Vec<Matrix3<f64>> {
    let k = intrinsics(FOCAL, side);
    let k_inv = k.try_inverse().unwrap();
    (0..samples)
        .map(|i| k * Rotation3::from_euler_angles(0.0, rate * i as f64, 0.0).matrix() * k_inv)
        .collect()
}

fn max_horizontal_gradient(img: &Tensor) -> f64 {
    let (h, w) = img.hw().unwrap();
    let d = img.data();
    let mut best: f64 = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            best = best.max((d[y * w + x + 1] - d[y * w + x]).abs());
        }
    }
    best
}

fn max_sobel(v: &[f64], h: usize, w: usize) -> f64 {
    let at = |y: usize, x: usize| v[y * w + x];
    let mut best: f64 = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            best = best.max(gx.hypot(gy));
        }
    }
    best
}

#[test]
fn zero_step_angle_gives_identity_homographies() {
    let motion = MotionConfig {
        max_step_angle: 0.0,
        ..MotionConfig::default()
    };
    let traj = make_trajectory(&motion, 9, 64, &mut Pcg64Mcg::seed_from_u64(1)).unwrap();
    for h in traj {
        assert!((h - Matrix3::identity()).abs().max() < 1e-12);
    }
}

#[test]
fn roll_keeps_the_principal_point_fixed() {
    let side = 96;
    let k = intrinsics(FOCAL, side);
    let h = k * Rotation3::from_euler_angles(0.0, 0.0, 0.3).matrix() * k.try_inverse().unwrap();
    let c = (side as f64 - 1.0) / 2.0;
    let p = h * Vector3::new(c, c, 1.0);
    assert!((p.x / p.z - c).abs() < 1e-10 && (p.y / p.z - c).abs() < 1e-10);
    let q = h * Vector3::new(c + 10.0, c, 1.0);
    assert!((q.y / q.z - c).abs() > 1.0, "an off-center point must move");
}

#[test]
fn walk_steps_compose_back_to_the_cumulative_rotation() {
    let motion = MotionConfig {
        max_step_angle: 0.02,
        ..MotionConfig::default()
    };
    let rs = make_rotations(&motion, 51, &mut Pcg64Mcg::seed_from_u64(4));
    let mut composed = Rotation3::identity();
    for w in rs.windows(2) {
        composed *= w[0].inverse() * w[1];
    }
    let residual = rs.last().unwrap().inverse() * composed;
    assert!((residual.matrix() - Matrix3::identity()).abs().max() < 1e-10);
}

#[test]
fn identity_trajectory_repeats_the_ground_truth() {
    let cfg = SceneConfig {
        size: 16,
        margin: 4,
        ..SceneConfig::default()
    };
    let texture = make_scene(&cfg, &mut Pcg64Mcg::seed_from_u64(2)).unwrap();
    let seq = render_sequence(&texture, &[Matrix3::identity(); 5], 1e-3, 16).unwrap();
    for f in &seq.frames {
        assert_eq!(f, seq.ground_truth());
    }
}

#[test]
fn even_sample_count_is_rejected() {
    let texture = step_edge(32, 1.0);
    assert!(render_sequence(&texture, &[Matrix3::identity(); 4], 1e-3, 8).is_err());
}

#[test]
fn footprint_escape_advises_larger_margin() {
    let texture = step_edge(40, 1.0);
    let err = render_sequence(&texture, &constant_pan(3, 40, 0.2), 1e-3, 16).unwrap_err();
    assert!(err.to_string().contains("margin"), "{err}");
}

#[test]
fn inverse_warp_recovers_interior_pixels() {
    // bilinear resampling error scales with curvature; wide bumps keep two
    // passes well inside the tolerance
    let side = 96;
    let bump = |y: usize, x: usize, cy: f64, cx: f64, s: f64| {
        (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * s * s)).exp()
    };
    let img = Tensor::from_fn_2d(side, side, |y, x| {
        0.2 + bump(y, x, 40.0, 50.0, 20.0) + 0.6 * bump(y, x, 60.0, 30.0, 24.0)
    });
    let k = intrinsics(FOCAL, side);
    let h = k * Rotation3::from_euler_angles(0.01, -0.015, 0.05).matrix() * k.try_inverse().unwrap();
    let (c1, c2) = (side - 16, side - 32);
    let off = ((side - c1) / 2) as f64;
    let forward = warp_crop(&img, &h, c1).unwrap();
    // the inverse warp expressed in the cropped image's pixel coordinates
    let back = translation(-off, -off) * h.try_inverse().unwrap() * translation(off, off);
    let recovered = warp_crop(&forward, &back, c2).unwrap();

    let o = (side - c2) / 2;
    let range = img.max() - img.min();
    let d = recovered.data();
    for y in 0..c2 {
        for x in 0..c2 {
            let truth = img.data()[(y + o) * side + x + o];
            assert!((d[y * c2 + x] - truth).abs() < 1e-3 * range, "({x},{y}) {} vs {truth}", d[y * c2 + x]);
        }
    }
}

#[test]
fn averaging_a_moving_edge_lowers_its_gradient() {
    let side = 128;
    let seq = render_sequence(&step_edge(side, 1.0), &constant_pan(31, side, 5e-4), 1e-3, 32).unwrap();
    let n = seq.frames.len() as f64;
    let mean = seq.frames.iter().skip(1).fold(seq.frames[0].clone(), |acc, f| {
        Tensor::new(acc.shape().to_vec(), acc.data().iter().zip(f.data()).map(|(a, b)| a + b).collect()).unwrap()
    });
    let mean = mean.map(|v| v / n);
    let sharp = max_horizontal_gradient(seq.ground_truth());
    let blurred = max_horizontal_gradient(&mean);
    assert!(blurred < 0.9 * sharp, "{blurred} vs {sharp}");
}

#[test]
fn longer_exposures_never_sharpen_a_moving_edge() {
    let side = 128;
    let seq = render_sequence(&step_edge(side, 1e-3), &constant_pan(61, side, 2e-3), 3e-3, 32).unwrap();
    let flux = FluxSequence::new(&seq, &SensorSpec::default()).unwrap();
    let (h, w) = flux.hw();
    let mut last = f64::INFINITY;
    // the pan blurs 0.4 output px per 0.1 ms; below about two pixels of
    // blur the sampling phase of the edge dominates the maximum
    for i in 6..=30 {
        let dt = 1e-4 * i as f64;
        let avg: Vec<f64> = flux.integral_to(dt).into_iter().map(|v| v / dt).collect();
        let s = max_sobel(&avg, h, w);
        assert!(s <= last * (1.0 + 1e-9), "dt {dt}: {s} > {last}");
        last = s;
    }
}

#[test]
fn rendering_stays_within_the_scene_range() {
    let scene = SceneConfig {
        size: 32,
        margin: 40,
        samples: 21,
        ..SceneConfig::default()
    };
    let motion = MotionConfig {
        max_step_angle: 0.01,
        ..MotionConfig::default()
    };
    let mut rng = Pcg64Mcg::seed_from_u64(6);
    let texture = make_scene(&scene, &mut rng).unwrap();
    let traj = make_trajectory(&motion, scene.samples, scene.render_side(), &mut rng).unwrap();
    let seq = render_sequence(&texture, &traj, 1e-3, scene.size).unwrap();
    let (lo, hi) = (texture.min(), texture.max());
    let slack = 0.01 * (hi - lo);
    for f in &seq.frames {
        assert!(f.min() >= 0.0 && f.min() >= lo - slack && f.max() <= hi + slack);
    }
}

#[test]
fn sequences_are_deterministic_per_seed() {
    let scene = SceneConfig {
        size: 16,
        margin: 24,
        samples: 11,
        ..SceneConfig::default()
    };
    let motion = MotionConfig::default();
    let a = draw_sequence(&scene, &motion, 1e-3, 11).unwrap();
    let b = draw_sequence(&scene, &motion, 1e-3, 11).unwrap();
    let c = draw_sequence(&scene, &motion, 1e-3, 12).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_ne!(a.frames, c.frames);
}
