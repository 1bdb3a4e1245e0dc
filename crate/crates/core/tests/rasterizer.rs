use approx::assert_relative_eq;
use humangs::geometry::CameraModel;
use humangs::rasterizer::{
    backward, build_covariance, gradient_check, gradient_check_with, probe_weights, rasterize, rasterize_with_state,
    GaussianSet, RasterConfig, RenderGrads,
};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(size: usize) -> CameraModel {
    let f = size as f64;
    let c = size as f64 / 2.0;
    CameraModel::pinhole(f, f, c, c, Matrix3::identity(), Vector3::zeros(), size, size).unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
    let mut g = GaussianSet::default();
    for _ in 0..n {
        let z = rng.random_range(2.0..4.0);
        let pos = Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z);
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = Vector3::from_fn(|_, _| rng.random_range(0.15..0.5));
        let color = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
        g.push(pos, q.map(|v| v / qn), scale, rng.random_range(0.2..0.9), color);
    }
    g
}

#[test]
fn eigenvalues_are_squared_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let g = random_set(&mut rng, 1);
        let sigma = build_covariance(&g.rotations[0], &g.scales[0]).unwrap();
        assert_relative_eq!(sigma, sigma.transpose(), epsilon = 1e-12);
        let mut eig: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut sq: Vec<f64> = g.scales[0].iter().map(|s| s * s).collect();
        sq.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&sq) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn opaque_gaussian_on_pixel_center_shows_its_color() {
    // Principal point on a pixel center so the splat peaks exactly there.
    let cam = CameraModel::pinhole(16.0, 16.0, 8.5, 8.5, Matrix3::identity(), Vector3::zeros(), 16, 16).unwrap();
    let mut g = GaussianSet::default();
    let c = Vector3::new(0.2, 0.7, 0.4);
    g.push(Vector3::new(0.0, 0.0, 2.0), [1.0, 0.0, 0.0, 0.0], Vector3::new(0.1, 0.1, 0.1), 1.0, c);
    let out = rasterize(&g, &cam).unwrap();
    let p = 8 * 16 + 8;
    for k in 0..3 {
        assert!((out.color[k * 256 + p] - c[k]).abs() < 1e-3);
    }
    assert!(out.alpha[p] >= 0.63);
    // Peak of a 2D Gaussian is exp(0) = 1, so with opacity 1 the center is opaque.
    assert!((out.alpha[p] - 1.0).abs() < 1e-12);
    assert!((out.depth[p] - 2.0).abs() < 1e-4);
}

#[test]
fn single_gaussian_depth_reads_its_camera_depth() {
    let cam = camera(16);
    let mut g = GaussianSet::default();
    g.push(Vector3::new(0.1, -0.2, 2.7), [1.0, 0.0, 0.0, 0.0], Vector3::new(0.2, 0.1, 0.3), 0.5, Vector3::new(1.0, 1.0, 1.0));
    let out = rasterize(&g, &cam).unwrap();
    let (px, _) = cam.project_point(&g.positions[0]);
    let p = px.y as usize * 16 + px.x as usize;
    assert!((out.depth[p] - 2.7).abs() < 1e-4);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 4, 8] {
        let g = random_set(&mut rng, n);
        let report = gradient_check(&g, &camera(16), 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-3, "{n} gaussians: {report:?}");
        assert!(report.checked > report.skipped * 10);
    }
}

#[test]
fn opaque_splats_still_have_correct_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = random_set(&mut rng, 4);
    g.opacities.iter_mut().for_each(|o| *o = 1.0);
    let report = gradient_check(&g, &camera(16), 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn injected_gradient_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_set(&mut rng, 4);
    let config = RasterConfig { inject_gradient_fault: true, ..Default::default() };
    let report = gradient_check_with(&g, &camera(16), 1e-4, &probe_weights(16, 16, 1.0), &config).unwrap();
    assert!(report.max_rel_error > 0.1);
}

#[test]
fn zero_weight_loss_gives_exactly_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_set(&mut rng, 4);
    let cam = camera(16);
    let state = rasterize_with_state(&g, &cam, &RasterConfig::default()).unwrap();
    let grads = backward(&state, &g, &cam, &RenderGrads::zeros(16, 16));
    assert!(grads.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn shared_translation_of_scene_and_camera() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_set(&mut rng, 4);
    let cam = camera(16);
    let offset = Vector3::new(0.3, -1.2, 0.7);
    let a = rasterize(&g, &cam).unwrap();
    let moved_cam = cam.translated_world(&offset);
    let b = rasterize(&g.translated(&offset), &moved_cam).unwrap();
    for (x, y) in a.color.iter().zip(&b.color).chain(a.alpha.iter().zip(&b.alpha)) {
        assert!((x - y).abs() < 1e-9);
    }
    let report = gradient_check(&g.translated(&offset), &moved_cam, 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

fn arb_set() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 1usize..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn alpha_bounded_and_monotone_in_added_gaussians((seed, n) in arb_set()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_set(&mut rng, n + 1);
        let cam = camera(16);
        let mut fewer = g.clone();
        fewer.positions.pop();
        fewer.rotations.pop();
        fewer.scales.pop();
        fewer.opacities.pop();
        fewer.colors.pop();
        let full = rasterize(&g, &cam).unwrap();
        let part = rasterize(&fewer, &cam).unwrap();
        for (a, b) in full.alpha.iter().zip(&part.alpha) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!(*a >= *b - 1e-12);
        }
        prop_assert!(full.color.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
    }

    #[test]
    fn permutation_invariant((seed, n) in arb_set(), rot in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_set(&mut rng, n);
        let k = rot % n;
        let mut h = g.clone();
        h.positions.rotate_left(k);
        h.rotations.rotate_left(k);
        h.scales.rotate_left(k);
        h.opacities.rotate_left(k);
        h.colors.rotate_left(k);
        let cam = camera(16);
        let a = rasterize(&g, &cam).unwrap();
        let b = rasterize(&h, &cam).unwrap();
        for (x, y) in a.color.iter().zip(&b.color).chain(a.alpha.iter().zip(&b.alpha)).chain(a.depth.iter().zip(&b.depth)) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn tape_render_matches_direct_backward() {
    use gradtape::Graph;
    use humangs::rasterizer::{render_vars, set_to_tensors, GaussianVars};
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = random_set(&mut rng, 5);
    let cam = camera(16);
    let graph = Graph::new();
    let [p, r, s, o, c] = set_to_tensors(&g).map(|t| graph.leaf(t));
    let vars = GaussianVars { positions: p, rotations: r, scales: s, opacities: o, colors: c };
    let out = render_vars(&graph, &vars, &cam, &RasterConfig::default()).unwrap();
    let loss = graph.add(graph.sum(out.color), graph.sum(out.alpha));
    let grads = graph.backward(loss);
    let state = rasterize_with_state(&vars.to_set(&graph), &cam, &RasterConfig::default()).unwrap();
    let mut up = RenderGrads::zeros(16, 16);
    up.color.iter_mut().chain(up.alpha.iter_mut()).for_each(|v| *v = 1.0);
    let direct = backward(&state, &vars.to_set(&graph), &cam, &up);
    let tape_pos = grads.get(p).unwrap();
    for i in 0..5 {
        for k in 0..3 {
            let a = tape_pos.data()[i * 3 + k] as f64;
            let b = direct.positions[i][k];
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }
    assert!(grads.get(r).unwrap().all_finite() && grads.get(c).is_some());
}
