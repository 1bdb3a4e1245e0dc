use gradtape::{Graph, ParamStore, Session, Tensor};
use humangs::geometry::DepthMap;
use humangs::networks::{
    sample_volume, voxelize, DepthRefiner, GaussianHead, ImageExtractor, ModelParams, NetConfig, OffsetHead, RandomConvEncoder,
    SemanticEncoder, Spd, SparseConvNet, STAGE1_PREFIX,
};
use humangs::selftest::{brute_force_sample, trilinear_max_error};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> NetConfig {
    NetConfig {
        unet_widths: [8, 8, 8],
        image_feature_channels: 8,
        depth_feature_channels: 8,
        sparse_widths: [4, 4, 4, 4],
        spd_channels: 8,
        head_hidden: 16,
        offset_hidden: 16,
        ..NetConfig::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::new(shape, (0..shape.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect())
}

#[test]
fn default_volume_is_352_channels_wide() {
    assert_eq!(NetConfig::default().fused_channels(), 352);
}

#[test]
fn trilinear_matches_eight_corner_oracle_on_1000_queries() {
    for seed in 0..3 {
        let e = trilinear_max_error(seed, 1000).unwrap();
        assert!(e < 1e-5, "seed {seed}: {e}");
    }
}

fn probe_volume(seed: u64) -> (ParamStore, SparseConvNet, Vec<Vector3<f64>>, Tensor) {
    let mut store = ParamStore::new(seed);
    let net = SparseConvNet::new(&mut store, "v", 3, &small());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.12..0.12))).collect();
    let feats = random_tensor(&mut rng, &[300, 3], -1.0, 1.0);
    (store, net, pts, feats)
}

#[test]
fn voxel_center_and_midpoint_queries() {
    let (store, net, pts, feats) = probe_volume(2);
    let s = Session::new(&store);
    let vol = net.build_volume(&s, &pts, s.constant(feats)).unwrap();
    let table = s.value(vol.features);
    let c = table.shape()[1];
    let row = |m: [i32; 3]| table.data()[vol.cells[&m] * c..(vol.cells[&m] + 1) * c].to_vec();
    let pairs: Vec<([i32; 3], [i32; 3])> =
        vol.cells.keys().filter_map(|m| vol.cells.get(&[m[0] + 1, m[1], m[2]]).map(|_| (*m, [m[0] + 1, m[1], m[2]]))).collect();
    assert!(!pairs.is_empty());
    for (a, b) in pairs {
        let (ca, cb) = (vol.cell_center(a), vol.cell_center(b));
        let at = s.value(sample_volume(&s, &vol, &[ca, (ca + cb) / 2.0]));
        let (fa, fb) = (row(a), row(b));
        for k in 0..c {
            assert!((at.data()[k] - fa[k]).abs() < 1e-6);
            assert!((at.data()[c + k] - 0.5 * (fa[k] + fb[k])).abs() < 1e-5);
        }
    }
}

#[test]
fn out_of_bounds_queries_are_zero() {
    let (store, net, pts, feats) = probe_volume(3);
    let s = Session::new(&store);
    let vol = net.build_volume(&s, &pts, s.constant(feats)).unwrap();
    let far = Vector3::new(5.0, 0.0, 0.0);
    let out = s.value(sample_volume(&s, &vol, &[far]));
    assert!(out.data().iter().all(|v| *v == 0.0));
    assert!(brute_force_sample(&vol, &s.value(vol.features), &far).iter().all(|v| *v == 0.0));
}

#[test]
fn points_sharing_a_voxel_are_averaged() {
    let vs = 0.005;
    let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.001, 0.002, 0.0011), Vector3::new(0.02, 0.0, 0.0)];
    let vox = voxelize(&pts, vs);
    assert_eq!(vox.coords.len(), 2);
    assert_eq!(vox.assignment, vec![0, 0, 1]);
    let g = Graph::new();
    let f = g.constant(Tensor::new(&[3, 2], vec![1.0, 4.0, 3.0, -2.0, 7.0, 7.0]));
    let avg = g.value(vox.average(&g, f));
    assert_eq!(avg.data(), &[2.0, 1.0, 7.0, 7.0]);
}

#[test]
fn half_meter_cloud_spans_a_hundred_finest_voxels() {
    let pts: Vec<Vector3<f64>> = (0..=500).map(|i| Vector3::new(i as f64 * 0.001, 0.0, 0.0)).collect();
    let vox = voxelize(&pts, 0.005);
    let span = vox.coords.iter().map(|c| c[0]).max().unwrap() + 1;
    assert!((100..=101).contains(&span), "{span}");
}

#[test]
fn single_point_volume_has_one_voxel() {
    let mut store = ParamStore::new(1);
    let net = SparseConvNet::new(&mut store, "v", 2, &small());
    let s = Session::new(&store);
    let p = Vector3::new(0.1, 0.2, 0.3);
    let vol = net.build_volume(&s, &[p], s.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]))).unwrap();
    assert_eq!(vol.finest_voxels, 1);
    assert_eq!(vol.cells.len(), 1);
    assert!(s.value(sample_volume(&s, &vol, &[p])).data().iter().all(|v| v.is_finite()));
    assert!(net.build_volume(&s, &[], s.constant(Tensor::zeros(&[0, 2]))).is_err());
}

#[test]
fn extractor_keeps_resolution_and_is_deterministic() {
    let cfg = NetConfig { unet_widths: [8, 8, 8], ..NetConfig::default() };
    let mut store = ParamStore::new(4);
    let ex = ImageExtractor::new(&mut store, "x", &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = random_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0);
    let s = Session::new(&store);
    let a = s.value(ex.forward(&s, s.constant(img.clone())).unwrap());
    let b = s.value(ex.forward(&s, s.constant(img.clone())).unwrap());
    assert_eq!(a.shape(), &[32, 16, 16]);
    assert_eq!(a.data(), b.data());
    assert!(ex.forward(&s, s.constant(Tensor::zeros(&[3, 18, 16]))).is_err());
    let x = s.leaf(img);
    let m = s.mean(ex.forward(&s, x).unwrap());
    let grads = Graph::backward(&s, m);
    assert!(grads.get(x).unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn refiner_output_is_a_valid_depth_map() {
    let cfg = small();
    let mut store = ParamStore::new(5);
    let r = DepthRefiner::new(&mut store, "r", &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values: Vec<f32> = (0..256).map(|_| rng.random_range(0.5..3.0)).collect();
    let valid: Vec<bool> = (0..256).map(|i| i % 3 != 0).collect();
    let depth = DepthMap::with_mask(16, 16, values, valid).unwrap();
    let img = random_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0);
    let s = Session::new(&store);
    let out = r.forward(&s, &depth, &img).unwrap();
    let again = r.forward(&s, &depth, &img).unwrap();
    let dm = out.to_depth_map(&s);
    assert!(dm.check_invariants());
    assert_eq!(s.value(out.depth).data(), s.value(again.depth).data());
    assert_eq!(s.shape(out.features), vec![cfg.depth_feature_channels, 16, 16]);
    assert!(r.forward(&s, &depth, &Tensor::zeros(&[3, 8, 16])).is_err());
}

#[test]
fn spd_count_and_displacement_bound() {
    let cfg = small();
    let mut store = ParamStore::new(6);
    let spd = Spd::new(&mut store, "spd", 5, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100;
    let parents = random_tensor(&mut rng, &[n, 3], -0.3, 0.3);
    let ctx = random_tensor(&mut rng, &[n, 5], -3.0, 3.0);
    let s = Session::new(&store);
    let out = spd.forward(&s, s.constant(parents.clone()), s.constant(ctx), &Vector3::zeros()).unwrap();
    let pos = s.value(out.positions);
    assert_eq!(pos.shape(), &[800, 3]);
    assert_eq!(s.shape(out.features)[0], 800);
    // Each child stays within two steps of bound of its root parent.
    let bound = 2.0 * cfg.spd_bound + 1e-6;
    for i in 0..800 {
        let p = i / 8;
        let d: f64 = (0..3).map(|k| ((pos.data()[i * 3 + k] - parents.data()[p * 3 + k]) as f64).powi(2)).sum::<f64>().sqrt();
        assert!(d <= bound, "child {i}: {d}");
    }
    assert!(spd.forward(&s, s.constant(Tensor::zeros(&[0, 3])), s.constant(Tensor::zeros(&[0, 5])), &Vector3::zeros()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn head_outputs_are_valid_gaussians(seed in 0u64..1000, n in 1usize..40, spread in 0.0f32..50.0) {
        let cfg = small();
        let mut store = ParamStore::new(seed);
        let head = GaussianHead::new(&mut store, "h", 6, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[n, 6], -spread - 1e-3, spread + 1e-3);
        let s = Session::new(&store);
        let o = head.forward(&s, s.constant(x)).unwrap();
        let (q, sc, op, col) = (s.value(o.rotations), s.value(o.scales), s.value(o.opacities), s.value(o.colors));
        for i in 0..n {
            let norm: f32 = q.data()[i * 4..i * 4 + 4].iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
            prop_assert!(sc.data()[i * 3..i * 3 + 3].iter().all(|v| *v > 0.0 && *v as f64 <= cfg.scale_max + 1e-7));
            prop_assert!(op.data()[i] >= 0.0 && op.data()[i] <= 1.0);
            prop_assert!(col.data()[i * 3..i * 3 + 3].iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn spd_output_count_is_n_r1_r2(n in 1usize..30) {
        let cfg = small();
        let mut store = ParamStore::new(0);
        let spd = Spd::new(&mut store, "spd", 2, &cfg);
        let s = Session::new(&store);
        let out = spd.forward(&s, s.constant(Tensor::zeros(&[n, 3])), s.constant(Tensor::zeros(&[n, 2])), &Vector3::zeros()).unwrap();
        prop_assert_eq!(s.shape(out.positions), vec![n * cfg.upsampling(), 3]);
    }

    #[test]
    fn offsets_stay_within_delta_max(seed in 0u64..1000, spread in 0.0f32..100.0) {
        let cfg = small();
        let mut store = ParamStore::new(seed);
        let head = OffsetHead::new(&mut store, "o", 4, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Session::new(&store);
        let d = s.value(head.forward(&s, s.constant(random_tensor(&mut rng, &[16, 4], -spread - 1e-3, spread + 1e-3))).unwrap());
        prop_assert!(d.data().iter().all(|v| v.abs() as f64 <= cfg.delta_max + 1e-7));
    }
}

#[test]
fn zero_input_head_is_finite() {
    let cfg = small();
    let mut store = ParamStore::new(9);
    let head = GaussianHead::new(&mut store, "h", 6, &cfg);
    let s = Session::new(&store);
    let a = head.forward(&s, s.constant(Tensor::zeros(&[3, 6]))).unwrap();
    let b = head.forward(&s, s.constant(Tensor::zeros(&[3, 6]))).unwrap();
    for (x, y) in [(a.rotations, b.rotations), (a.scales, b.scales), (a.opacities, b.opacities), (a.colors, b.colors)] {
        assert!(s.value(x).data().iter().all(|v| v.is_finite()));
        assert_eq!(s.value(x).data(), s.value(y).data());
    }
}

#[test]
fn zero_weight_offsets_are_exactly_zero() {
    let cfg = small();
    let mut store = ParamStore::new(10);
    let head = OffsetHead::new(&mut store, "o", 4, &cfg);
    for id in store.ids_with_prefix("o").collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let s = Session::new(&store);
    let d = s.value(head.forward(&s, s.constant(Tensor::new(&[2, 4], vec![1.0, -2.0, 3.0, 4.0, 0.5, 0.1, -9.0, 2.0]))).unwrap());
    assert!(d.data().iter().all(|v| *v == 0.0));
}

#[test]
fn offset_gradient_is_finite_and_nonzero() {
    let cfg = small();
    let mut store = ParamStore::new(11);
    let head = OffsetHead::new(&mut store, "o", 4, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = Session::new(&store);
    let x = s.leaf(random_tensor(&mut rng, &[8, 4], -1.0, 1.0));
    let d = head.forward(&s, x).unwrap();
    let grads = Graph::backward(&s, s.sum(s.square(d)));
    let g = grads.get(x).unwrap();
    assert!(g.data().iter().all(|v| v.is_finite()));
    assert!(g.data().iter().any(|v| *v != 0.0));
}

#[test]
fn semantic_encoder_contracts() {
    let enc = RandomConvEncoder::new(7, 64);
    assert_eq!(enc.weights(), RandomConvEncoder::new(7, 64).weights());
    assert_ne!(enc.weights(), RandomConvEncoder::new(8, 64).weights());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0);
    let dim: Vec<f32> = img.data().iter().map(|v| v * 0.5).collect();
    let g = Graph::new();
    let a = g.value(enc.encode(&g, g.constant(img.clone())));
    let b = g.value(enc.encode(&g, g.constant(img.clone())));
    let c = g.value(enc.encode(&g, g.constant(Tensor::new(&[3, 16, 16], dim))));
    assert_eq!(a.shape(), &[64]);
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() > 0.0);
}

#[test]
fn model_checksum_tracks_stage1_parameters() {
    let mut m = ModelParams::new(&small(), 3).unwrap();
    let before = m.checksum(STAGE1_PREFIX);
    assert_eq!(before, ModelParams::new(&small(), 3).unwrap().checksum(STAGE1_PREFIX));
    let id = m.store.ids_with_prefix("s2.").next().unwrap();
    m.store.get_mut(id).data_mut()[0] += 1.0;
    assert_eq!(m.checksum(STAGE1_PREFIX), before);
    let id = m.store.ids_with_prefix(STAGE1_PREFIX).next().unwrap();
    m.store.get_mut(id).data_mut()[0] += 1.0;
    assert_ne!(m.checksum(STAGE1_PREFIX), before);
}
