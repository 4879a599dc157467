mod common;

use common::{non_local_oracle, random_frame, rng};
use rand::Rng;
use vdeblur_autograd::{Graph, ParamStore, Tensor};
use vdeblur_core::abdn::{Abdn, AbdnConfig};
use vdeblur_core::fan::{fan_aggregate, Fan, FanConfig, ReliabilityTriplet};
use vdeblur_core::nn::{Init, ParamBuilder};
use vdeblur_core::ppn::{Ppn, PpnConfig};
use vdeblur_core::{Error, Frame};

fn ppn(width: usize, out_init: Init, seed: u64) -> (ParamStore<f32>, Ppn) {
    let mut store = ParamStore::new();
    let cfg = PpnConfig { width, ..PpnConfig::default() };
    let net = Ppn::new(&mut ParamBuilder::new(&mut store, seed), &cfg, out_init).unwrap();
    (store, net)
}

fn frames_tensor(frames: &[&Frame]) -> Tensor<f32> {
    let (w, h) = frames[0].dims();
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    Tensor::from_vec([frames.len(), 3, h, w], data).unwrap()
}

fn slice(t: &Tensor<f32>, k: usize) -> Frame {
    let [_, c, h, w] = t.shape();
    let n = c * h * w;
    Frame::from_planar(w, h, t.data()[k * n..(k + 1) * n].to_vec()).unwrap()
}

fn zero_params(store: &mut ParamStore<f32>, needle: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains(needle)).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn run_ppn(store: &ParamStore<f32>, net: &Ppn, blurry: [&Frame; 3], companions: [&Frame; 3]) -> [Frame; 3] {
    let mut g = Graph::new(store);
    let b = g.constant(frames_tensor(&blurry));
    let c = g.constant(frames_tensor(&companions));
    let p = net.forward(&mut g, b, c, true).unwrap();
    let t = g.value(p);
    [slice(t, 0), slice(t, 1), slice(t, 2)]
}

#[test]
fn encoder_shape_and_zero_response() {
    let (mut store, net) = ppn(32, Init::Scaled(0.1), 1);
    let mut r = rng(2);
    let f = random_frame(&mut r, 32, 32);
    let mut g = Graph::new(&store);
    let x = g.constant(frames_tensor(&[&f, &f]).reshape([1, 6, 32, 32]).unwrap());
    let e = net.encode(&mut g, x).unwrap();
    assert_eq!(g.shape(e), [1, 32, 8, 8]);
    let first = g.value(e).clone();
    let mut g2 = Graph::new(&store);
    let x2 = g2.constant(frames_tensor(&[&f, &f]).reshape([1, 6, 32, 32]).unwrap());
    let e2 = net.encode(&mut g2, x2).unwrap();
    assert_eq!(g2.value(e2), &first, "encoder must be bitwise reproducible");

    zero_params(&mut store, ".bias");
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros([1, 6, 32, 32]));
    let e = net.encode(&mut g, x).unwrap();
    assert!(g.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_rejects_indivisible_frames() {
    let (store, net) = ppn(8, Init::Zero, 1);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros([1, 6, 30, 32]));
    assert!(matches!(net.encode(&mut g, x), Err(Error::Dimension(_))));
}

#[test]
fn single_block_matches_brute_force_attention() {
    let (store, net) = ppn(2, Init::Scaled(1.0), 3);
    let mut r = rng(4);
    let (c, side) = (6, 4);
    let x: Vec<Vec<f64>> = (0..c).map(|_| (0..side * side).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let data: Vec<f32> = x.iter().flatten().map(|&v| v as f32).collect();
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::from_vec([1, c, side, side], data).unwrap());
    let z = net.blocks[0].forward(&mut g, xv).unwrap();
    let expect = non_local_oracle(&store, "ppn.nlb0", &x);
    for (ch, row) in expect.iter().enumerate() {
        for (p, &e) in row.iter().enumerate() {
            let got = f64::from(g.value(z).data()[ch * side * side + p]);
            assert!((got - e).abs() < 1e-5, "channel {ch} position {p}: {got} vs {e}");
        }
    }
    let a = net.blocks[0].attention(&mut g, xv).unwrap();
    let [_, _, rows, cols] = g.shape(a);
    assert_eq!((rows, cols), (16, 16));
    for row in g.value(a).data().chunks(cols) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn zero_output_projection_makes_fusion_identity() {
    let (store, net) = ppn(4, Init::Zero, 5);
    let mut r = rng(6);
    let data: Vec<f32> = (0..3 * 4 * 4 * 4).map(|_| r.gen_range(0.0..2.0)).collect();
    let mut g = Graph::new(&store);
    let f = g.constant(Tensor::from_vec([3, 4, 4, 4], data.clone()).unwrap());
    let fused = net.fuse(&mut g, f, true).unwrap();
    assert_eq!(g.value(fused).data(), &data[..]);
}

#[test]
fn zero_residual_layer_returns_blurry_input() {
    let (store, net) = ppn(8, Init::Zero, 7);
    let mut r = rng(8);
    let frames: Vec<Frame> = (0..6).map(|_| random_frame(&mut r, 16, 24)).collect();
    let out = run_ppn(&store, &net, [&frames[0], &frames[1], &frames[2]], [&frames[3], &frames[4], &frames[5]]);
    for (p, b) in out.iter().zip(&frames) {
        assert_eq!(p.dims(), (16, 24));
        assert_eq!(p, b);
    }
}

#[test]
fn identical_groups_without_fusion_give_identical_outputs() {
    let (mut store, net) = ppn(8, Init::Scaled(0.5), 9);
    zero_params(&mut store, ".out.");
    let id = store.id("ppn.out.weight").unwrap();
    store.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * ((i % 7) as f32 - 3.0));
    let f = common::textured(10, 16, 16);
    let out = run_ppn(&store, &net, [&f; 3], [&f; 3]);
    assert!(out[0].max_abs_diff(&out[1]) < 1e-5);
    assert!(out[1].max_abs_diff(&out[2]) < 1e-5);
    assert!(out[0].max_abs_diff(&f) > 1e-4, "decoder should alter the frame");
}

fn fr(v: &[Frame]) -> [&Frame; 3] {
    [&v[0], &v[1], &v[2]]
}

#[test]
fn fusion_carries_information_across_frames_only_when_active() {
    let mut r = rng(11);
    let frames: Vec<Frame> = (0..3).map(|_| random_frame(&mut r, 16, 16)).collect();
    let mut perturbed = frames.clone();
    perturbed[2] = random_frame(&mut r, 16, 16);

    let (mut store, net) = ppn(8, Init::Scaled(0.5), 12);
    let a = run_ppn(&store, &net, fr(&frames), fr(&frames));
    let b = run_ppn(&store, &net, fr(&perturbed), fr(&perturbed));
    assert!(a[0].max_abs_diff(&b[0]) > 0.0, "active fusion should mix frames");

    for i in 0..net.blocks.len() {
        zero_params(&mut store, &format!("ppn.nlb{i}.out."));
    }
    let a = run_ppn(&store, &net, fr(&frames), fr(&frames));
    let b = run_ppn(&store, &net, fr(&perturbed), fr(&perturbed));
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[1]);
}

fn abdn(out_init: Init, seed: u64) -> (ParamStore<f32>, Abdn) {
    let mut store = ParamStore::new();
    let net = Abdn::new(&mut ParamBuilder::new(&mut store, seed), &AbdnConfig::default(), out_init).unwrap();
    (store, net)
}

fn run_abdn(store: &ParamStore<f32>, net: &Abdn, fr: [&Frame; 3]) -> Frame {
    let mut g = Graph::new(store);
    let v = fr.map(|f| g.constant(f.to_tensor()));
    let d = net.forward(&mut g, v[0], v[1], v[2]).unwrap();
    Frame::from_tensor(g.value(d)).unwrap()
}

#[test]
fn deblurring_residual_identity_and_shape() {
    let (store, net) = abdn(Init::Zero, 13);
    let mut r = rng(14);
    let f: Vec<Frame> = (0..3).map(|_| random_frame(&mut r, 32, 32)).collect();
    let d = run_abdn(&store, &net, [&f[0], &f[1], &f[2]]);
    assert_eq!(d, f[1]);

    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros([1, 3, 36, 32]));
    assert!(matches!(net.forward(&mut g, x, x, x), Err(Error::Dimension(_))));
}

#[test]
fn deblurring_output_stays_in_unit_range() {
    let (store, net) = abdn(Init::Scaled(5.0), 15);
    let mut r = rng(16);
    let f: Vec<Frame> = (0..3).map(|_| random_frame(&mut r, 16, 16)).collect();
    let d = run_abdn(&store, &net, [&f[0], &f[1], &f[2]]);
    assert!(d.in_unit_range());
    assert!(d.max_abs_diff(&f[1]) > 0.01);
}

#[test]
fn deblurring_is_translation_covariant_away_from_borders() {
    let (store, net) = abdn(Init::Scaled(0.5), 17);
    let (size, shift) = (128, 8);
    let base: Vec<Frame> = (0..3).map(|k| common::textured(20 + k, size + shift, size)).collect();
    let crop = |f: &Frame, x0: usize| Frame::from_fn(size, size, |c, x, y| f.get(c, x + x0, y));
    let a: Vec<Frame> = base.iter().map(|f| crop(f, 0)).collect();
    let b: Vec<Frame> = base.iter().map(|f| crop(f, shift)).collect();
    let da = run_abdn(&store, &net, [&a[0], &a[1], &a[2]]);
    let db = run_abdn(&store, &net, [&b[0], &b[1], &b[2]]);
    for c in 0..3 {
        for y in 48..80 {
            for x in 48..80 {
                assert!((da.get(c, x + shift, y) - db.get(c, x, y)).abs() < 1e-5, "({x},{y})");
            }
        }
    }
}

fn fan(logit_init: Init, bias: [f32; 3]) -> (ParamStore<f32>, Fan) {
    let mut store = ParamStore::new();
    let net = Fan::new(&mut ParamBuilder::new(&mut store, 18), &FanConfig::default(), logit_init, bias).unwrap();
    (store, net)
}

fn reliability(store: &ParamStore<f32>, net: &Fan, seed: u64) -> ReliabilityTriplet {
    let mut r = rng(seed);
    let (w, h) = (16, 16);
    let mut rand = |c: usize, lo: f32, hi: f32| {
        Tensor::from_vec([1, c, h, w], (0..c * w * h).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
    };
    let (cand, occ, flows) = (rand(9, 0.0, 1.0), rand(2, 0.0, 1.0).map(f32::round), rand(4, -3.0, 3.0));
    let mut g = Graph::new(store);
    let (cand, occ, flows) = (g.constant(cand), g.constant(occ), g.constant(flows));
    let rm = net.reliability(&mut g, cand, occ, flows).unwrap();
    ReliabilityTriplet::from_tensor(g.value(rm)).unwrap()
}

#[test]
fn zero_logits_give_uniform_maps() {
    let (store, net) = fan(Init::Zero, [0.0; 3]);
    let rm = reliability(&store, &net, 19);
    for k in 0..3 {
        assert!(rm.map(k).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
    }
}

#[test]
fn random_reliability_maps_are_normalised() {
    let (store, net) = fan(Init::Scaled(3.0), [0.0, 1.0, 0.0]);
    let rm = reliability(&store, &net, 20);
    for p in 0..16 * 16 {
        let s: f32 = (0..3).map(|k| rm.map(k)[p]).sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!((0..3).all(|k| rm.map(k)[p] >= 0.0));
    }
    assert!((0..3).any(|k| (rm.mean(k) - 1.0 / 3.0).abs() > 1e-3));
}

fn random_triplet(r: &mut rand_chacha::ChaCha8Rng, w: usize, h: usize) -> ReliabilityTriplet {
    let mut maps = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for p in 0..w * h {
        let e: Vec<f32> = (0..3).map(|_| r.gen_range(0.0f32..1.0)).collect();
        let s: f32 = e.iter().sum();
        maps[0][p] = e[0] / s;
        maps[1][p] = e[1] / s;
        maps[2][p] = 1.0 - maps[0][p] - maps[1][p];
    }
    ReliabilityTriplet::new(w, h, maps).unwrap()
}

#[test]
fn aggregation_is_linear_and_permutation_consistent() {
    let mut r = rng(21);
    let (w, h) = (9, 7);
    let f: Vec<Frame> = (0..4).map(|_| random_frame(&mut r, w, h)).collect();
    let rm = random_triplet(&mut r, w, h);
    let a = fan_aggregate([&f[0], &f[1], &f[2]], &rm).unwrap();
    let b = fan_aggregate([&f[3], &f[1], &f[2]], &rm).unwrap();
    let sum = Frame::from_fn(w, h, |c, x, y| 0.5 * (f[0].get(c, x, y) + f[3].get(c, x, y)));
    let c = fan_aggregate([&sum, &f[1], &f[2]], &rm).unwrap();
    for i in 0..a.data().len() {
        assert!((c.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-6);
    }
    let swapped =
        ReliabilityTriplet::new(w, h, [rm.map(2).to_vec(), rm.map(1).to_vec(), rm.map(0).to_vec()]).unwrap();
    let s = fan_aggregate([&f[2], &f[1], &f[0]], &swapped).unwrap();
    assert!(s.max_abs_diff(&a) < 1e-6);
}

#[test]
fn unnormalised_maps_are_rejected() {
    let n = 4;
    let err = ReliabilityTriplet::new(2, 2, [vec![0.5; n], vec![0.5; n], vec![0.5; n]]);
    assert!(matches!(err, Err(Error::Argument(_))));
    let neg = ReliabilityTriplet::new(2, 2, [vec![-0.5; n], vec![1.0; n], vec![0.5; n]]);
    assert!(matches!(neg, Err(Error::Argument(_))));
}
