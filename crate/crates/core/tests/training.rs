mod common;

use common::{rng, toy_clip};
use vdeblur_autograd::{Gradients, ParamStore, Tensor};
use vdeblur_core::flow_align::{backend_by_name, FlowSession, BUILTIN_BACKEND};
use vdeblur_core::model::{DanModel, ModelConfig, ModelInit, StageToggles};
use vdeblur_core::pipeline::run_video;
use vdeblur_core::training::{
    compute_losses, load_checkpoint, save_checkpoint, sequence_loss, train, Adam, LossBreakdown, StageOutputs,
    TrainConfig, TrainOptions, Trainer, METRICS_HEADER,
};
use vdeblur_core::video_data::{AugmentConfig, TrainingSequence};
use vdeblur_core::{Error, Frame};

fn session() -> FlowSession {
    FlowSession::new(backend_by_name(BUILTIN_BACKEND).unwrap())
}

fn small_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch: 2,
        patch: 16,
        seq_len: 3,
        max_iters: 20,
        augment: AugmentConfig::default(),
        ..TrainConfig::default()
    }
}

fn small_data() -> Vec<TrainingSequence> {
    vec![toy_clip(1, 6, 24, 24), toy_clip(2, 5, 16, 16)]
}

fn trainer(seed: u64) -> Trainer {
    let model = DanModel::new(ModelConfig::toy(), ModelInit::Training, 3).unwrap();
    Trainer::new(model, TrainConfig { seed, ..small_config() }).unwrap()
}

#[test]
fn perfect_outputs_have_zero_loss() {
    let s: Vec<Frame> = (0..4).map(|k| common::textured(k, 8, 8)).collect();
    let out = StageOutputs {
        preprocessed: Some((0..4).map(|c| {
            let [a, b, d] = vdeblur_core::pipeline::window_indices(c, 4);
            [s[a].clone(), s[b].clone(), s[d].clone()]
        }).collect()),
        deblurred: s.clone(),
        aggregated: s.clone(),
    };
    assert_eq!(compute_losses(&out, &s).unwrap(), LossBreakdown::default());
}

#[test]
fn constant_offset_gives_closed_form_loss() {
    let s: Vec<Frame> = (0..3).map(|_| Frame::filled(6, 4, 0.4)).collect();
    let a: Vec<Frame> = (0..3).map(|_| Frame::filled(6, 4, 0.5)).collect();
    let out = StageOutputs { preprocessed: None, deblurred: s.clone(), aggregated: a };
    let l = compute_losses(&out, &s).unwrap();
    assert!((l.l_fan - 0.01).abs() < 1e-7, "{}", l.l_fan);
    assert_eq!((l.l_ppn, l.l_abdn), (0.0, 0.0));
    assert_eq!(l.l_total, l.l_ppn + l.l_abdn + l.l_fan);
}

#[test]
fn misaligned_outputs_are_a_contract_error() {
    let s: Vec<Frame> = (0..3).map(|_| Frame::filled(4, 4, 0.4)).collect();
    let out = StageOutputs { preprocessed: None, deblurred: s[..2].to_vec(), aggregated: s.clone() };
    assert!(matches!(compute_losses(&out, &s), Err(Error::Contract(_))));
}

#[test]
fn unrolled_loss_matches_pipeline_outputs() {
    let model = DanModel::new(ModelConfig::toy(), ModelInit::Training, 4).unwrap();
    let clip = toy_clip(5, 5, 16, 16);
    let toggles = StageToggles::default();
    let out = run_video(&model, &clip.blurry(), toggles, true).unwrap();
    let expect = compute_losses(&StageOutputs::from_pipeline(&out, true).unwrap(), &clip.sharp()).unwrap();
    for window in [0, 1, 2, 3] {
        let got = sequence_loss(&model, &model.params, &mut session(), &toggles, &clip, window, false).unwrap();
        for (a, b) in [(got.losses.l_ppn, expect.l_ppn), (got.losses.l_abdn, expect.l_abdn), (got.losses.l_fan, expect.l_fan)] {
            assert!((a - b).abs() < 1e-6 * b.max(1e-3), "window {window}: {a} vs {b}");
        }
    }
}

#[test]
fn truncation_window_changes_gradients_not_losses() {
    let model = DanModel::new(ModelConfig::toy(), ModelInit::Training, 6).unwrap();
    let clip = toy_clip(7, 4, 16, 16);
    let toggles = StageToggles::default();
    let run = |w| sequence_loss(&model, &model.params, &mut session(), &toggles, &clip, w, true).unwrap();
    let (a, b) = (run(1), run(0));
    assert_eq!(a.losses, b.losses);
    let (ga, gb) = (a.grads.unwrap(), b.grads.unwrap());
    let id = model.params.id("ppn.enc0.weight").unwrap();
    assert!(ga.get(id).unwrap().max_abs_diff(gb.get(id).unwrap()) > 0.0);
}

#[test]
fn learning_rate_drops_tenfold_at_the_boundary() {
    let full = TrainConfig { max_iters: 1_000_000, ..TrainConfig::default() };
    assert_eq!(full.decay_interval(), 400_000);
    assert_eq!(full.lr_at(399_999), 1e-4);
    assert_eq!(full.lr_at(400_000), 1e-4 * 0.1);
    let toy = TrainConfig { max_iters: 100, lr: 1e-3, ..TrainConfig::default() };
    assert_eq!(toy.lr_at(39), 1e-3);
    assert_eq!(toy.lr_at(40), 1e-3 * 0.1);
    let fixed = TrainConfig { lr_decay_every: Some(7), ..TrainConfig::default() };
    assert_eq!(fixed.lr_at(14), 1e-4 * 0.1 * 0.1);
}

#[test]
fn invalid_settings_are_rejected() {
    let m = ModelConfig::toy();
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { batch: 0, ..TrainConfig::default() },
        TrainConfig { patch: 20, ..TrainConfig::default() },
        TrainConfig { seq_len: 1, ..TrainConfig::default() },
        TrainConfig { betas: (1.0, 0.999), ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(&m), Err(Error::Config(_))), "{bad:?}");
    }
    TrainConfig::default().validate(&m).unwrap();
}

#[test]
fn adam_matches_reference_recursion() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::from_vec([1, 1, 1, 2], vec![0.5, -0.25]).unwrap()).unwrap();
    let mut adam = Adam::new(&store, (0.9, 0.999), 1e-8);
    let (mut w, mut m, mut v) = ([0.5f64, -0.25], [0.0f64; 2], [0.0f64; 2]);
    for t in 1..=5 {
        let g = [w[0] * 2.0, (w[1] - 1.0) * 3.0];
        let mut grads = Gradients::for_store(&store);
        grads.accumulate(id, &Tensor::from_vec([1, 1, 1, 2], g.map(|x| x as f32).to_vec()).unwrap());
        adam.step(&mut store, &grads, 0.01);
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..2 {
            assert!((f64::from(store.get(id).data()[i]) - w[i]).abs() < 1e-5);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(0);
    t.step(&small_data()).unwrap();
    t.set_snapshot("[train]\nlr = 0.001\n");
    let ck = t.checkpoint();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&p1, &ck).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded, ck);
    save_checkpoint(&p2, &loaded).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &trainer(0).checkpoint()).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointCorrupt(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointCorrupt(_))));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&path, &future).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { found: 2, expected: 1 })));

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointCorrupt(_))));
}

#[test]
fn resumed_training_continues_identically() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let mut unbroken = trainer(5);
    for _ in 0..2 {
        unbroken.step(&data).unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &unbroken.checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(resumed.iteration(), 2);
    let a = unbroken.step(&data).unwrap();
    let b = resumed.step(&data).unwrap();
    assert!((a.losses.l_total - b.losses.l_total).abs() < 1e-6);
    assert_eq!(a, b);
}

#[test]
fn same_seed_gives_same_losses() {
    let data = small_data();
    let (mut a, mut b) = (trainer(9), trainer(9));
    for _ in 0..8 {
        assert_eq!(a.step(&data).unwrap(), b.step(&data).unwrap());
    }
    let c = trainer(10);
    assert_ne!(c.sample(&data, 0, 0).unwrap(), a.sample(&data, 0, 0).unwrap());
}

#[test]
fn exploding_learning_rate_trips_the_divergence_guard() {
    let data = small_data();
    let model = DanModel::new(ModelConfig::toy(), ModelInit::Training, 3).unwrap();
    let mut t = Trainer::new(model, TrainConfig { lr: 1e30, ..small_config() }).unwrap();
    let err = (0..10).find_map(|_| t.step(&data).err());
    assert!(matches!(err, Some(Error::Divergence { .. })), "{err:?}");
}

#[test]
fn training_writes_metrics_and_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(1);
    t.config.max_iters = 4;
    t.config.checkpoint_every = 2;
    t.config.val_every = 2;
    let opts = TrainOptions { validation: Some(toy_clip(3, 4, 16, 16)), out_dir: Some(dir.path().to_path_buf()) };
    let rows = train(&mut t, &small_data(), &opts, |_| {}).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert!(rows[1].val_psnr.is_some() && rows[0].val_psnr.is_none());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[1].split(',').count(), 7);
    assert!(dir.path().join("checkpoint_0000002.ckpt").exists());
    let ck = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ck.iteration, 4);
    assert_eq!(ck.params, t.model.params);
}

#[test]
fn finite_differences_agree_with_backpropagation() {
    let model = DanModel::new(ModelConfig::toy(), ModelInit::Training, 12).unwrap();
    let clip = toy_clip(13, 3, 16, 16);
    let toggles = StageToggles::default();
    let store = model.params.cast::<f64>();
    let mut flows = session();
    flows.start_recording();
    let analytic = sequence_loss(&model, &store, &mut flows, &toggles, &clip, 0, true).unwrap();
    let recorded = flows.take_recording();
    let grads = analytic.grads.unwrap();
    let mut r = rng(14);
    let mut checked = 0;
    for name in ["ppn.enc1.weight", "ppn.nlb2.theta.weight", "abdn.down1.conv.weight", "fan.logits.bias"] {
        let id = store.id(name).unwrap();
        let g = grads.get(id).unwrap();
        for _ in 0..3 {
            let i = rand::Rng::gen_range(&mut r, 0..g.len());
            let eps = 1e-6;
            let mut eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                flows.replay(recorded.clone());
                sequence_loss(&model, &s, &mut flows, &toggles, &clip, 0, false).unwrap().losses.l_total
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = g.data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-8 {
                assert!((a - numeric).abs() / scale < 1e-2, "{name}[{i}]: {a} vs {numeric}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 8, "only {checked} informative parameters");
}
