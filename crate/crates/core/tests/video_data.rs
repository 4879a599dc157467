mod common;

use proptest::prelude::*;
use vdeblur_core::video_data::{
    augment, ingest_directory, make_toy_clip, read_manifest, synthesize_blur, write_clip, write_manifest,
    AugmentConfig, Layout, MotionSpec, ToySpec,
};
use vdeblur_core::Error;

proptest! {
    #[test]
    fn blur_is_a_convex_combination(seed in 0u64..500, n in 1usize..6) {
        let mut r = common::rng(seed);
        let frames: Vec<_> = (0..n).map(|_| common::random_frame(&mut r, 6, 5)).collect();
        let b = synthesize_blur(&frames, n).unwrap();
        for i in 0..b.data().len() {
            let lo = frames.iter().map(|f| f.data()[i]).fold(f32::INFINITY, f32::min);
            let hi = frames.iter().map(|f| f.data()[i]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(b.data()[i] >= lo - 1e-6 && b.data()[i] <= hi + 1e-6);
        }
    }
}

#[test]
fn dataset_round_trip_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec::new(16, 16, MotionSpec::Objects);
    let clips: Vec<_> = (0..2).map(|s| make_toy_clip(s, 4, &spec, 3).unwrap()).collect();
    let ids = vec!["first".to_string(), "second".to_string()];
    for (id, c) in ids.iter().zip(&clips) {
        write_clip(dir.path(), id, c).unwrap();
    }
    write_manifest(dir.path(), &ids).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), ids);
    let loaded = ingest_directory(dir.path(), Layout::Dataset).unwrap();
    assert_eq!(loaded.len(), 2);
    for (l, c) in loaded.iter().zip(&clips) {
        assert_eq!(l.sequence.len(), 4);
        for (a, b) in l.sequence.pairs().iter().zip(c.pairs()) {
            assert!(a.blurry.max_abs_diff(&b.blurry) <= 0.5 / 255.0 + 1e-6);
            assert!(a.sharp.max_abs_diff(&b.sharp) <= 0.5 / 255.0 + 1e-6);
        }
    }
    let one = ingest_directory(&dir.path().join("first"), Layout::Video).unwrap();
    assert_eq!(one[0].id, "first");
}

#[test]
fn augmentation_keeps_blurry_and_sharp_aligned() {
    let spec = ToySpec::new(32, 32, MotionSpec::Static);
    let clip = make_toy_clip(4, 3, &spec, 1).unwrap();
    let cfg = AugmentConfig { crop: Some(16), noise_variance: 0.0, ..AugmentConfig::default() };
    let out = augment(&clip, &cfg, 9).unwrap();
    assert_eq!(out.dims(), (16, 16));
    for p in out.pairs() {
        assert_eq!(p.blurry, p.sharp, "with one accumulated frame blur equals sharp");
    }
    let too_big = AugmentConfig { crop: Some(64), ..AugmentConfig::default() };
    assert!(matches!(augment(&clip, &too_big, 9), Err(Error::Argument(_))));
}
