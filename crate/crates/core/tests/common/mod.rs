#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdeblur_autograd::ParamStore;
use vdeblur_core::video_data::{make_toy_clip, make_toy_sequence, MotionSpec, ToySpec, TrainingSequence};
use vdeblur_core::Frame;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
    let data = (0..3 * w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
    Frame::from_planar(w, h, data).unwrap()
}

pub fn textured(seed: u64, w: usize, h: usize) -> Frame {
    make_toy_sequence(seed, 3, &ToySpec::new(w, h, MotionSpec::Static)).unwrap().frames[0].clone()
}

pub fn toy_clip(seed: u64, len: usize, w: usize, h: usize) -> TrainingSequence {
    make_toy_clip(seed, len, &ToySpec::new(w, h, MotionSpec::Objects), 7).unwrap()
}

/// Values of parameter `name` as f64.
pub fn param(store: &ParamStore<f32>, name: &str) -> Vec<f64> {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().iter().map(|&v| f64::from(v)).collect()
}

/// Non-local block by explicit loops over query and key positions.
/// `x` is `[channels][positions]`; weights are `[cout][cin]` row-major.
pub fn non_local_oracle(store: &ParamStore<f32>, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = x.len();
    let n = x[0].len();
    let project = |layer: &str, input: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let w = param(store, &format!("{name}.{layer}.weight"));
        let b = param(store, &format!("{name}.{layer}.bias"));
        let cin = input.len();
        (0..b.len())
            .map(|o| (0..n).map(|p| b[o] + (0..cin).map(|i| w[o * cin + i] * input[i][p]).sum::<f64>()).collect())
            .collect()
    };
    let theta = project("theta", x);
    let phi = project("phi", x);
    let g = project("g", x);
    let inner = theta.len();
    let mut y = vec![vec![0.0; n]; inner];
    for q in 0..n {
        let scores: Vec<f64> = (0..n).map(|k| (0..inner).map(|i| theta[i][q] * phi[i][k]).sum()).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..n {
            for i in 0..inner {
                y[i][q] += e[k] / z * g[i][k];
            }
        }
    }
    let out = project("out", &y);
    (0..c).map(|ch| (0..n).map(|p| x[ch][p] + out[ch][p]).collect()).collect()
}
