use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlurSharpPair, SharpSequence, TrainingSequence};
use crate::error::{Error, Result};
use crate::frame::Frame;

/// Per-pixel arithmetic mean of `n_accumulate` consecutive sharp frames.
pub fn synthesize_blur(sharp_window: &[Frame], n_accumulate: usize) -> Result<Frame> {
    if n_accumulate == 0 || sharp_window.is_empty() {
        return Err(Error::Argument("blur synthesis needs at least one frame".into()));
    }
    if sharp_window.len() != n_accumulate {
        return Err(Error::Argument(format!(
            "window holds {} frames but n_accumulate is {n_accumulate}",
            sharp_window.len()
        )));
    }
    let first = &sharp_window[0];
    for f in sharp_window {
        first.ensure_same_dims(f, "blur window")?;
    }
    let mut acc = vec![0.0f64; first.data().len()];
    for f in sharp_window {
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += f64::from(v);
        }
    }
    let n = n_accumulate as f64;
    Frame::from_planar(first.width(), first.height(), acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// How content moves in a procedural toy sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum MotionSpec {
    /// Every frame identical.
    Static,
    /// The whole scene translates rigidly by `(dx, dy)` pixels per frame.
    Translate { dx: f64, dy: f64 },
    /// Slowly panning background with independently moving shapes
    /// (sub-pixel velocities, occlusions at object boundaries).
    Objects,
}

impl fmt::Display for MotionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MotionSpec::Static => write!(f, "static"),
            MotionSpec::Translate { dx, dy } => write!(f, "translate dx={dx} dy={dy}"),
            MotionSpec::Objects => write!(f, "objects"),
        }
    }
}

impl FromStr for MotionSpec {
    type Err = Error;

    /// Accepts `static`, `objects`, or `translate dx=<f> [dy=<f>]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        match words.next() {
            Some("static") => Ok(MotionSpec::Static),
            Some("objects") => Ok(MotionSpec::Objects),
            Some("translate") => {
                let (mut dx, mut dy) = (0.0, 0.0);
                for w in words {
                    let (k, v) = w
                        .split_once('=')
                        .ok_or_else(|| Error::Argument(format!("bad motion parameter `{w}`")))?;
                    let v: f64 = v.parse().map_err(|_| Error::Argument(format!("bad number in `{w}`")))?;
                    match k {
                        "dx" => dx = v,
                        "dy" => dy = v,
                        _ => return Err(Error::Argument(format!("unknown motion parameter `{k}`"))),
                    }
                }
                Ok(MotionSpec::Translate { dx, dy })
            }
            _ => Err(Error::Argument(format!("unknown motion spec `{s}`"))),
        }
    }
}

/// Frame size plus motion model for [`make_toy_sequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub width: usize,
    pub height: usize,
    pub motion: MotionSpec,
}

impl ToySpec {
    pub fn new(width: usize, height: usize, motion: MotionSpec) -> Self {
        Self { width, height, motion }
    }
}

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    wave_amp: [f64; 3],
    wave_k: [[f64; 2]; 2],
    wave_phase: [[f64; 3]; 2],
    checker_amp: [f64; 3],
    checker_freq: [f64; 2],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut k = || {
            let period = rng.gen_range(5.0..14.0);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU / period;
            [w * angle.cos(), w * angle.sin()]
        };
        let wave_k = [k(), k()];
        Self {
            base: std::array::from_fn(|_| rng.gen_range(0.3..0.7)),
            wave_amp: std::array::from_fn(|_| rng.gen_range(0.05..0.15)),
            wave_k,
            wave_phase: std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU))),
            checker_amp: std::array::from_fn(|_| rng.gen_range(-0.15..0.15)),
            checker_freq: std::array::from_fn(|_| std::f64::consts::TAU / rng.gen_range(8.0..16.0)),
        }
    }

    fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        let checker = ((self.checker_freq[0] * u).sin() * (self.checker_freq[1] * v).sin()).signum();
        std::array::from_fn(|c| {
            let mut val = self.base[c] + self.checker_amp[c] * checker;
            for (k, ph) in self.wave_k.iter().zip(&self.wave_phase) {
                val += self.wave_amp[c] * (k[0] * u + k[1] * v + ph[c]).sin();
            }
            val.clamp(0.0, 1.0)
        })
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Disc { r: f64 },
    Rect { hw: f64, hh: f64 },
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Disc { r } => u * u + v * v <= r * r,
            Shape::Rect { hw, hh } => u.abs() <= hw && v.abs() <= hh,
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    shape: Option<Shape>,
    texture: Texture,
    origin: [f64; 2],
    velocity: [f64; 2],
}

/// Supersampling offsets within a pixel.
const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

struct Scene {
    layers: Vec<Layer>,
}

impl Scene {
    fn random(seed: u64, spec: &ToySpec) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (spec.width as f64, spec.height as f64);
        let background = Layer { shape: None, texture: Texture::random(&mut rng), origin: [0.0, 0.0], velocity: [0.0, 0.0] };
        let mut layers = vec![background];
        let n_objects = 2 + (spec.width.min(spec.height) >= 48) as usize;
        for _ in 0..n_objects {
            let size = rng.gen_range(0.15..0.28) * w.min(h);
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc { r: size }
            } else {
                Shape::Rect { hw: size, hh: size * rng.gen_range(0.6..1.0) }
            };
            let origin = [rng.gen_range(0.2..0.8) * w, rng.gen_range(0.2..0.8) * h];
            let speed = rng.gen_range(0.8..1.6);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            layers.push(Layer {
                shape: Some(shape),
                texture: Texture::random(&mut rng),
                origin,
                velocity: [speed * angle.cos(), speed * angle.sin()],
            });
        }
        let pan_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let pan = rng.gen_range(0.2..0.5);
        match spec.motion {
            MotionSpec::Static => layers.iter_mut().for_each(|l| l.velocity = [0.0, 0.0]),
            MotionSpec::Translate { dx, dy } => layers.iter_mut().for_each(|l| l.velocity = [dx, dy]),
            MotionSpec::Objects => layers[0].velocity = [pan * pan_angle.cos(), pan * pan_angle.sin()],
        }
        Scene { layers }
    }

    fn render(&self, k: usize, width: usize, height: usize) -> Frame {
        let kf = k as f64;
        let offsets: Vec<[f64; 2]> = self.layers.iter().map(|l| [kf * l.velocity[0], kf * l.velocity[1]]).collect();
        let mut frame = Frame::new(width, height);
        let norm = (SUBSAMPLES.len() * SUBSAMPLES.len()) as f64;
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0.0f64; 3];
                for sy in SUBSAMPLES {
                    for sx in SUBSAMPLES {
                        let mut color = [0.0; 3];
                        for (layer, off) in self.layers.iter().zip(&offsets) {
                            // Integer offsets keep these sample points exact,
                            // so integer translations shift pixels exactly.
                            let u = (x as f64 - off[0]) + sx;
                            let v = (y as f64 - off[1]) + sy;
                            match &layer.shape {
                                None => color = layer.texture.eval(u, v),
                                Some(shape) => {
                                    let (lu, lv) = (u - layer.origin[0], v - layer.origin[1]);
                                    if shape.contains(lu, lv) {
                                        color = layer.texture.eval(lu, lv);
                                    }
                                }
                            }
                        }
                        for c in 0..3 {
                            acc[c] += color[c];
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    frame.set(c, x, y, (a / norm) as f32);
                }
            }
        }
        frame
    }
}

/// Renders a deterministic procedural sequence of textured moving shapes.
pub fn make_toy_sequence(seed: u64, length: usize, spec: &ToySpec) -> Result<SharpSequence> {
    if length < 3 {
        return Err(Error::Argument(format!("toy sequences need length >= 3, got {length}")));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Argument("toy frame size must be positive".into()));
    }
    let scene = Scene::random(seed, spec);
    let frames = (0..length).map(|k| scene.render(k, spec.width, spec.height)).collect();
    SharpSequence::new(frames, 240)
}

/// Blurry/sharp pairs from a toy scene: each blurry frame averages
/// `n_accumulate` consecutive sharp frames and is paired with the middle one.
pub fn make_toy_clip(seed: u64, length: usize, spec: &ToySpec, n_accumulate: usize) -> Result<TrainingSequence> {
    if n_accumulate == 0 {
        return Err(Error::Argument("n_accumulate must be at least 1".into()));
    }
    let sharp = make_toy_sequence(seed, length + n_accumulate - 1, spec)?;
    let pairs = (0..length)
        .map(|k| {
            let window = &sharp.frames[k..k + n_accumulate];
            let blurry = synthesize_blur(window, n_accumulate)?;
            BlurSharpPair::new(blurry, window[n_accumulate / 2].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingSequence::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_of_identical_frames_is_identity() {
        let f = Frame::from_fn(6, 5, |c, x, y| ((c + x * y) % 7) as f32 / 7.0);
        let out = synthesize_blur(&vec![f.clone(); 4], 4).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-6);
    }

    #[test]
    fn blur_of_black_and_white_is_half() {
        let out = synthesize_blur(&[Frame::filled(4, 4, 0.0), Frame::filled(4, 4, 1.0)], 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn blur_argument_errors() {
        assert!(matches!(synthesize_blur(&[], 0), Err(Error::Argument(_))));
        assert!(matches!(synthesize_blur(&[Frame::new(2, 2)], 2), Err(Error::Argument(_))));
        assert!(matches!(synthesize_blur(&[Frame::new(2, 2), Frame::new(3, 2)], 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn translating_square_matches_brute_force_mean() {
        // Textured square moving one pixel per frame.
        let frames: Vec<Frame> = (0..7)
            .map(|k| {
                Frame::from_fn(24, 12, |c, x, y| {
                    let (x0, y0) = (4 + k, 3);
                    if (x0..x0 + 6).contains(&x) && (y0..y0 + 6).contains(&y) {
                        ((x - x0 + 2 * (y - y0) + c) % 5) as f32 / 4.0
                    } else {
                        0.1
                    }
                })
            })
            .collect();
        let out = synthesize_blur(&frames, 7).unwrap();
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..24 {
                    let mean: f64 = frames.iter().map(|f| f64::from(f.get(c, x, y))).sum::<f64>() / 7.0;
                    assert!((f64::from(out.get(c, x, y)) - mean).abs() <= 1e-6);
                }
            }
        }
        // Streak: a pixel the square passes over only part of the time is mixed.
        let v = out.get(0, 12, 5);
        assert!(v > 0.1 - 1e-6 && v != 0.1);
    }

    #[test]
    fn toy_sequence_is_deterministic() {
        let spec = ToySpec::new(24, 16, "translate dx=1.5".parse().unwrap());
        let a = make_toy_sequence(0, 20, &spec).unwrap();
        let b = make_toy_sequence(0, 20, &spec).unwrap();
        assert_eq!(a, b);
        let c = make_toy_sequence(1, 20, &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn static_motion_gives_identical_frames() {
        let seq = make_toy_sequence(3, 5, &ToySpec::new(16, 16, MotionSpec::Static)).unwrap();
        assert!(seq.frames.iter().all(|f| f == &seq.frames[0]));
    }

    #[test]
    fn integer_translation_shifts_interior_exactly() {
        let seq = make_toy_sequence(5, 6, &ToySpec::new(32, 20, "translate dx=2".parse().unwrap())).unwrap();
        let f0 = &seq.frames[0];
        for (k, fk) in seq.frames.iter().enumerate() {
            for c in 0..3 {
                for y in 0..20 {
                    for x in 2 * k..32 {
                        assert_eq!(fk.get(c, x, y), f0.get(c, x - 2 * k, y), "frame {k} at ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn toy_length_validated() {
        assert!(make_toy_sequence(0, 2, &ToySpec::new(8, 8, MotionSpec::Static)).is_err());
    }

    #[test]
    fn motion_spec_parsing() {
        assert_eq!("static".parse::<MotionSpec>().unwrap(), MotionSpec::Static);
        assert_eq!(
            "translate dx=2 dy=-0.5".parse::<MotionSpec>().unwrap(),
            MotionSpec::Translate { dx: 2.0, dy: -0.5 }
        );
        assert!("spin".parse::<MotionSpec>().is_err());
        assert!("translate dz=1".parse::<MotionSpec>().is_err());
        let m = MotionSpec::Translate { dx: 1.0, dy: 0.0 };
        assert_eq!(m.to_string().parse::<MotionSpec>().unwrap(), m);
    }

    #[test]
    fn toy_clip_pairs_blur_with_window_center() {
        let spec = ToySpec::new(16, 16, MotionSpec::Objects);
        let clip = make_toy_clip(2, 5, &spec, 3).unwrap();
        let sharp = make_toy_sequence(2, 7, &spec).unwrap();
        assert_eq!(clip.len(), 5);
        for (k, p) in clip.pairs().iter().enumerate() {
            assert_eq!(p.sharp, sharp.frames[k + 1]);
            assert_eq!(p.blurry, synthesize_blur(&sharp.frames[k..k + 3], 3).unwrap());
        }
    }
}
