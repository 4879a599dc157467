use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdeblur_core::flow_align::{
    align_triplet, backend_by_name, detect_occlusion, estimate_flow, revise_warped, warp_backward, FlowField,
    FlowSession, OcclusionMap, OcclusionParams, PyramidFlow, BUILTIN_BACKEND,
};
use vdeblur_core::video_data::{make_toy_sequence, MotionSpec, ToySpec};
use vdeblur_core::Frame;

fn textured(seed: u64, w: usize, h: usize) -> Frame {
    let spec = ToySpec::new(w, h, MotionSpec::Static);
    make_toy_sequence(seed, 3, &spec).unwrap().frames[0].clone()
}

fn translated(seed: u64, w: usize, h: usize, dx: f64, dy: f64) -> Vec<Frame> {
    make_toy_sequence(seed, 3, &ToySpec::new(w, h, MotionSpec::Translate { dx, dy })).unwrap().frames
}

fn session() -> FlowSession {
    FlowSession::new(backend_by_name(BUILTIN_BACKEND).unwrap())
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

#[test]
fn identical_frames_give_near_zero_flow() {
    let f = textured(3, 48, 40);
    let flow = estimate_flow(&f, &f, &mut PyramidFlow::default()).unwrap();
    let small = flow.dx().iter().zip(flow.dy()).filter(|(x, y)| x.hypot(**y) <= 0.5).count();
    assert!(small as f64 >= 0.99 * (48.0 * 40.0));
}

#[test]
fn known_shift_is_recovered() {
    let frames = translated(5, 64, 48, 3.0, 0.0);
    let flow = estimate_flow(&frames[0], &frames[1], &mut PyramidFlow::default()).unwrap();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for y in 8..40 {
        for x in 8..56 {
            let (dx, dy) = flow.at(x, y);
            xs.push(dx);
            ys.push(dy);
        }
    }
    let (mx, my) = (median(xs), median(ys));
    assert!((mx - 3.0).abs() <= 0.5 && my.abs() <= 0.5, "median flow ({mx}, {my})");
}

#[test]
fn constant_frames_do_not_error() {
    let f = Frame::filled(20, 16, 0.4);
    let flow = estimate_flow(&f, &f, &mut PyramidFlow::default()).unwrap();
    assert!(flow.dx().iter().all(|v| v.is_finite()));
}

#[test]
fn estimator_rejects_size_mismatch() {
    let r = estimate_flow(&Frame::new(8, 8), &Frame::new(9, 8), &mut PyramidFlow::default());
    assert!(matches!(r, Err(vdeblur_core::Error::Dimension(_))));
}

#[test]
fn unknown_backend_is_a_backend_error() {
    assert!(matches!(backend_by_name("spynet"), Err(vdeblur_core::Error::Backend { .. })));
}

#[test]
fn warp_is_linear_in_the_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w, h) = (17, 13);
    let f = textured(1, w, h);
    let g = textured(2, w, h);
    let dx = (0..w * h).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let dy = (0..w * h).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let flow = FlowField::from_components(w, h, dx, dy).unwrap();
    let (a, b) = (0.7f32, -1.3f32);
    let mix = Frame::from_fn(w, h, |c, x, y| a * f.get(c, x, y) + b * g.get(c, x, y));
    let lhs = warp_backward(&mix, &flow).unwrap();
    let wf = warp_backward(&f, &flow).unwrap();
    let wg = warp_backward(&g, &flow).unwrap();
    let rhs = Frame::from_fn(w, h, |c, x, y| a * wf.get(c, x, y) + b * wg.get(c, x, y));
    assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
}

#[test]
fn revise_selects_one_source_per_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (11, 7);
    let central = textured(5, w, h);
    let warped = textured(6, w, h);
    let mask: Vec<f32> = (0..w * h).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let occ = OcclusionMap::new(w, h, mask.clone()).unwrap();
    let out = revise_warped(&central, &warped, &occ).unwrap();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let expect = if mask[y * w + x] == 1.0 { warped.get(c, x, y) } else { central.get(c, x, y) };
                assert_eq!(out.get(c, x, y), expect);
            }
        }
    }
}

#[test]
fn occlusion_matches_direct_inequality_on_random_flows() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (w, h) = (16, 12);
    let rand_field = |rng: &mut ChaCha8Rng| {
        let dx: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dy: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        FlowField::from_components(w, h, dx, dy).unwrap()
    };
    let wf = rand_field(&mut rng);
    let wb = rand_field(&mut rng);
    let p = OcclusionParams::default();
    let occ = detect_occlusion(&wf, &wb, &p).unwrap();
    // Independent bilinear evaluation with explicit border clamping.
    let sample = |plane: &[f32], px: f64, py: f64| {
        let px = px.max(0.0).min((w - 1) as f64);
        let py = py.max(0.0).min((h - 1) as f64);
        let (x0, y0) = (px as usize, py as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (px - x0 as f64, py - y0 as f64);
        let v = |x: usize, y: usize| f64::from(plane[y * w + x]);
        v(x0, y0) * (1.0 - ax) * (1.0 - ay) + v(x1, y0) * ax * (1.0 - ay) + v(x0, y1) * (1.0 - ax) * ay + v(x1, y1) * ax * ay
    };
    let mut mismatches = 0;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = wf.at(x, y);
            let (fx, fy) = (f64::from(fx), f64::from(fy));
            let bx = sample(wb.dx(), x as f64 + fx, y as f64 + fy);
            let by = sample(wb.dy(), x as f64 + fx, y as f64 + fy);
            let lhs = ((fx + bx).powi(2) + (fy + by).powi(2)).sqrt();
            let rhs = 0.01 * (fx * fx + fy * fy + bx * bx + by * by) + 0.5;
            let expect = if lhs < rhs { 1.0 } else { 0.0 };
            mismatches += usize::from(occ.get(x, y) != expect);
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn static_triplet_revises_to_center() {
    let f = textured(8, 32, 24);
    let t = align_triplet(&f, &f, &f, &mut session(), &OcclusionParams::default()).unwrap();
    assert!(t.revised_forward.max_abs_diff(&f) <= 1e-5);
    assert!(t.revised_backward.max_abs_diff(&f) <= 1e-5);
}

#[test]
fn translated_triplet_aligns_to_center() {
    let frames = translated(13, 64, 48, 2.0, 1.0);
    let t = align_triplet(&frames[0], &frames[1], &frames[2], &mut session(), &OcclusionParams::default()).unwrap();
    let interior = |a: &Frame, b: &Frame| {
        let mut s = 0.0;
        let mut n = 0;
        for c in 0..3 {
            for y in 6..42 {
                for x in 6..58 {
                    s += f64::from((a.get(c, x, y) - b.get(c, x, y)).abs());
                    n += 1;
                }
            }
        }
        s / n as f64
    };
    let fwd = interior(&t.revised_forward, &frames[1]);
    let bwd = interior(&t.revised_backward, &frames[1]);
    assert!(fwd <= 0.02 && bwd <= 0.02, "mean abs diff {fwd} / {bwd}");
}

#[test]
fn object_leaving_the_frame_is_flagged() {
    // A textured square on a flat background exits across the right border
    // between the centre and the next frame.
    let (w, h) = (48, 32);
    let background = 0.3f32;
    let frame = |left: isize| {
        Frame::from_fn(w, h, |c, x, y| {
            let rel = x as isize - left;
            if (0..14).contains(&rel) && (9..23).contains(&y) {
                0.5 + 0.4 * (((rel as usize * 3 + y * 5 + c) % 7) as f32 / 6.0 - 0.5)
            } else {
                background
            }
        })
    };
    let (prev, center, next) = (frame(26), frame(34), frame(48));
    let t = align_triplet(&prev, &center, &next, &mut session(), &OcclusionParams::default()).unwrap();
    // Pixels of the object in the centre frame have no counterpart in `next`.
    let occluded = (9..23)
        .flat_map(|y| (34..w).map(move |x| (x, y)))
        .filter(|&(x, y)| t.occ_next.get(x, y) == 0.0)
        .count();
    assert!(occluded > 0, "no occluded pixels in the vacated region");
}

#[test]
fn replay_reproduces_recorded_flows() {
    let frames = translated(2, 32, 32, 1.0, 0.0);
    let mut s = session();
    s.start_recording();
    let a = align_triplet(&frames[0], &frames[1], &frames[2], &mut s, &OcclusionParams::default()).unwrap();
    let rec = s.take_recording();
    assert_eq!(rec.len(), 4);
    s.replay(rec);
    // Different content, same recorded alignment.
    let other = textured(99, 32, 32);
    let b = align_triplet(&other, &frames[1], &other, &mut s, &OcclusionParams::default()).unwrap();
    assert_eq!(a.flows, b.flows);
    assert!(align_triplet(&frames[0], &frames[1], &frames[2], &mut s, &OcclusionParams::default()).is_err());
}
