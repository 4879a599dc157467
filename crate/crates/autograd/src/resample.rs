use crate::real::Real;

/// A fixed sparse linear map from one `h x w` plane to another, with four
/// weighted taps per output pixel.
///
/// Bilinear warps are expressed this way so that the tape can differentiate
/// through the sampled image while treating the sampling positions as
/// constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[u32; 4]>,
    weights: Vec<[f64; 4]>,
}

impl Resampler {
    /// `taps[p]` are flat indices into the input plane for output pixel `p`.
    pub fn new(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        taps: Vec<[u32; 4]>,
        weights: Vec<[f64; 4]>,
    ) -> Self {
        assert_eq!(taps.len(), out_h * out_w);
        assert_eq!(weights.len(), out_h * out_w);
        debug_assert!(taps.iter().flatten().all(|&t| (t as usize) < in_h * in_w));
        Self { in_h, in_w, out_h, out_w, taps, weights }
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn taps(&self, p: usize) -> ([u32; 4], [f64; 4]) {
        (self.taps[p], self.weights[p])
    }

    /// Applies the map to every plane of `src` (planes stored contiguously).
    pub fn apply<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let (ip, op) = (self.in_plane(), self.out_plane());
        debug_assert_eq!(src.len() / ip, dst.len() / op);
        for (s, d) in src.chunks_exact(ip).zip(dst.chunks_exact_mut(op)) {
            for (p, out) in d.iter_mut().enumerate() {
                let (t, w) = (&self.taps[p], &self.weights[p]);
                let mut acc = T::zero();
                for j in 0..4 {
                    acc = acc + T::from_f64(w[j]) * s[t[j] as usize];
                }
                *out = acc;
            }
        }
    }

    /// Accumulates the transpose map: `dsrc += M^T dout`.
    pub fn apply_adjoint<T: Real>(&self, dout: &[T], dsrc: &mut [T]) {
        let (ip, op) = (self.in_plane(), self.out_plane());
        for (d, s) in dout.chunks_exact(op).zip(dsrc.chunks_exact_mut(ip)) {
            for (p, &g) in d.iter().enumerate() {
                let (t, w) = (&self.taps[p], &self.weights[p]);
                for j in 0..4 {
                    let idx = t[j] as usize;
                    s[idx] = s[idx] + T::from_f64(w[j]) * g;
                }
            }
        }
    }
}
