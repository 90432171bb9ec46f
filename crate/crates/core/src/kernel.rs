//! Smoothing kernels, self-normalized kernel weights and kernel norm constants.
//!
//! All estimators in this crate smooth over the discrete time grid with
//! weights
//!
//! ```text
//! k_{t,i}(b) = K((t - i) / (T b)) / sum_{i'} K((t - i') / (T b))
//! ```
//!
//! where the sum runs over the usable indices `lo..=T` (1-based). Boundary
//! centres are handled purely by this normalization.
//!
//! [`Smoother`] computes the weighted sums for every centre in one pass.
//! Both kernels shipped here are even polynomials on their support, so the
//! sums are tracked through the centred moments `sum (i - t)^k Z_i`,
//! `k = 0, 1, 2`, which are updated in O(1) per centre and recomputed
//! exactly every [`REFRESH_PERIOD`] centres to bound rounding drift. Centres
//! where the moment combination cancels (data spanning many orders of
//! magnitude, e.g. `1/σ̂⁴` weights) fall back to direct evaluation.

use std::ops::RangeInclusive;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of nodes of the composite Simpson rule used for kernel constants.
pub const QUADRATURE_NODES: usize = 4097;

/// Centres between two exact recomputations of the sliding moments.
pub const REFRESH_PERIOD: usize = 64;

/// Kernel with support `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `0.75 (1 - x^2)` on `[-1, 1]`.
    #[default]
    Epanechnikov,
    /// `0.5` on `[-1, 1]`.
    Uniform,
}

/// Epanechnikov kernel `0.75 (1 - x^2)` for `|x| <= 1`, zero outside.
pub fn epanechnikov(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.75 * (1.0 - x * x)
    } else {
        0.0
    }
}

impl Kernel {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => epanechnikov(x),
            Kernel::Uniform => {
                if x.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }

    /// Coefficients `(c0, c2)` with `K(x) = c0 + c2 x^2` on the support.
    fn even_poly(self) -> (f64, f64) {
        match self {
            Kernel::Epanechnikov => (0.75, -0.75),
            Kernel::Uniform => (0.5, 0.0),
        }
    }

    /// `∫ K(x)^2 dx` over `[-1, 1]`.
    pub fn l2_norm_sq(self) -> f64 {
        static CACHE: [OnceLock<f64>; 2] = [OnceLock::new(), OnceLock::new()];
        *CACHE[self.slot()].get_or_init(|| {
            simpson(|x| self.eval(x).powi(2), -1.0, 1.0, QUADRATURE_NODES)
        })
    }

    /// `K*(x) = ∫_{-1}^{1-2|x|} K(v) K(v + 2|x|) dv`.
    pub fn k_star(self, x: f64) -> f64 {
        let shift = 2.0 * x.abs();
        let upper = 1.0 - shift;
        if upper <= -1.0 {
            return 0.0;
        }
        simpson(
            |v| self.eval(v) * self.eval(v + shift),
            -1.0,
            upper,
            QUADRATURE_NODES,
        )
    }

    /// `∫ K*(x)^2 dx` over `[-1, 1]`.
    pub fn k_star_l2_norm_sq(self) -> f64 {
        static CACHE: [OnceLock<f64>; 2] = [OnceLock::new(), OnceLock::new()];
        *CACHE[self.slot()].get_or_init(|| {
            // K* is even; integrate over [0, 1] where it is smooth.
            2.0 * simpson(|x| self.k_star(x).powi(2), 0.0, 1.0, QUADRATURE_NODES)
        })
    }

    fn slot(self) -> usize {
        match self {
            Kernel::Epanechnikov => 0,
            Kernel::Uniform => 1,
        }
    }
}

/// `∫K^2` for the Epanechnikov kernel.
pub fn k_l2_norm_sq() -> f64 {
    Kernel::Epanechnikov.l2_norm_sq()
}

/// `K*(x)` for the Epanechnikov kernel.
pub fn k_star(x: f64) -> f64 {
    Kernel::Epanechnikov.k_star(x)
}

/// `∫ K*(x)^2 dx` for the Epanechnikov kernel.
pub fn k_star_l2_norm_sq() -> f64 {
    Kernel::Epanechnikov.k_star_l2_norm_sq()
}

/// Composite Simpson rule with `nodes` (odd) equally spaced nodes.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, nodes: usize) -> f64 {
    let intervals = if nodes % 2 == 1 { nodes - 1 } else { nodes };
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for k in 1..intervals {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Normalized kernel weights around one centre, materialized over the
/// support window only.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub center: usize,
    pub bandwidth: f64,
    /// Index (1-based) of the first entry of `weights`.
    pub first: usize,
    pub weights: Vec<f64>,
}

impl KernelWeights {
    /// Weight attached to index `i`, zero outside the window.
    pub fn get(&self, i: usize) -> f64 {
        if i < self.first {
            return 0.0;
        }
        self.weights.get(i - self.first).copied().unwrap_or(0.0)
    }

    pub fn last(&self) -> usize {
        self.first + self.weights.len() - 1
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .map(move |(k, &w)| (self.first + k, w))
    }
}

/// Epanechnikov weights `k_{t,i}(b)` over `i = p+1..=T`.
pub fn normalized_weights(t: usize, b: f64, t_len: usize, p: usize) -> Result<KernelWeights> {
    if t < p + 1 || t > t_len {
        return Err(Error::IndexOutOfRange { t, p, t_len });
    }
    Smoother::new(Kernel::Epanechnikov, b, t_len, p + 1)?.weights(t)
}

/// Kernel smoother over the usable index range `lo..=T` for one bandwidth.
#[derive(Debug, Clone, Copy)]
pub struct Smoother {
    kernel: Kernel,
    bandwidth: f64,
    t_len: usize,
    lo: usize,
}

impl Smoother {
    pub fn new(kernel: Kernel, bandwidth: f64, t_len: usize, lo: usize) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if lo == 0 || lo > t_len {
            return Err(Error::InvalidInput(format!(
                "usable range {lo}..={t_len} is empty"
            )));
        }
        Ok(Self {
            kernel,
            bandwidth,
            t_len,
            lo,
        })
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    /// Half-width `T b` of the window in index units.
    pub fn half_width(&self) -> f64 {
        self.t_len as f64 * self.bandwidth
    }

    /// Inclusive window `[L, R]` of indices with `|t - i| <= T b`, clipped to
    /// `lo..=T`. Empty when `L > R`.
    pub fn window(&self, t: usize) -> (usize, usize) {
        let h = self.half_width();
        let tf = t as f64;
        let left = (tf - h).ceil().max(self.lo as f64) as usize;
        let right = (tf + h).floor().min(self.t_len as f64);
        let right = if right < 0.0 { 0 } else { right as usize };
        (left, right)
    }

    /// Unnormalized kernel value `K((t - i) / (T b))`.
    pub fn kernel_at(&self, t: usize, i: usize) -> f64 {
        let x = (t as f64 - i as f64) / self.half_width();
        self.kernel.eval(x)
    }

    /// Materialized normalized weights around `t` by direct evaluation.
    pub fn weights(&self, t: usize) -> Result<KernelWeights> {
        let (left, right) = self.window(t);
        let raw: Vec<f64> = if left <= right {
            (left..=right).map(|i| self.kernel_at(t, i)).collect()
        } else {
            Vec::new()
        };
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyWindow {
                t,
                bandwidth: self.bandwidth,
            });
        }
        Ok(KernelWeights {
            center: t,
            bandwidth: self.bandwidth,
            first: left,
            weights: raw.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Normalized smoothing of the rows of `data` (row `i - lo` holds the
    /// `d` values attached to index `i`) for every centre in `centers`.
    /// Output is row-major, one row of `d` values per centre.
    pub fn smooth(
        &self,
        data: &[f64],
        d: usize,
        centers: RangeInclusive<usize>,
    ) -> Result<Vec<f64>> {
        let (mut sums, norms) = self.kernel_sums(data, d, centers.clone())?;
        for (k, t) in centers.enumerate() {
            let norm = norms[k];
            if !(norm > 0.0) {
                return Err(Error::EmptyWindow {
                    t,
                    bandwidth: self.bandwidth,
                });
            }
            sums[k * d..(k + 1) * d].iter_mut().for_each(|v| *v /= norm);
        }
        Ok(sums)
    }

    /// Unnormalized sums `sum_i K((t-i)/(Tb)) Z_i` together with the kernel
    /// mass `sum_i K((t-i)/(Tb))` for every centre in `centers`.
    pub fn kernel_sums(
        &self,
        data: &[f64],
        d: usize,
        centers: RangeInclusive<usize>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = self.t_len + 1 - self.lo;
        if data.len() != rows * d {
            return Err(Error::InvalidInput(format!(
                "smoothing data has {} values, expected {} rows of width {}",
                data.len(),
                rows,
                d
            )));
        }
        let (c_lo, c_hi) = (*centers.start(), *centers.end());
        if c_lo == 0 || c_hi > self.t_len || c_lo > c_hi {
            return Err(Error::InvalidInput(format!(
                "centre range {c_lo}..={c_hi} outside 1..={}",
                self.t_len
            )));
        }
        let n_centers = c_hi - c_lo + 1;
        let mut sums = vec![0.0; n_centers * d];
        let mut norms = vec![0.0; n_centers];
        let mut moments = SlidingMoments::new(d);
        let h = self.half_width();
        let (c0, c2) = self.kernel.even_poly();
        let c2h = c2 / (h * h);

        let mut window: Option<(usize, usize)> = None;
        for (k, t) in (c_lo..=c_hi).enumerate() {
            let (left, right) = self.window(t);
            let refresh = k % REFRESH_PERIOD == 0;
            match window {
                Some((old_l, old_r)) if !refresh => {
                    moments.recenter();
                    // t moved by one: drop indices leaving on the left, add
                    // indices entering on the right.
                    for i in old_l..left.min(old_r + 1) {
                        moments.remove(i as f64 - t as f64, self.row(data, d, i));
                    }
                    let start = (old_r + 1).max(left);
                    for i in start..=right {
                        moments.add(i as f64 - t as f64, self.row(data, d, i));
                    }
                    if moments.cancelled() {
                        moments.clear();
                        for i in left..=right {
                            moments.add(i as f64 - t as f64, self.row(data, d, i));
                        }
                    }
                }
                _ => {
                    moments.clear();
                    if left <= right {
                        for i in left..=right {
                            moments.add(i as f64 - t as f64, self.row(data, d, i));
                        }
                    }
                }
            }
            window = Some((left, right));
            if left > right {
                moments.clear();
                continue;
            }
            norms[k] = c0 * moments.n0 + c2h * moments.n2;
            let out = &mut sums[k * d..(k + 1) * d];
            let mut cancelled = false;
            for j in 0..d {
                let (u, v) = (c0 * moments.a0[j], c2h * moments.a2[j]);
                out[j] = u + v;
                cancelled |= u.abs().max(v.abs()) > CANCELLATION_RATIO * out[j].abs();
            }
            if cancelled {
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in left..=right {
                    let w = self.kernel_at(t, i);
                    for (o, z) in out.iter_mut().zip(self.row(data, d, i)) {
                        *o += w * z;
                    }
                }
            }
        }
        Ok((sums, norms))
    }

    /// Direct O(window) evaluation of the normalized sums; reference path
    /// for [`Smoother::smooth`].
    pub fn smooth_direct(
        &self,
        data: &[f64],
        d: usize,
        centers: RangeInclusive<usize>,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(d * (centers.end() + 1 - centers.start()));
        for t in centers {
            let w = self.weights(t)?;
            let mut acc = vec![0.0; d];
            for (i, wi) in w.iter() {
                let row = self.row(data, d, i);
                acc.iter_mut().zip(row).for_each(|(a, z)| *a += wi * z);
            }
            out.extend(acc);
        }
        Ok(out)
    }

    #[inline]
    fn row<'a>(&self, data: &'a [f64], d: usize, i: usize) -> &'a [f64] {
        let r = i - self.lo;
        &data[r * d..(r + 1) * d]
    }
}

/// Centred moments `sum (i - t)^k Z_i` for `k = 0, 1, 2` of the current
/// window, plus the same moments of the constant 1.
struct SlidingMoments {
    a0: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    n0: f64,
    n1: f64,
    n2: f64,
    /// Largest `|z|` per column removed since the last clear.
    removed: Vec<f64>,
}

/// Removed magnitude, relative to the remaining sum, above which the window
/// is rebuilt from scratch to avoid cancellation.
const CANCELLATION_RATIO: f64 = 1e3;

impl SlidingMoments {
    fn new(d: usize) -> Self {
        Self {
            a0: vec![0.0; d],
            a1: vec![0.0; d],
            a2: vec![0.0; d],
            n0: 0.0,
            n1: 0.0,
            n2: 0.0,
            removed: vec![0.0; d],
        }
    }

    fn cancelled(&self) -> bool {
        self.removed
            .iter()
            .zip(&self.a0)
            .any(|(r, a)| *r > CANCELLATION_RATIO * a.abs())
    }

    fn clear(&mut self) {
        self.a0.iter_mut().for_each(|v| *v = 0.0);
        self.a1.iter_mut().for_each(|v| *v = 0.0);
        self.a2.iter_mut().for_each(|v| *v = 0.0);
        self.n0 = 0.0;
        self.n1 = 0.0;
        self.n2 = 0.0;
        self.removed.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Shift the centre from `t` to `t + 1` on an unchanged index set.
    fn recenter(&mut self) {
        for j in 0..self.a0.len() {
            self.a2[j] += self.a0[j] - 2.0 * self.a1[j];
            self.a1[j] -= self.a0[j];
        }
        self.n2 += self.n0 - 2.0 * self.n1;
        self.n1 -= self.n0;
    }

    #[inline]
    fn add(&mut self, offset: f64, row: &[f64]) {
        let o2 = offset * offset;
        for (j, &z) in row.iter().enumerate() {
            self.a0[j] += z;
            self.a1[j] += offset * z;
            self.a2[j] += o2 * z;
        }
        self.n0 += 1.0;
        self.n1 += offset;
        self.n2 += o2;
    }

    #[inline]
    fn remove(&mut self, offset: f64, row: &[f64]) {
        let o2 = offset * offset;
        for (j, &z) in row.iter().enumerate() {
            self.a0[j] -= z;
            self.a1[j] -= offset * z;
            self.a2[j] -= o2 * z;
            self.removed[j] = self.removed[j].max(z.abs());
        }
        self.n0 -= 1.0;
        self.n1 -= offset;
        self.n2 -= o2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epanechnikov_values() {
        assert_eq!(epanechnikov(0.0), 0.75);
        assert_eq!(epanechnikov(1.0), 0.0);
        assert_eq!(epanechnikov(-1.0), 0.0);
        assert_eq!(epanechnikov(0.5), 0.5625);
        assert_eq!(epanechnikov(1.5), 0.0);
    }

    #[test]
    fn l2_norms() {
        assert_relative_eq!(k_l2_norm_sq(), 0.6, epsilon = 1e-12);
        assert_relative_eq!(Kernel::Uniform.l2_norm_sq(), 0.5, epsilon = 1e-12);
        let coarse = simpson(|x| epanechnikov(x).powi(2), -1.0, 1.0, 10_001);
        let fine = simpson(|x| epanechnikov(x).powi(2), -1.0, 1.0, 1_000_001);
        assert!((coarse - fine).abs() < 1e-8);
    }

    #[test]
    fn k_star_values() {
        assert_relative_eq!(k_star(0.0), k_l2_norm_sq(), epsilon = 1e-8);
        assert_eq!(k_star(1.0), 0.0);
        assert_eq!(k_star(-1.0), 0.0);
        let mut prev = f64::INFINITY;
        for k in 0..=200 {
            let x = k as f64 / 200.0;
            let v = k_star(x);
            assert!(v >= 0.0);
            assert!(v <= prev + 1e-15);
            assert_eq!(v, k_star(-x));
            prev = v;
        }
    }

    #[test]
    fn k_star_norm_stable_under_node_doubling() {
        let coarse = 2.0 * simpson(|x| k_star(x).powi(2), 0.0, 1.0, 2049);
        let fine = k_star_l2_norm_sq();
        assert!((coarse - fine).abs() < 1e-6, "{coarse} vs {fine}");
        assert_eq!(k_star_l2_norm_sq(), fine);
    }

    #[test]
    fn weights_hand_rolled() {
        // T=10, p=0, b=0.3, t=5: K((5-i)/3) normalized
        let w = normalized_weights(5, 0.3, 10, 0).unwrap();
        let raw: Vec<(usize, f64)> = (1..=10)
            .map(|i| (i, epanechnikov((5.0 - i as f64) / 3.0)))
            .collect();
        let total: f64 = raw.iter().map(|(_, v)| v).sum();
        for (i, v) in raw {
            assert_relative_eq!(w.get(i), v / total, epsilon = 1e-15);
        }
    }

    #[test]
    fn weights_symmetric_and_normalized() {
        let w = normalized_weights(50, 0.1, 100, 2).unwrap();
        for j in 1..10 {
            assert_relative_eq!(w.get(50 - j), w.get(50 + j), epsilon = 1e-15);
        }
        let left = normalized_weights(3, 0.1, 100, 2).unwrap();
        assert_relative_eq!(left.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(left.first, 3);
        assert!(matches!(
            normalized_weights(2, 0.1, 100, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn weights_bounded_by_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t_len = rng.random_range(50..2000);
            let b: f64 = rng.random_range(0.01..1.0);
            if t_len as f64 * b < 10.0 {
                continue;
            }
            let t = rng.random_range(1..=t_len);
            let w = normalized_weights(t, b, t_len, 0).unwrap();
            let max = w.weights.iter().cloned().fold(0.0, f64::max);
            assert!(max * t_len as f64 * b <= 2.0);
        }
    }

    #[test]
    fn sliding_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kernel in [Kernel::Epanechnikov, Kernel::Uniform] {
            for &(t_len, b, lo) in &[(300usize, 0.05, 1usize), (80, 0.3, 3), (500, 1.5, 5), (40, 0.01, 2)] {
                let d = 3;
                let data: Vec<f64> = (0..(t_len + 1 - lo) * d)
                    .map(|_| rng.random_range(-1.0..4.0))
                    .collect();
                let s = Smoother::new(kernel, b, t_len, lo).unwrap();
                let fast = s.smooth(&data, d, lo..=t_len).unwrap();
                let slow = s.smooth_direct(&data, d, lo..=t_len).unwrap();
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn sliding_with_centres_before_range() {
        let data: Vec<f64> = (0..98).map(|i| (i as f64).sin() + 2.0).collect();
        let s = Smoother::new(Kernel::Epanechnikov, 0.1, 100, 3).unwrap();
        let fast = s.smooth(&data, 1, 1..=100).unwrap();
        let slow = s.smooth_direct(&data, 1, 1..=100).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn sliding_survives_huge_dynamic_range() {
        let mut data: Vec<f64> = (0..400).map(|i| 1.0 + 0.5 * (i as f64).cos()).collect();
        data[120] = 1e24;
        data[121] = 1e18;
        let s = Smoother::new(Kernel::Epanechnikov, 0.05, 400, 1).unwrap();
        let fast = s.smooth(&data, 1, 1..=400).unwrap();
        let slow = s.smooth_direct(&data, 1, 1..=400).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn empty_window_reported() {
        let s = Smoother::new(Kernel::Epanechnikov, 0.001, 100, 50).unwrap();
        assert!(matches!(s.weights(1), Err(Error::EmptyWindow { .. })));
    }
}
