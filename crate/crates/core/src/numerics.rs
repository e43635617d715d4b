//! Dense tensors, the handful of differentiable primitives the models need,
//! a counter-based RNG, and a central-difference gradient checker.
//!
//! Everything is `f64` and row-major. The slice kernels at the bottom are the
//! hot paths used by the sequence models and fusion blocks; the `Tensor`
//! functions wrap them with shape checks.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rank-1/2/3 array of `f64` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be nonempty with positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn uniform(shape: &[usize], scale: f64, rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) * scale).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().unwrap();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        vec_mat_acc(&a.data[i * k..(i + 1) * k], &b.data, n, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

/// Layer normalization over the last axis followed by the affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().unwrap();
    if d == 0 || gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm over d={d} with gamma {:?} beta {:?}",
            gamma.shape, beta.shape
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let stats = layer_norm_slice(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = gamma.data[j] * (*v - stats.0) * stats.1 + beta.data[j];
        }
    }
    Ok(out)
}

/// Returns `(mean, 1/sqrt(var + eps))` of a row.
pub(crate) fn layer_norm_slice(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = if var + eps > 0.0 {
        1.0 / (var + eps).sqrt()
    } else {
        0.0
    };
    (mean, inv)
}

/// Same-size 3×3 cross-correlation with zero padding and stride 1.
///
/// Accepts `x` as `[h×w]` or `[1×h×w]`; the output has the input's shape.
pub fn conv2d_3x3(x: &Tensor, kernel: &Tensor, bias: f64) -> Result<Tensor> {
    let (h, w) = match x.shape.as_slice() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("conv2d_3x3 input {s:?}"))),
    };
    if kernel.len() != 9 {
        return Err(Error::Dimension(format!("kernel {:?} is not 3x3", kernel.shape)));
    }
    let mut out = vec![0.0; h * w];
    conv3x3(&x.data, h, w, &kernel.data, bias, &mut out);
    Tensor::new(x.shape.clone(), out)
}

/// Row-wise softmax of a rank-2 tensor (max-subtracted).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("softmax_rows on {:?}", x.shape)));
    }
    let n = x.shape[1];
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Central-difference gradient `(f(x+h e_i) - f(x-h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is non-finite around coordinate {i}"
            )));
        }
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// A fixed, ordered collection of parameter tensors.
///
/// Gradients are represented by a value of the same type, so optimizer state
/// and finite-difference probes can walk both in lockstep.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(1.0, b);
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    fn sum_sq(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Order-sensitive FNV-1a over the raw bits, used to detect stale caches.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Counter-based random stream keyed by `(master_seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector and block counter make
/// draws independent of scheduling and identical on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.rng.next_u64() % span) as i64
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.rng.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Mixes a purpose tag and indices into a stream id (splitmix64 finalizer).
pub fn stream_id(tag: u64, parts: &[u64]) -> u64 {
    let mut z = tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &p in parts {
        z ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

// ---------------------------------------------------------------------------
// slice kernels

/// `out += x · W` where `W` is `[x.len() × n]` row-major.
#[inline]
pub(crate) fn vec_mat_acc(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), x.len() * n);
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// `out += W · y` where `W` is `[out.len() × y.len()]` row-major.
#[inline]
pub(crate) fn mat_vec_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let n = y.len();
    debug_assert_eq!(w.len(), out.len() * n);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        let mut s = 0.0;
        for (wv, yv) in row.iter().zip(y) {
            s += wv * yv;
        }
        *o += s;
    }
}

/// `G += x ⊗ y` where `G` is `[x.len() × y.len()]`.
#[inline]
pub(crate) fn outer_acc(x: &[f64], y: &[f64], g: &mut [f64]) {
    let n = y.len();
    for (xi, row) in x.iter().zip(g.chunks_exact_mut(n)) {
        if *xi == 0.0 {
            continue;
        }
        for (gv, yv) in row.iter_mut().zip(y) {
            *gv += xi * yv;
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax, returning `(log_probs, probs)`.
pub(crate) fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
    let p = logp.iter().map(|v| v.exp()).collect();
    (logp, p)
}

pub(crate) fn conv3x3(x: &[f64], h: usize, w: usize, k: &[f64], bias: f64, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let mut s = bias;
            for di in 0..3 {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..3 {
                    let jj = j as isize + dj as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    s += k[di * 3 + dj] * x[ii as usize * w + jj as usize];
                }
            }
            out[i * w + j] = s;
        }
    }
}

/// Backward of [`conv3x3`]: accumulates into `gx`, `gk`, and returns the bias gradient.
pub(crate) fn conv3x3_backward(
    x: &[f64],
    h: usize,
    w: usize,
    k: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    gk: &mut [f64],
) -> f64 {
    let mut gb = 0.0;
    for i in 0..h {
        for j in 0..w {
            let g = gy[i * w + j];
            gb += g;
            if g == 0.0 {
                continue;
            }
            for di in 0..3 {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..3 {
                    let jj = j as isize + dj as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let idx = ii as usize * w + jj as usize;
                    gk[di * 3 + dj] += g * x[idx];
                    gx[idx] += g * k[di * 3 + dj];
                }
            }
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = Tensor::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 1]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(vec![1.0, 3.0]);
        assert_eq!(layer_norm(&x, &ones, &zeros, 0.0).unwrap().data(), &[-1.0, 1.0]);

        let c = Tensor::filled(&[4], 2.5);
        let out = layer_norm(&c, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));

        let x = Tensor::from_vec(vec![0.3, -2.0, 7.0]);
        let out = layer_norm(&x, &Tensor::zeros(&[3]), &Tensor::filled(&[3], 4.0), 1e-5).unwrap();
        assert!(out.data().iter().all(|v| *v == 4.0));
    }

    #[test]
    fn layer_norm_rejects_width_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(layer_norm(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[3]), 1e-5).is_err());
    }

    #[test]
    fn conv_cases() {
        let mut rng = RngStream::new(1, 0);
        let x = Tensor::uniform(&[1, 5, 4], 1.0, &mut rng);
        let mut dirac = Tensor::zeros(&[3, 3]);
        dirac.data_mut()[4] = 1.0;
        assert_eq!(conv2d_3x3(&x, &dirac, 0.0).unwrap(), x);

        let ones = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[3, 3], 1.0);
        let y = conv2d_3x3(&ones, &k, 0.0).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[8], 4.0);

        let z = conv2d_3x3(&x, &Tensor::zeros(&[3, 3]), 1.5).unwrap();
        assert!(z.data().iter().all(|v| *v == 1.5));
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::from_rows(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.row(1)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.row(1)[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.row(2)[0] - 1.0).abs() < 1e-15 && s.row(2)[1] < 1e-300);
        assert!(s.is_finite());
    }

    #[test]
    fn finite_diff_simple() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let x = Tensor::from_vec(vec![0.1, -4.0, 2.0]);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let x = Tensor::from_vec(vec![0.0]);
        let r = finite_diff_grad(|t| 1.0 / t.data()[0].abs().min(0.0), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = RngStream::new(5, 1);
        let (h, w) = (4, 5);
        let x = Tensor::uniform(&[h * w], 1.0, &mut rng);
        let k = Tensor::uniform(&[9], 1.0, &mut rng);
        let gy = Tensor::uniform(&[h * w], 1.0, &mut rng);
        let obj = |x: &[f64], k: &[f64]| {
            let mut y = vec![0.0; h * w];
            conv3x3(x, h, w, k, 0.3, &mut y);
            y.iter().zip(gy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut gx = vec![0.0; h * w];
        let mut gk = vec![0.0; 9];
        let gb = conv3x3_backward(x.data(), h, w, k.data(), gy.data(), &mut gx, &mut gk);
        let ngx = finite_diff_grad(|t| obj(t.data(), k.data()), &x, 1e-5).unwrap();
        let ngk = finite_diff_grad(|t| obj(x.data(), t.data()), &k, 1e-5).unwrap();
        assert!(relative_error(&gx, ngx.data()) < 1e-8);
        assert!(relative_error(&gk, ngk.data()) < 1e-8);
        assert!((gb - gy.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, 7);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, 7);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(42, 8);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
                let x = Tensor::new(vec![3, 4], vals).unwrap();
                let s = softmax_rows(&x).unwrap();
                for i in 0..3 {
                    let sum: f64 = s.row(i).iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                    prop_assert!(s.row(i).iter().all(|v| *v >= 0.0));
                }
            }

            #[test]
            fn dirac_conv_is_identity(vals in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
                let n = vals.len();
                let x = Tensor::new(vec![1, 1, n], vals).unwrap();
                let mut dirac = Tensor::zeros(&[3, 3]);
                dirac.data_mut()[4] = 1.0;
                prop_assert_eq!(conv2d_3x3(&x, &dirac, 0.0).unwrap(), x);
            }
        }
    }
}
