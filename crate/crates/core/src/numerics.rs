//! Dense double-precision kernels and seeded random streams.
//!
//! Only the shapes the policy model needs live here: column vectors as
//! `&[f64]` and a row-major [`Mat`]. Every public operation validates its
//! dimensions and reports a mismatch as an error instead of broadcasting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::mismatch("Mat::from_vec", rows * cols, data.len()));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_in(-scale, scale))
            .collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Copy of column `c`.
    pub fn col(&self, c: usize) -> Result<Vec<f64>> {
        if c >= self.cols {
            return Err(Error::invalid(format!(
                "column {c} out of range for {}x{} matrix",
                self.rows, self.cols
            )));
        }
        Ok((0..self.rows).map(|r| self.data[r * self.cols + c]).collect())
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::mismatch("Mat::matvec", self.cols, x.len()));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot_unchecked(row, x))
            .collect())
    }

    /// `selfᵀ · x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::mismatch("Mat::matvec_t", self.rows, x.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * xr;
            }
        }
        Ok(out)
    }

    /// `self += alpha · a bᵀ`.
    pub fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(Error::mismatch(
                "Mat::add_outer",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", a.len(), b.len()),
            ));
        }
        for (r, &ar) in a.iter().enumerate() {
            let scale = alpha * ar;
            if scale == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += scale * bc;
            }
        }
        Ok(())
    }

    /// Adds `alpha · x` into column `c`.
    pub fn add_to_col(&mut self, c: usize, alpha: f64, x: &[f64]) -> Result<()> {
        if c >= self.cols {
            return Err(Error::invalid(format!("column {c} out of range")));
        }
        if x.len() != self.rows {
            return Err(Error::mismatch("Mat::add_to_col", self.rows, x.len()));
        }
        for (r, &v) in x.iter().enumerate() {
            self.data[r * self.cols + c] += alpha * v;
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                "Mat::axpy",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch("dot", a.len(), b.len()));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(logits: &[f64], op: &str) -> Result<()> {
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure {
            tensor: "logits".into(),
            detail: format!("{op}: non-finite logit {} at index {i}", logits[i]),
        });
    }
    Ok(())
}

/// Overflow-safe `log Σ exp(logits_i)`.
pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty vector"));
    }
    check_finite(logits, "log_sum_exp")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Temperature softmax, `exp(l_i / T) / Σ_j exp(l_j / T)`, computed after
/// subtracting the maximum logit.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    check_finite(logits, "softmax")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Draws index `i` with probability `probs[i]` by inverting the CDF with a
/// single uniform draw.
pub fn sample_categorical(probs: &[f64], rng: &mut RngStream) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::invalid("sample_categorical: empty distribution"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(
            "sample_categorical: entries must be finite and non-negative",
        ));
    }
    let total: f64 = probs.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("sample_categorical: all-zero distribution"));
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "sample_categorical: probabilities sum to {total}, expected 1"
        )));
    }
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return Ok(i);
            }
        }
    }
    // u landed in the rounding gap above the final cumulative sum.
    Ok(last_positive)
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(SPLITMIX_GAMMA);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a, used to turn stream names into stream ids.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto ChaCha's native stream
/// counter, so draw sequences are identical across runs and platforms.
/// A stream is owned by exactly one worker; split it instead of sharing it.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    /// Stream keyed by a human-readable name, e.g. `"init"` or `"worker-3"`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::new(seed, fnv1a(name))
    }

    /// Independent child stream; the parent's position is unaffected.
    pub fn split(&self, child: u64) -> Self {
        Self::new(self.seed, splitmix64(self.stream_id ^ splitmix64(child)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `k` distinct indices from `pool`, uniformly without replacement.
    pub fn choose_distinct(&mut self, pool: &[usize], k: usize) -> Result<Vec<usize>> {
        if k > pool.len() {
            return Err(Error::invalid(format!(
                "cannot choose {k} distinct items from {}",
                pool.len()
            )));
        }
        let mut items = pool.to_vec();
        for i in 0..k {
            let j = i + self.below(items.len() - i);
            items.swap(i, j);
        }
        items.truncate(k);
        Ok(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[5.0, 0.0], 1000.0).unwrap();
        let expected = 1.0 / (1.0 + (-0.005f64).exp());
        assert!((p[0] - expected).abs() < 1e-15 && (p[1] - (1.0 - expected)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            softmax(&[f64::NAN, 0.0], 1.0),
            Err(Error::NumericalFailure { .. })
        ));
        assert!(softmax(&[f64::INFINITY], 1.0).is_err());
        assert!(softmax(&[0.0], 0.0).is_err());
        assert!(softmax(&[0.0], -1.0).is_err());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        let v = log_sum_exp(&[3.0, 3.0]).unwrap();
        assert!((v - 3.693_147_180_559_945).abs() < 1e-12);
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn categorical_degenerate_and_errors() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[1.0, 0.0], &mut rng).unwrap(), 0);
        }
        assert!(sample_categorical(&[0.0, 0.0], &mut rng).is_err());
        assert!(sample_categorical(&[0.5, 0.2], &mut rng).is_err());
    }

    #[test]
    fn categorical_frequency_within_binomial_band() {
        let n = 100_000;
        let mut rng = RngStream::new(7, 3);
        let zeros = (0..n)
            .filter(|_| sample_categorical(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        let sigma = (0.25f64 / n as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn categorical_is_deterministic() {
        let draw = || {
            let mut rng = RngStream::new(42, 0);
            (0..5)
                .map(|_| sample_categorical(&[0.3, 0.7], &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn streams_differ_and_replay() {
        let a: Vec<f64> = {
            let mut r = RngStream::new(5, 0);
            (0..8).map(|_| r.uniform()).collect()
        };
        let b: Vec<f64> = {
            let mut r = RngStream::new(5, 1);
            (0..8).map(|_| r.uniform()).collect()
        };
        let a2: Vec<f64> = {
            let mut r = RngStream::new(5, 0);
            (0..8).map(|_| r.uniform()).collect()
        };
        assert_ne!(a, b);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            a2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let parent = RngStream::named(5, "init");
        assert_ne!(parent.split(0).stream_id(), parent.split(1).stream_id());
    }

    #[test]
    fn mat_ops_validate_dimensions() {
        let m = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, 1.0]).unwrap(), vec![4.0, 10.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.col(1).unwrap(), vec![2.0, 5.0]);
        assert!(m.matvec(&[1.0, 2.0]).is_err());
        assert!(m.matvec_t(&[1.0]).is_err());
        assert!(m.col(3).is_err());
        let mut acc = Mat::zeros(2, 3);
        acc.add_outer(2.0, &[1.0, -1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(acc.as_slice(), &[2.0, 4.0, 6.0, -2.0, -4.0, -6.0]);
        assert!(acc.add_outer(1.0, &[1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(acc.axpy(1.0, &Mat::zeros(3, 2)).is_err());
        assert!(Mat::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn choose_distinct_is_a_subset() {
        let mut rng = RngStream::new(3, 3);
        let pool: Vec<usize> = (0..10).collect();
        let picked = rng.choose_distinct(&pool, 4).unwrap();
        let mut dedup = picked.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 4);
        assert!(rng.choose_distinct(&pool, 11).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_positive_and_normalized(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..20),
            t in 0.2f64..20.0,
        ) {
            // Spreads up to 500 nats keep every exp(·) above f64 underflow.
            let p = softmax(&logits, t).unwrap();
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_is_shift_invariant(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..12),
            shift in -100.0f64..100.0,
            t in 0.1f64..10.0,
        ) {
            let p = softmax(&logits, t).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted, t).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_grows_with_temperature(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..12),
        ) {
            let temps = [0.1, 0.5, 1.0, 2.0, 10.0];
            let h: Vec<f64> = temps
                .iter()
                .map(|&t| entropy(&softmax(&logits, t).unwrap()))
                .collect();
            for w in h.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12, "{:?}", h);
            }
        }
    }
}
