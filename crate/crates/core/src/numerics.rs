//! Dense parameter vectors and deterministic, path-keyed random streams.
//!
//! Every random draw in the crate comes from an [`RngStream`] keyed by the
//! run's master seed plus a short tag path such as `(purpose, round, device)`.
//! Streams never share state, so a parallel map over devices produces the same
//! bits as a sequential one.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A point in parameter space `R^p`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("parameter vectors need dimension >= 1".into()));
        }
        if let Some(bad) = entries.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("entry {bad} of parameter vector")));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Standard basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    fn check_dim(&self, other: &Self) {
        assert_eq!(
            self.dim(),
            other.dim(),
            "dimension mismatch: {} vs {}",
            self.dim(),
            other.dim()
        );
    }

    /// Euclidean inner product. Panics on a dimension mismatch, which is a
    /// configuration bug; use [`ParamVector::checked_dot`] at trust boundaries.
    pub fn dot(&self, other: &Self) -> f64 {
        self.check_dim(other);
        dot_slices(&self.0, &other.0)
    }

    pub fn checked_dot(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(dot_slices(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> f64 {
        dot_slices(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(&self, other: &Self) -> f64 {
        self.check_dim(other);
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Self) {
        self.check_dim(x);
        for (s, xi) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * xi;
        }
    }

    /// `self += alpha * x` for a raw slice (used for feature vectors).
    pub fn axpy_slice(&mut self, alpha: f64, x: &[f64]) {
        assert_eq!(self.dim(), x.len(), "dimension mismatch");
        for (s, xi) in self.0.iter_mut().zip(x) {
            *s += alpha * xi;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in &mut self.0 {
            *s *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|x| alpha * x).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        self.check_dim(other);
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_dim(other);
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// Unweighted mean of a non-empty collection, summed in iteration order.
    pub fn mean<'a, I>(vectors: I) -> Self
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter.next().expect("mean of an empty collection");
        let mut acc = first.clone();
        let mut count = 1usize;
        for v in iter {
            acc.axpy(1.0, v);
            count += 1;
        }
        acc.scale(1.0 / count as f64);
        acc
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tags naming what a stream is used for. They form the first element of a
/// stream path.
pub mod purpose {
    pub const DATA: u64 = 1;
    pub const DEVICES: u64 = 2;
    pub const MINIBATCH: u64 = 3;
    pub const T_STAR: u64 = 4;
    pub const LOCAL_SGD: u64 = 5;
    pub const PROBES: u64 = 6;
    pub const STABILITY: u64 = 7;
    pub const VERIFY: u64 = 8;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 keystream whose 256-bit key is a hash of `(master_seed, path)`.
///
/// ChaCha is counter based, so distinct keys give independent streams and the
/// n-th draw never depends on how other streams were consumed.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, path: &[u64]) -> Self {
        let mut h = splitmix64(master_seed ^ 0x5EED_0F_F00D);
        h = splitmix64(h ^ path.len() as u64);
        for (i, tag) in path.iter().enumerate() {
            h = splitmix64(h ^ splitmix64(tag.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN))));
        }
        let mut key = [0u8; 32];
        for (j, chunk) in key.chunks_exact_mut(8).enumerate() {
            let word = splitmix64(h.wrapping_add((j as u64 + 1).wrapping_mul(GOLDEN)));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            master_seed,
            path: path.to_vec(),
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// A child stream whose path extends this one's.
    pub fn child(&self, tags: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(tags);
        Self::new(self.master_seed, &path)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n` (Lemire's nearly-divisionless rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Convenience constructor mirroring the operation name used in configs.
pub fn derive_stream(seed: u64, tags: &[u64]) -> RngStream {
    RngStream::new(seed, tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    fn pv(x: &[f64]) -> ParamVector {
        ParamVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn dot_small_example() {
        assert_eq!(pv(&[1.0, 2.0]).dot(&pv(&[3.0, 4.0])), 11.0);
    }

    #[test]
    fn basis_vectors_are_orthonormal() {
        for i in 0..4 {
            for j in 0..4 {
                let d = ParamVector::basis(4, i).dot(&ParamVector::basis(4, j));
                assert_eq!(d, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn dot_rejects_mismatched_dims() {
        pv(&[1.0]).dot(&pv(&[1.0, 2.0]));
    }

    #[test]
    fn checked_dot_reports_mismatch() {
        assert!(matches!(
            pv(&[1.0]).checked_dot(&pv(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn constructor_rejects_non_finite() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
        assert!(ParamVector::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn self_dot_is_nonnegative(x in prop::collection::vec(-1e3f64..1e3, 1..16)) {
            let v = pv(&x);
            prop_assert!(v.dot(&v) >= 0.0);
            prop_assert!((v.norm_sq() - v.dot(&v)).abs() == 0.0);
        }

        #[test]
        fn mean_of_copies_is_identity(x in prop::collection::vec(-1e3f64..1e3, 1..8), k in 1usize..6) {
            let v = pv(&x);
            let copies = vec![v.clone(); k];
            let m = ParamVector::mean(&copies);
            prop_assert!(m.dist(&v) <= 1e-12 * (1.0 + v.norm()));
        }
    }

    #[test]
    fn same_path_same_draws() {
        let mut a = derive_stream(42, &[0, 3, 7]);
        let mut b = derive_stream(42, &[0, 3, 7]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn neighbouring_paths_never_share_prefixes() {
        // 10^4 sibling paths; no two share even the first 8 outputs.
        let mut seen = std::collections::HashSet::new();
        for last in 0..10_000u64 {
            let mut s = derive_stream(42, &[0, 3, last]);
            let prefix: Vec<u64> = (0..8).map(|_| s.next_u64()).collect();
            assert!(seen.insert(prefix), "collision at tag {last}");
        }
        let mut a = derive_stream(42, &[0, 3, 7]);
        let mut b = derive_stream(42, &[0, 3, 8]);
        let pa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let pb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(pa, pb);
    }

    #[test]
    fn child_matches_explicit_path() {
        let parent = derive_stream(9, &[purpose::DEVICES]);
        let mut c = parent.child(&[5]);
        let mut d = derive_stream(9, &[purpose::DEVICES, 5]);
        assert_eq!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn uniform_draws_pass_kolmogorov_smirnov() {
        let n = 100_000;
        let mut s = derive_stream(42, &[0, 3, 7]);
        let mut xs: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nf = n as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i as f64 + 1.0) / nf - x).max(x - i as f64 / nf))
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut s = derive_stream(1, &[2]);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[s.below(3)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }
}
