//! Small deterministic numeric kernels.
//!
//! Vectors are plain `[f64]` slices. [`Matrix`] is a dense row-major
//! buffer. All reductions run left to right so results are reproducible
//! bit for bit.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix"));
        }
        if data.len() != rows * cols {
            return Err(Error::Dim {
                op: "Matrix::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dim {
                    op: "Matrix::from_rows",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = gaussian(rng, rows * cols).into_iter().map(|z| z * std).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    /// `self += a ⊗ b` (outer product accumulation).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += ai * bj;
            }
        }
    }

    /// Accumulates `selfᵀ · v` into `out`.
    pub fn add_tmatvec(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += m * vi;
            }
        }
    }
}

/// `m · v`, summed left to right within each row.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(Error::Dim {
            op: "matvec",
            expected: m.cols,
            got: v.len(),
        });
    }
    Ok((0..m.rows)
        .map(|i| {
            m.row(i)
                .iter()
                .zip(v)
                .fold(0.0, |acc, (a, b)| acc + a * b)
        })
        .collect())
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Vector-Jacobian product of softmax: given `s = softmax(z)` and `ds`,
/// returns `dz = s ⊙ (ds − ⟨ds, s⟩)`.
pub fn softmax_backward(s: &[f64], ds: &[f64]) -> Vec<f64> {
    let dot: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
    s.iter().zip(ds).map(|(si, di)| si * (di - dot)).collect()
}

/// Indices of the `k` largest entries in descending value order. Ties go to
/// the lower index.
pub fn topk(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::KOutOfRange { k, max: v.len() });
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx.truncate(k);
    Ok(idx)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some(b) if v[b] >= x => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Seeded generator: ChaCha8 keyed by `rand_core`'s `seed_from_u64`
/// expansion of the 64-bit seed, with independent streams selected through
/// the ChaCha stream id.
///
/// Uniforms take the top 53 bits of `next_u64`. Normals use the Box–Muller
/// transform on `(u1, u2)` with `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`:
/// `z0 = √(−2 ln u1)·cos(2πu2)`, `z1 = √(−2 ln u1)·sin(2πu2)`; `z0` is
/// returned first and `z1` is kept for the next call.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent generator for `stream`, derived only from the seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `k` distinct values from `0..n`, in draw order (partial Fisher–Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// `n` standard normal draws.
pub fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}
