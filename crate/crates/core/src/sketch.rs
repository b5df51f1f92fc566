//! Seeded Gaussian sketching.
//!
//! A sketch `R` is a `b × d` matrix with i.i.d. `N(0, 1/b)` entries, so that
//! `E[RᵀR] = I_d`. Row `r` is drawn from its own ChaCha stream keyed by
//! `(seed, r)`, which lets large sketches be applied row by row without
//! materializing them. Dense and streaming storage produce bit-identical
//! entries.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeding::{self, Purpose};

/// Largest `b·d` that [`sample_sketch`] will materialize.
pub const DENSE_ENTRY_LIMIT: usize = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchSpec {
    pub seed: u64,
    /// Sketch (output) dimension.
    pub b: usize,
    /// Ambient (input) dimension.
    pub d: usize,
}

impl SketchSpec {
    pub fn new(seed: u64, b: usize, d: usize) -> Result<Self> {
        if b == 0 || d == 0 {
            return Err(Error::Config(format!(
                "sketch dimensions must be positive (b = {b}, d = {d})"
            )));
        }
        Ok(Self { seed, b, d })
    }

    /// The matrix shared by all clients in `round`.
    pub fn for_round(master_seed: u64, round: u64, b: usize, d: usize) -> Result<Self> {
        Self::new(
            seeding::derive_seed(&[Purpose::Sketch as u64, master_seed, round]),
            b,
            d,
        )
    }

    /// Writes row `row` of the matrix into `out` (length `d`).
    pub fn fill_row(&self, row: usize, out: &mut [f64]) {
        debug_assert!(row < self.b);
        debug_assert_eq!(out.len(), self.d);
        let scale = 1.0 / (self.b as f64).sqrt();
        let mut rng = seeding::stream(self.seed, row as u64);
        for x in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = z * scale;
        }
    }

    pub fn entries(&self) -> usize {
        self.b.saturating_mul(self.d)
    }
}

#[derive(Debug, Clone)]
enum Storage {
    /// Row-major `b × d`.
    Dense(Vec<f64>),
    Streaming,
}

/// An immutable Gaussian sketching matrix.
#[derive(Debug, Clone)]
pub struct SketchMatrix {
    spec: SketchSpec,
    storage: Storage,
}

/// Materializes the matrix described by `spec`.
///
/// Fails with [`Error::Resource`] above [`DENSE_ENTRY_LIMIT`] entries or when
/// the allocation cannot be satisfied; use [`SketchMatrix::streaming`] then.
pub fn sample_sketch(spec: SketchSpec) -> Result<SketchMatrix> {
    let n = spec.entries();
    if n > DENSE_ENTRY_LIMIT {
        return Err(Error::Resource(format!(
            "dense sketch of {} x {} exceeds {DENSE_ENTRY_LIMIT} entries; use streaming rows",
            spec.b, spec.d
        )));
    }
    let mut data = Vec::new();
    data.try_reserve_exact(n)
        .map_err(|e| Error::Resource(format!("cannot allocate {n} sketch entries: {e}")))?;
    data.resize(n, 0.0);
    for (r, row) in data.chunks_exact_mut(spec.d).enumerate() {
        spec.fill_row(r, row);
    }
    Ok(SketchMatrix {
        spec,
        storage: Storage::Dense(data),
    })
}

impl SketchMatrix {
    /// Row-streaming matrix: rows are regenerated on every application.
    pub fn streaming(spec: SketchSpec) -> Self {
        Self {
            spec,
            storage: Storage::Streaming,
        }
    }

    /// Dense when it fits under [`DENSE_ENTRY_LIMIT`], streaming otherwise.
    pub fn auto(spec: SketchSpec) -> Self {
        sample_sketch(spec).unwrap_or_else(|_| Self::streaming(spec))
    }

    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    fn for_each_row(&self, mut f: impl FnMut(usize, &[f64])) {
        match &self.storage {
            Storage::Dense(data) => {
                for (r, row) in data.chunks_exact(self.spec.d).enumerate() {
                    f(r, row);
                }
            }
            Storage::Streaming => {
                let mut buf = vec![0.0; self.spec.d];
                for r in 0..self.spec.b {
                    self.spec.fill_row(r, &mut buf);
                    f(r, &buf);
                }
            }
        }
    }

    /// Row `r` as an owned vector.
    pub fn row(&self, r: usize) -> Vec<f64> {
        match &self.storage {
            Storage::Dense(data) => data[r * self.spec.d..(r + 1) * self.spec.d].to_vec(),
            Storage::Streaming => {
                let mut buf = vec![0.0; self.spec.d];
                self.spec.fill_row(r, &mut buf);
                buf
            }
        }
    }

    /// `R·x`.
    pub fn sketch(&self, x: &[f64]) -> Result<Vec<f64>> {
        linalg::check_len(x, self.spec.d)?;
        let mut y = vec![0.0; self.spec.b];
        self.for_each_row(|r, row| y[r] = linalg::dot(row, x));
        Ok(y)
    }

    /// `Rᵀ·y`.
    pub fn desketch(&self, y: &[f64]) -> Result<Vec<f64>> {
        linalg::check_len(y, self.spec.b)?;
        let mut x = vec![0.0; self.spec.d];
        self.for_each_row(|r, row| linalg::axpy(y[r], row, &mut x));
        Ok(x)
    }
}

/// The per-round compression operator: a Gaussian sketch, or the identity
/// (which makes Fed-SGM coincide with unsketched FedAvg).
#[derive(Debug, Clone)]
pub enum Compressor {
    Gaussian(SketchMatrix),
    Identity { d: usize },
}

impl Compressor {
    pub fn input_dim(&self) -> usize {
        match self {
            Compressor::Gaussian(m) => m.spec.d,
            Compressor::Identity { d } => *d,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Compressor::Gaussian(m) => m.spec.b,
            Compressor::Identity { d } => *d,
        }
    }

    pub fn compress(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Compressor::Gaussian(m) => m.sketch(x),
            Compressor::Identity { d } => identity_compressor(x, *d),
        }
    }

    pub fn decompress(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Compressor::Gaussian(m) => m.desketch(y),
            Compressor::Identity { d } => identity_compressor(y, *d),
        }
    }

    /// Payload size relative to the ambient dimension.
    pub fn compression_ratio(&self) -> f64 {
        self.output_dim() as f64 / self.input_dim() as f64
    }
}

/// Returns `x` unchanged after checking its length.
pub fn identity_compressor(x: &[f64], d: usize) -> Result<Vec<f64>> {
    linalg::check_len(x, d)?;
    Ok(x.to_vec())
}

/// Width of the high-probability window for `⟨g, RᵀRh⟩ − ⟨g, h⟩`, in units of
/// `‖g‖‖h‖`: `log^{1.5}(d/δ) / √b`.
pub fn inner_product_deviation_bound(d: usize, b: usize, delta: f64) -> f64 {
    (d as f64 / delta).ln().powf(1.5) / (b as f64).sqrt()
}
