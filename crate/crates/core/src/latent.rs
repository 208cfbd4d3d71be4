//! Latent code containers: `z` noise, single `w` codes, and per-layer W+
//! sequences.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

/// Seeded generator for an independent sub-stream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ(pub Array1<f64>);

impl LatentZ {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self(Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal)))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentW(pub Array1<f64>);

impl LatentW {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// One latent vector per synthesis layer (W+ space), stored as rows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct LatentSeq {
    codes: Array2<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for LatentSeq {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<LatentSeq> for Vec<Vec<f64>> {
    fn from(w: LatentSeq) -> Self {
        w.to_rows()
    }
}

impl LatentSeq {
    pub fn new(codes: Array2<f64>) -> Result<Self> {
        if codes.nrows() == 0 || codes.ncols() == 0 {
            return Err(invalid("latent sequence must be non-empty"));
        }
        if codes.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent sequence entry".into()));
        }
        Ok(Self { codes })
    }

    /// The same code repeated for every layer.
    pub fn broadcast(w: &LatentW, num_layers: usize) -> Self {
        let codes = w
            .0
            .view()
            .insert_axis(Axis(0))
            .broadcast((num_layers, w.dim()))
            .expect("broadcast of a row")
            .to_owned();
        Self { codes }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(invalid("latent rows have inconsistent lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let codes = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| invalid(e.to_string()))?;
        Self::new(codes)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.codes.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.codes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn codes(&self) -> &Array2<f64> {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut Array2<f64> {
        &mut self.codes
    }

    pub fn layer(&self, i: usize) -> ArrayView1<'_, f64> {
        self.codes.row(i)
    }

    pub fn check_shape(&self, num_layers: usize, dim: usize) -> Result<()> {
        if self.num_layers() != num_layers || self.dim() != dim {
            return Err(invalid(format!(
                "expected latent of shape {num_layers}x{dim}, got {}x{}",
                self.num_layers(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Rows at `indices`, in that order.
    pub fn select_layers(&self, indices: &[usize]) -> Array2<f64> {
        self.codes.select(Axis(0), indices)
    }
}
