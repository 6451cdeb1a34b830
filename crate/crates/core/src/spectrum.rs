use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex transmission sampled on a (frequency × bias) grid.
///
/// Storage is frequency-major: cell (fi, bi) lives at `fi * n_bias + bi`,
/// the same order used on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpectrum {
    /// Frequency axis (Hz), ascending.
    pub freqs: Vec<f64>,
    /// Bias field axis (V/m), ascending.
    pub biases: Vec<f64>,
    pub data: Vec<Complex64>,
}

impl BiasSpectrum {
    pub fn new(freqs: Vec<f64>, biases: Vec<f64>, data: Vec<Complex64>) -> Result<Self> {
        if freqs.len() * biases.len() != data.len() {
            return Err(Error::Dimension(format!(
                "grid {}x{} does not match {} cells",
                freqs.len(),
                biases.len(),
                data.len()
            )));
        }
        Ok(Self { freqs, biases, data })
    }

    /// Builds a spectrum from per-bias columns, each of length `freqs.len()`.
    pub fn from_columns(freqs: Vec<f64>, biases: Vec<f64>, columns: &[Vec<Complex64>]) -> Result<Self> {
        let (nf, nb) = (freqs.len(), biases.len());
        if columns.len() != nb || columns.iter().any(|c| c.len() != nf) {
            return Err(Error::Dimension("column shapes do not match axes".into()));
        }
        let mut data = vec![Complex64::new(0.0, 0.0); nf * nb];
        for (bi, col) in columns.iter().enumerate() {
            for (fi, v) in col.iter().enumerate() {
                data[fi * nb + bi] = *v;
            }
        }
        Ok(Self { freqs, biases, data })
    }

    pub fn n_freq(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_bias(&self) -> usize {
        self.biases.len()
    }

    pub fn get(&self, fi: usize, bi: usize) -> Complex64 {
        self.data[fi * self.n_bias() + bi]
    }

    /// Frequency trace at one bias index.
    pub fn column(&self, bi: usize) -> Vec<Complex64> {
        let nb = self.n_bias();
        (0..self.n_freq()).map(|fi| self.data[fi * nb + bi]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<Complex64>> {
        (0..self.n_bias()).map(|bi| self.column(bi)).collect()
    }
}
