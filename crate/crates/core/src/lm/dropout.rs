use ndarray::{Array2, ArrayView1};
use rand::Rng;

use super::LmConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSite {
    Embedding,
    GateInput(usize),
    Hidden(usize),
    Output,
}

/// One mask row per stream and site, shared by every time step of a window.
/// Kept entries are `1 / (1 - p)`, dropped entries zero; a site with rate 0
/// has no mask.
#[derive(Debug, Clone)]
pub struct DropoutMasks<T> {
    pub embedding: Option<Array2<T>>,
    pub gate_input: Vec<Option<Array2<T>>>,
    pub hidden: Vec<Option<Array2<T>>>,
    pub output: Option<Array2<T>>,
}

fn sample<T: Scalar, R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Result<Option<Array2<T>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(None);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Ok(Some(Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })))
}

impl<T: Scalar> DropoutMasks<T> {
    /// No dropout anywhere, as used for evaluation.
    pub fn identity(cfg: &LmConfig) -> Self {
        DropoutMasks {
            embedding: None,
            gate_input: vec![None; cfg.lstm_layers],
            hidden: vec![None; cfg.lstm_layers],
            output: None,
        }
    }

    pub fn sample<R: Rng>(cfg: &LmConfig, batch: usize, rng: &mut R) -> Result<Self> {
        let r = &cfg.dropout;
        let embedding = sample(batch, cfg.composed_dim(), r.embedding, rng)?;
        let mut gate_input = Vec::with_capacity(cfg.lstm_layers);
        let mut hidden = Vec::with_capacity(cfg.lstm_layers);
        for l in 0..cfg.lstm_layers {
            gate_input.push(sample(batch, cfg.lstm_input_dim(l), r.gate_input, rng)?);
            hidden.push(sample(batch, cfg.d_lm, r.hidden, rng)?);
        }
        let output = sample(batch, cfg.d_lm, r.output, rng)?;
        Ok(DropoutMasks {
            embedding,
            gate_input,
            hidden,
            output,
        })
    }

    pub fn get(&self, site: MaskSite) -> Option<&Array2<T>> {
        match site {
            MaskSite::Embedding => self.embedding.as_ref(),
            MaskSite::GateInput(l) => self.gate_input.get(l)?.as_ref(),
            MaskSite::Hidden(l) => self.hidden.get(l)?.as_ref(),
            MaskSite::Output => self.output.as_ref(),
        }
    }

    /// The mask applied at row `t * batch + b` of a window, for any `t`.
    pub fn row_at(&self, site: MaskSite, row: usize) -> Option<ArrayView1<'_, T>> {
        let m = self.get(site)?;
        Some(m.row(row % m.nrows()))
    }
}

/// Multiplies row `r` of `x` by mask row `r % mask.nrows()`.
pub(crate) fn apply_rows<T: Scalar>(x: &mut Array2<T>, mask: Option<&Array2<T>>) {
    if let Some(m) = mask {
        let b = m.nrows();
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            row *= &m.row(r % b);
        }
    }
}
