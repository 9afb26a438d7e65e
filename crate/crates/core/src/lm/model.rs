use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rayon::prelude::*;

use super::dropout::{apply_rows, DropoutMasks, MaskSite};
use super::layers::{
    compose_word, compose_word_backward, highway_layer_backward, highway_layer_forward, lstm_layer_backward,
    lstm_layer_forward, softmax_rows,
};
use super::params::{read_checkpoint, write_checkpoint, LmParams};
use super::LmConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A block of `steps * batch` positions, row `t * batch + b`. A missing input
/// is a zero word vector; a missing target is not scored.
#[derive(Debug, Clone)]
pub struct Window<'a> {
    pub steps: usize,
    pub batch: usize,
    pub inputs: Vec<Option<&'a [u32]>>,
    pub targets: Vec<Option<u32>>,
}

impl Window<'_> {
    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }

    pub fn scored(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Hidden and cell state of every LSTM layer, one row per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<Array2<T>>,
    pub c: Vec<Array2<T>>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(cfg: &LmConfig, batch: usize) -> Self {
        LstmState {
            h: vec![Array2::zeros((batch, cfg.d_lm)); cfg.lstm_layers],
            c: vec![Array2::zeros((batch, cfg.d_lm)); cfg.lstm_layers],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Summed negative log-likelihood in nats over scored rows.
    pub loss_sum: f64,
    pub scored: usize,
    pub state: LstmState<T>,
    /// Transform gate values of every highway layer, if recorded.
    pub gates: Vec<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T> {
    pub config: LmConfig,
    pub params: LmParams<T>,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(config: LmConfig, params: LmParams<T>) -> Result<Self> {
        config.validate()?;
        let want = LmParams::<T>::zeros(&config);
        for ((name, a), (_, b)) in params.tensors().iter().zip(want.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::InvalidArgument(format!("tensor {name} has the wrong shape")));
            }
        }
        if params.tensors().len() != want.tensors().len() {
            return Err(Error::InvalidArgument("parameter set does not match the configuration".into()));
        }
        Ok(LanguageModel { config, params })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, &self.config, &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (config, params) = read_checkpoint(r)?;
        Self::new(config, params)
    }

    fn check_window(&self, window: &Window<'_>, state: &LstmState<T>) -> Result<()> {
        let rows = window.rows();
        if window.inputs.len() != rows || window.targets.len() != rows {
            return Err(Error::InvalidArgument("window rows disagree with steps * batch".into()));
        }
        if state.h.len() != self.config.lstm_layers || state.h.iter().any(|h| h.nrows() != window.batch) {
            return Err(Error::InvalidArgument("state does not match window batch".into()));
        }
        for input in window.inputs.iter().flatten() {
            if input.is_empty() {
                return Err(Error::InvalidArgument("word has no subwords".into()));
            }
            if let Some(&bad) = input.iter().find(|&&s| s as usize >= self.config.input_size) {
                return Err(Error::OutOfRange {
                    index: bad as usize,
                    size: self.config.input_size,
                });
            }
        }
        if let Some(&bad) = window.targets.iter().flatten().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Composed word vectors for every row plus cnn argmax bookkeeping.
    fn compose_rows(&self, inputs: &[Option<&[u32]>]) -> (Array2<T>, Vec<Vec<u32>>) {
        let cfg = &self.config;
        let dim = cfg.composed_dim();
        let emb = &self.params.embedding;
        let per_row: Vec<_> = inputs
            .par_iter()
            .map(|input| match input {
                None => (None, Vec::new()),
                Some(sub) => {
                    let x = emb.select(Axis(0), &sub.iter().map(|&s| s as usize).collect::<Vec<_>>());
                    let (v, arg) = compose_word(cfg.composition, x.view(), cfg.pad_len, &self.params.conv);
                    (Some(v), arg)
                }
            })
            .collect();
        let mut out = Array2::zeros((inputs.len(), dim));
        let mut args = Vec::with_capacity(inputs.len());
        for (r, (v, arg)) in per_row.into_iter().enumerate() {
            if let Some(v) = v {
                out.row_mut(r).assign(&v);
            }
            args.push(arg);
        }
        (out, args)
    }

    /// Highway transform gates for a list of words, one matrix per layer with
    /// one row per word. No dropout is applied.
    pub fn word_gates(&self, words: &[&[u32]]) -> Result<Vec<Array2<T>>> {
        for w in words {
            if w.is_empty() {
                return Err(Error::InvalidArgument("word has no subwords".into()));
            }
            if let Some(&bad) = w.iter().find(|&&s| s as usize >= self.config.input_size) {
                return Err(Error::OutOfRange {
                    index: bad as usize,
                    size: self.config.input_size,
                });
            }
        }
        let inputs: Vec<_> = words.iter().map(|w| Some(*w)).collect();
        let (mut x, _) = self.compose_rows(&inputs);
        if let Some((w, b)) = &self.params.projection {
            x = x.dot(w);
            x += b;
        }
        let mut gates = Vec::with_capacity(self.params.highway.len());
        for layer in &self.params.highway {
            let (y, cache) = highway_layer_forward(layer, x);
            gates.push(cache.gate);
            x = y;
        }
        Ok(gates)
    }

    /// Scores a window without computing gradients.
    pub fn forward(
        &self,
        window: &Window<'_>,
        state: &LstmState<T>,
        masks: &DropoutMasks<T>,
        record_gates: bool,
    ) -> Result<ForwardOutput<T>> {
        self.run(window, state, masks, record_gates, None)
    }

    /// Scores a window and adds `loss_scale * d(sum NLL)/d(params)` into `grads`.
    pub fn forward_backward(
        &self,
        window: &Window<'_>,
        state: &LstmState<T>,
        masks: &DropoutMasks<T>,
        loss_scale: T,
        grads: &mut LmParams<T>,
    ) -> Result<ForwardOutput<T>> {
        self.run(window, state, masks, false, Some((grads, loss_scale)))
    }

    fn run(
        &self,
        window: &Window<'_>,
        state: &LstmState<T>,
        masks: &DropoutMasks<T>,
        record_gates: bool,
        grads: Option<(&mut LmParams<T>, T)>,
    ) -> Result<ForwardOutput<T>> {
        self.check_window(window, state)?;
        let p = &self.params;
        let train = grads.is_some();
        let (steps, batch) = (window.steps, window.batch);

        let (composed, argmax) = self.compose_rows(&window.inputs);
        let mut x = composed.clone();
        apply_rows(&mut x, masks.get(MaskSite::Embedding));
        let proj_in = x;
        let mut x = match &p.projection {
            Some((w, b)) => {
                let mut y = proj_in.dot(w);
                y += b;
                y
            }
            None => proj_in.clone(),
        };

        let mut hw_caches = Vec::with_capacity(p.highway.len());
        let mut gates = Vec::new();
        for layer in &p.highway {
            let (y, cache) = highway_layer_forward(layer, x);
            if record_gates {
                gates.push(cache.gate.clone());
            }
            hw_caches.push(cache);
            x = y;
        }

        let mut new_state = state.clone();
        let mut lstm_caches = Vec::with_capacity(p.lstm.len());
        for (l, layer) in p.lstm.iter().enumerate() {
            let (out, cache) = lstm_layer_forward(
                layer,
                x,
                masks.get(MaskSite::GateInput(l)),
                masks.get(MaskSite::Hidden(l)),
                &mut new_state.h[l],
                &mut new_state.c[l],
                steps,
                batch,
                train,
            );
            lstm_caches.push(cache);
            x = out;
        }

        let mut top = x;
        apply_rows(&mut top, masks.get(MaskSite::Output));
        let (loss_sum, scored, d_logits) =
            softmax_rows(&p.softmax_w, &p.softmax_b, &top, &window.targets, grads.as_ref().map(|g| g.1));
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite(format!("window loss {loss_sum}")));
        }

        if let Some((g, _)) = grads {
            let one = T::one();
            let d_logits = d_logits.expect("gradient requested");
            general_mat_mul(one, &top.t(), &d_logits, one, &mut g.softmax_w);
            g.softmax_b += &d_logits.sum_axis(Axis(0));
            let mut dx = d_logits.dot(&p.softmax_w.t());
            apply_rows(&mut dx, masks.get(MaskSite::Output));

            for l in (0..p.lstm.len()).rev() {
                let cache = lstm_caches[l].as_ref().expect("cache kept in training");
                dx = lstm_layer_backward(&p.lstm[l], cache, &dx, &mut g.lstm[l]);
            }
            for l in (0..p.highway.len()).rev() {
                dx = highway_layer_backward(&p.highway[l], &hw_caches[l], &dx, &mut g.highway[l]);
            }
            if let (Some((w, _)), Some((gw, gb))) = (&p.projection, &mut g.projection) {
                general_mat_mul(one, &proj_in.t(), &dx, one, gw);
                *gb += &dx.sum_axis(Axis(0));
                dx = dx.dot(&w.t());
            }
            apply_rows(&mut dx, masks.get(MaskSite::Embedding));
            for (r, input) in window.inputs.iter().enumerate() {
                if let Some(sub) = input {
                    compose_word_backward(
                        self.config.composition,
                        sub,
                        &p.embedding,
                        self.config.pad_len,
                        &p.conv,
                        composed.row(r),
                        &argmax[r],
                        dx.row(r),
                        &mut g.embedding,
                        &mut g.conv,
                    );
                }
            }
        }

        Ok(ForwardOutput {
            loss_sum,
            scored,
            state: new_state,
            gates,
        })
    }
}
