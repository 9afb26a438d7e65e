//! Truncated-BPTT training of the language model with plain SGD.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedCorpus;
use crate::error::{Error, Result};
use crate::evaluator::perplexity;
use crate::lm::{DropoutMasks, LanguageModel, LmConfig, LmParams, LstmState, Window};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Unroll length of truncated backpropagation.
    pub bptt: usize,
    /// Number of parallel streams.
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub init_range: f64,
    pub forget_bias: f64,
    pub transform_bias: f64,
    /// Maximum gradient L2 norm; the loss is the summed NLL divided by `batch`.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bptt: 35,
            batch: 20,
            lr: 0.7,
            epochs: 65,
            init_range: 0.05,
            forget_bias: 1.0,
            transform_bias: -2.0,
            clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.bptt == 0 || self.batch == 0 {
            return bad("bptt and batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.clip > 0.0) {
            return bad("clip threshold must be positive");
        }
        Ok(())
    }
}

/// Seeded uniform initialization with the configured special biases.
pub fn init_params<T: Scalar>(lm: &LmConfig, cfg: &TrainConfig) -> Result<LmParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    LmParams::init(lm, cfg.init_range, cfg.forget_bias, cfg.transform_bias, &mut rng)
}

/// Cuts the corpus into `batch` contiguous streams of `len / batch` tokens and
/// each stream into windows of `steps` tokens; a trailing partial window is
/// dropped. The target of token `i` is token `i + 1`, wrapping to token 0 at
/// the end of the corpus.
pub fn make_batches(corpus: &EncodedCorpus, batch: usize, steps: usize) -> Result<Vec<Window<'_>>> {
    let n = corpus.len();
    if batch == 0 || steps == 0 {
        return Err(Error::InvalidArgument("batch and steps must be positive".into()));
    }
    let stream = n / batch;
    let windows = stream / steps;
    if windows == 0 {
        return Err(Error::CorpusTooSmall { tokens: n, batch, steps });
    }
    Ok((0..windows)
        .map(|w| {
            let mut inputs = Vec::with_capacity(steps * batch);
            let mut targets = Vec::with_capacity(steps * batch);
            for t in 0..steps {
                for b in 0..batch {
                    let i = b * stream + w * steps + t;
                    inputs.push(Some(corpus.subwords(i)));
                    targets.push(Some(corpus.word((i + 1) % n)));
                }
            }
            Window {
                steps,
                batch,
                inputs,
                targets,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    pub wall_seconds: f64,
    pub grad_clip_events: usize,
}

pub fn write_metrics<W: Write>(w: W, rows: &[EpochMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::io("<metrics>", e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation perplexity.
    pub best: LanguageModel<T>,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub history: Vec<EpochMetrics>,
    /// Epoch at which the loss or the parameters became non-finite.
    pub diverged_at: Option<usize>,
}

/// Rescale `grads` to L2 norm `max_norm` when it is larger; returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut LmParams<T>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm.is_finite() && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// Halve the rate unless the validation perplexity strictly decreased.
pub fn next_learning_rate(lr: f64, previous_ppl: f64, ppl: f64) -> f64 {
    if ppl < previous_ppl {
        lr
    } else {
        lr * 0.5
    }
}

/// Trains for `cfg.epochs` epochs. The learning rate is halved after any epoch
/// whose validation perplexity does not improve on the previous epoch. The
/// recurrent state is carried across windows and reset at each epoch.
pub fn train<T: Scalar>(
    model: LanguageModel<T>,
    train_corpus: &EncodedCorpus,
    valid_corpus: &EncodedCorpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &LanguageModel<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_corpus.vocab_size > model.config.vocab_size || train_corpus.input_size > model.config.input_size {
        return Err(Error::VocabMismatch("corpus ids exceed the model sizes".into()));
    }
    let windows = make_batches(train_corpus, cfg.batch, cfg.bptt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let scale = T::of(1.0 / cfg.batch as f64);
    let mut model = model;
    let mut grads = LmParams::<T>::zeros(&model.config);
    let mut lr = cfg.lr;
    let mut prev_valid = f64::INFINITY;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_valid_ppl = f64::INFINITY;
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut state = LstmState::zeros(&model.config, cfg.batch);
        let mut loss = 0.0;
        let mut scored = 0;
        let mut clips = 0;
        let mut diverged = false;
        for window in &windows {
            let masks = DropoutMasks::sample(&model.config, cfg.batch, &mut rng)?;
            grads.fill_zero();
            let out = match model.forward_backward(window, &state, &masks, scale, &mut grads) {
                Ok(out) => out,
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            loss += out.loss_sum;
            scored += out.scored;
            state = out.state;
            let norm = clip_gradients(&mut grads, cfg.clip);
            if !norm.is_finite() {
                diverged = true;
                break;
            }
            clips += usize::from(norm > cfg.clip);
            model.params.axpy(T::of(-lr), &grads);
        }
        let valid_ppl = if diverged || !model.params.is_finite() {
            None
        } else {
            match perplexity(&model, valid_corpus) {
                Ok(p) if p.is_finite() => Some(p),
                Ok(_) | Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            }
        };
        let Some(valid_ppl) = valid_ppl else {
            return Ok(TrainOutcome {
                best,
                best_epoch,
                best_valid_ppl,
                history,
                diverged_at: Some(epoch),
            });
        };
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_ppl: (loss / scored.max(1) as f64).exp(),
            valid_ppl,
            wall_seconds: start.elapsed().as_secs_f64(),
            grad_clip_events: clips,
        };
        on_epoch(&metrics, &model);
        history.push(metrics);
        if valid_ppl < best_valid_ppl {
            best_valid_ppl = valid_ppl;
            best_epoch = epoch;
            best = model.clone();
        }
        lr = next_learning_rate(lr, prev_valid, valid_ppl);
        prev_valid = valid_ppl;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid_ppl,
        history,
        diverged_at: None,
    })
}
