//! Perplexity, highway gate diagnostics and parameter accounting.

use std::io::Write;

use serde::Serialize;

use crate::corpus::EncodedCorpus;
use crate::error::{Error, Result};
use crate::lm::{DropoutMasks, LanguageModel, LstmState, ParamCount, Window};
use crate::scalar::Scalar;

/// Unroll length used for evaluation; the state is carried across windows so
/// the value does not affect the result beyond rounding.
pub const EVAL_STEPS: usize = 35;

/// Summed NLL and scored-token count of independent streams evaluated side by
/// side, each as one continuous sequence predicting tokens `1..len`.
pub fn stream_nll<T: Scalar>(model: &LanguageModel<T>, streams: &[&EncodedCorpus], steps: usize) -> Result<(f64, usize)> {
    if streams.is_empty() || steps == 0 {
        return Err(Error::InvalidArgument("need at least one stream and one step".into()));
    }
    for s in streams {
        if s.vocab_size > model.config.vocab_size || s.input_size > model.config.input_size {
            return Err(Error::VocabMismatch("corpus ids exceed the model sizes".into()));
        }
    }
    let batch = streams.len();
    let longest = streams.iter().map(|s| s.len()).max().unwrap_or(0);
    if longest < 2 {
        return Err(Error::EmptyCorpus);
    }
    let masks = DropoutMasks::identity(&model.config);
    let mut state = LstmState::zeros(&model.config, batch);
    let (mut nll, mut scored) = (0.0, 0);
    let mut start = 0;
    while start < longest - 1 {
        let len = steps.min(longest - 1 - start);
        let mut inputs = Vec::with_capacity(len * batch);
        let mut targets = Vec::with_capacity(len * batch);
        for t in 0..len {
            let i = start + t;
            for s in streams {
                if i + 1 < s.len() {
                    inputs.push(Some(s.subwords(i)));
                    targets.push(Some(s.word(i + 1)));
                } else {
                    inputs.push(None);
                    targets.push(None);
                }
            }
        }
        let window = Window {
            steps: len,
            batch,
            inputs,
            targets,
        };
        let out = model.forward(&window, &state, &masks, false)?;
        nll += out.loss_sum;
        scored += out.scored;
        state = out.state;
        start += len;
    }
    Ok((nll, scored))
}

/// `exp` of the mean next-word NLL over the corpus read as one stream.
pub fn perplexity<T: Scalar>(model: &LanguageModel<T>, corpus: &EncodedCorpus) -> Result<f64> {
    let (nll, n) = stream_nll(model, &[corpus], EVAL_STEPS)?;
    Ok((nll / n as f64).exp())
}

/// Perplexity over several independent streams, pooled over all tokens.
pub fn perplexity_streams<T: Scalar>(model: &LanguageModel<T>, streams: &[&EncodedCorpus], steps: usize) -> Result<f64> {
    let (nll, n) = stream_nll(model, streams, steps)?;
    Ok((nll / n as f64).exp())
}

/// Highway transform gate values, one list per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub layers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateSummary {
    pub layer: usize,
    pub count: usize,
    pub mean: f64,
    /// Minimum, the nine deciles and maximum.
    pub deciles: Vec<f64>,
}

impl GateStats {
    pub fn mean(&self) -> f64 {
        let (sum, n) = self
            .layers
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        sum / n.max(1) as f64
    }

    pub fn summary(&self) -> Vec<GateSummary> {
        self.layers
            .iter()
            .enumerate()
            .map(|(layer, vals)| {
                let mut sorted = vals.clone();
                sorted.sort_by(f64::total_cmp);
                let deciles = if sorted.is_empty() {
                    Vec::new()
                } else {
                    (0..=10)
                        .map(|k| sorted[((sorted.len() - 1) * k + 5) / 10])
                        .collect()
                };
                GateSummary {
                    layer,
                    count: vals.len(),
                    mean: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                    deciles,
                }
            })
            .collect()
    }

    /// CSV with header `layer,value`, one row per gate unit per token.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(e.to_string());
        out.write_record(["layer", "value"]).map_err(err)?;
        for (l, vals) in self.layers.iter().enumerate() {
            for v in vals {
                out.write_record([l.to_string(), v.to_string()]).map_err(err)?;
            }
        }
        out.flush().map_err(|e| Error::io("<gates>", e))
    }
}

/// Transform gate values over the first `max_tokens` tokens of the corpus.
pub fn gate_stats<T: Scalar>(model: &LanguageModel<T>, corpus: &EncodedCorpus, max_tokens: usize) -> Result<GateStats> {
    let n = corpus.len().min(max_tokens);
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut layers = vec![Vec::new(); model.config.highway_layers];
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(1024) {
        let words: Vec<&[u32]> = chunk.iter().map(|&i| corpus.subwords(i)).collect();
        for (l, g) in model.word_gates(&words)?.into_iter().enumerate() {
            layers[l].extend(g.iter().map(|v| v.as_f64()));
        }
    }
    Ok(GateStats { layers })
}

pub fn param_count<T: Scalar>(model: &LanguageModel<T>) -> ParamCount {
    model.params.count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub tokens: usize,
    pub params: ParamCount,
}

pub fn evaluate<T: Scalar>(model: &LanguageModel<T>, corpus: &EncodedCorpus) -> Result<EvalReport> {
    let (nll, tokens) = stream_nll(model, &[corpus], EVAL_STEPS)?;
    Ok(EvalReport {
        perplexity: (nll / tokens as f64).exp(),
        tokens,
        params: param_count(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SubwordKind;
    use crate::lm::{Composition, LmConfig, LmParams, SizeClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize, seed: u32) -> EncodedCorpus {
        let tokens: Vec<(u32, Vec<u32>)> = (0..n as u32)
            .map(|i| {
                let w = (i * 7 + seed) % 10;
                (w, vec![w, (w + 3) % 10])
            })
            .collect();
        EncodedCorpus::from_tokens(SubwordKind::Chars, 10, 10, tokens.iter().map(|(w, s)| (*w, s.as_slice()))).unwrap()
    }

    fn model() -> LanguageModel<f64> {
        let mut cfg = LmConfig::recipe(Composition::Sum, SubwordKind::Chars, SizeClass::Small, 10, 10, 2);
        cfg.d_x = 6;
        cfg.d_hw = 6;
        cfg.d_lm = 6;
        let p = LmParams::init(&cfg, 0.3, 1.0, -2.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        LanguageModel::new(cfg, p).unwrap()
    }

    #[test]
    fn zero_model_has_vocab_perplexity() {
        let m = model();
        let z = LanguageModel::new(m.config.clone(), LmParams::<f64>::zeros(&m.config)).unwrap();
        let p = perplexity(&z, &corpus(50, 0)).unwrap();
        assert!((p - 10.0).abs() < 1e-9);
    }

    #[test]
    fn window_length_does_not_matter() {
        let m = model();
        let c = corpus(100, 1);
        let (a, n) = stream_nll(&m, &[&c], 35).unwrap();
        let (b, k) = stream_nll(&m, &[&c], 7).unwrap();
        assert_eq!(n, 99);
        assert_eq!(k, 99);
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn batch_size_invariance() {
        let m = model();
        let streams: Vec<EncodedCorpus> = (0..5).map(|s| corpus(40 + 9 * s as usize, s)).collect();
        let refs: Vec<&EncodedCorpus> = streams.iter().collect();
        let (together, n) = stream_nll(&m, &refs, 35).unwrap();
        let (mut apart, mut k) = (0.0, 0);
        for s in &refs {
            let (v, c) = stream_nll(&m, &[*s], 35).unwrap();
            apart += v;
            k += c;
        }
        assert_eq!(n, k);
        assert!((together - apart).abs() / apart < 1e-6);
    }

    #[test]
    fn gate_summary_and_csv() {
        let m = model();
        let g = gate_stats(&m, &corpus(30, 2), 20).unwrap();
        assert_eq!(g.layers.len(), 2);
        assert_eq!(g.layers[0].len(), 20 * 6);
        let mean = g.mean();
        assert!((mean - 0.119).abs() < 0.05, "{mean}");
        let s = g.summary();
        assert_eq!(s[0].deciles.len(), 11);
        assert!(s[0].deciles.windows(2).all(|w| w[0] <= w[1]));
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,value\n0,"));
        assert_eq!(text.lines().count(), 1 + 2 * 120);
    }

    #[test]
    fn report_counts() {
        let m = model();
        let r = evaluate(&m, &corpus(20, 3)).unwrap();
        assert_eq!(r.tokens, 19);
        assert_eq!(r.params.total, m.config.param_count());
        assert!(stream_nll(&m, &[&corpus(1, 0)], 35).is_err());
    }

    #[test]
    fn certain_model_has_unit_perplexity() {
        let m = model();
        let mut p = LmParams::<f64>::zeros(&m.config);
        p.softmax_b[4] = 1e3;
        let certain = LanguageModel::new(m.config.clone(), p).unwrap();
        let tokens: Vec<(u32, Vec<u32>)> = (0..40).map(|i| (4, vec![i % 10])).collect();
        let c = EncodedCorpus::from_tokens(SubwordKind::Chars, 10, 10, tokens.iter().map(|(w, s)| (*w, s.as_slice())))
            .unwrap();
        assert_eq!(perplexity(&certain, &c).unwrap(), 1.0);
    }

    #[test]
    fn gate_sample_is_stable() {
        let mut cfg = LmConfig::recipe(Composition::Sum, SubwordKind::Chars, SizeClass::Small, 10, 10, 2);
        cfg.d_x = 50;
        cfg.d_hw = 50;
        cfg.d_lm = 8;
        let p = LmParams::<f64>::init(&cfg, 0.3, 1.0, -2.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let m = LanguageModel::new(cfg, p).unwrap();
        let g = gate_stats(&m, &corpus(1000, 5), 1000).unwrap();
        let all: Vec<f64> = g.layers.concat();
        assert!(all.len() >= 100_000);
        assert!(all.iter().all(|&v| v > 0.0 && v < 1.0));
        let (a, b) = all.split_at(all.len() / 2);
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!((mean(a) - mean(b)).abs() < 0.01);
    }

    #[test]
    fn doubling_the_vocabulary_only_grows_the_softmax() {
        let m = model();
        let mut big = m.config.clone();
        big.vocab_size *= 2;
        let a = LmParams::<f64>::zeros(&m.config).count();
        let b = LmParams::<f64>::zeros(&big).count();
        for (name, n) in &a.modules {
            if name == "softmax" {
                assert_eq!(b.modules[name], n + (m.config.d_lm + 1) * m.config.vocab_size);
            } else {
                assert_eq!(b.modules[name], *n, "{name}");
            }
        }
        assert_eq!(b.total - a.total, (m.config.d_lm + 1) * m.config.vocab_size);
    }
}
