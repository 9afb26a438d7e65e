//! Unconditional pattern-based CRF over character strings.
//!
//! A string `y` of length `K` has energy `E(y) = sum_p c_p * count_p(y)` and
//! probability `exp(-E(y)) / Z_K`, normalized over all strings of the same
//! length. Because the model has no conditioning input, `Z_K` and the expected
//! pattern counts depend on `K` only; the corpus objective therefore needs one
//! dynamic program per distinct sentence length, not per sentence.
//!
//! The dynamic program runs over the states of a [`PatternAutomaton`] built
//! from the pattern set: a pattern occurrence ends at position `t` exactly
//! when the pattern is a suffix of the state reached after `t` symbols, so
//! the energy decomposes into per-state weights `w(s)`. Forward scores depend
//! only on the prefix length and backward scores only on the remaining length,
//! which lets a single forward and a single backward sweep up to the longest
//! sentence serve every length at once.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::automaton::{PatternAutomaton, START};
use crate::corpus::{escape_symbols, unescape_symbols, Alphabet, CharCorpus};
use crate::error::{Error, Result};
use crate::owlqn::{self, OwlqnConfig, OwlqnReport};
use crate::scalar::Scalar;

/// Patterns with their CRF weights and the L1 coefficient used to train them.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternTable<T> {
    pub patterns: Vec<Vec<u32>>,
    pub weights: Vec<T>,
    pub reg_c: T,
}

impl<T: Scalar> PatternTable<T> {
    pub fn zeros(patterns: Vec<Vec<u32>>, reg_c: T) -> Self {
        let weights = vec![T::zero(); patterns.len()];
        PatternTable {
            patterns,
            weights,
            reg_c,
        }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// `true` exactly where the weight is nonzero.
    pub fn selected(&self) -> Vec<bool> {
        self.weights.iter().map(|w| *w != T::zero()).collect()
    }

    /// Patterns with a nonzero weight, in table order.
    pub fn select_patterns(&self) -> Vec<Vec<u32>> {
        self.patterns
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w != T::zero())
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// One `pattern<TAB>weight<TAB>selected` line per pattern.
    pub fn write_tsv<W: Write>(&self, mut w: W, alphabet: &Alphabet) -> Result<()> {
        for (p, c) in self.patterns.iter().zip(&self.weights) {
            let text = escape_symbols(&alphabet.decode(p)?);
            let selected = u8::from(*c != T::zero());
            writeln!(w, "{text}\t{}\t{selected}", c.as_f64()).map_err(|e| Error::io("<table>", e))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R, alphabet: &Alphabet, reg_c: T) -> Result<Self> {
        let mut patterns = Vec::new();
        let mut weights = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<table>", e))?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Format(format!("table line {}: {m}", i + 1));
            let mut cols = line.rsplitn(3, '\t');
            let flag = cols.next().ok_or_else(|| bad("missing flag"))?;
            let weight: f64 = cols
                .next()
                .ok_or_else(|| bad("missing weight"))?
                .parse()
                .map_err(|_| bad("bad weight"))?;
            let text = cols.next().ok_or_else(|| bad("missing pattern"))?;
            if !weight.is_finite() {
                return Err(bad("non-finite weight"));
            }
            if (flag == "1") != (weight != 0.0) || !(flag == "0" || flag == "1") {
                return Err(bad("selection flag disagrees with weight"));
            }
            let ids = unescape_symbols(text)?
                .into_iter()
                .map(|s| alphabet.id_of(s).ok_or_else(|| bad("symbol not in alphabet")))
                .collect::<Result<Vec<u32>>>()?;
            patterns.push(ids);
            weights.push(T::of(weight));
        }
        Ok(PatternTable {
            patterns,
            weights,
            reg_c,
        })
    }
}

/// Number of (possibly overlapping) occurrences of `pattern` in `sentence`.
pub fn count_occurrences(pattern: &[u32], sentence: &[u32]) -> usize {
    if pattern.is_empty() || pattern.len() > sentence.len() {
        return 0;
    }
    sentence.windows(pattern.len()).filter(|w| *w == pattern).count()
}

/// `E = sum_p c_p * count_p(sentence)`, by direct scanning.
pub fn energy<T: Scalar>(sentence: &[u32], table: &PatternTable<T>) -> T {
    table
        .patterns
        .iter()
        .zip(&table.weights)
        .map(|(p, &c)| c * T::of(count_occurrences(p, sentence) as f64))
        .fold(T::zero(), |a, b| a + b)
}

/// Log-partition values and expected pattern counts per string length.
#[derive(Debug, Clone)]
pub struct LengthTable<T> {
    /// `log_z[k]` for every `k <= max_len`.
    pub log_z: Vec<T>,
    /// Expected counts for the lengths that were requested.
    pub expected: BTreeMap<usize, Vec<T>>,
}

/// Shared forward/backward sweeps for one weight vector.
struct Sweeps<T> {
    /// Normalized forward scores per step (each row sums to one) and their log scale.
    alpha: Vec<Vec<T>>,
    log_alpha: Vec<T>,
    /// Backward scores for `r` remaining symbols, max-normalized, and their log scale.
    beta: Vec<Vec<T>>,
    log_beta: Vec<T>,
}

impl<T: Scalar> Sweeps<T> {
    fn run(aut: &PatternAutomaton, weights: &[T], max_len: usize) -> Self {
        let n = aut.num_states();
        let state_weight = aut.state_weights(weights);
        // shift so every factor is <= 1; the shift re-enters through the log scale
        let floor = state_weight
            .iter()
            .copied()
            .fold(T::infinity(), |a, b| if b < a { b } else { a });
        let factor: Vec<T> = state_weight.iter().map(|&w| (floor - w).exp()).collect();

        let mut alpha = Vec::with_capacity(max_len + 1);
        let mut log_alpha = Vec::with_capacity(max_len + 1);
        let mut first = vec![T::zero(); n];
        first[START as usize] = T::one();
        alpha.push(first);
        log_alpha.push(T::zero());
        for t in 1..=max_len {
            let prev = &alpha[t - 1];
            let mut next = vec![T::zero(); n];
            for (s, &p) in prev.iter().enumerate() {
                if p == T::zero() {
                    continue;
                }
                for &to in aut.row(s as u32) {
                    next[to as usize] += p;
                }
            }
            let mut total = T::zero();
            for (v, &f) in next.iter_mut().zip(&factor) {
                *v *= f;
                total += *v;
            }
            for v in &mut next {
                *v /= total;
            }
            log_alpha.push(log_alpha[t - 1] + total.ln() - floor);
            alpha.push(next);
        }

        let mut beta = Vec::with_capacity(max_len + 1);
        let mut log_beta = Vec::with_capacity(max_len + 1);
        beta.push(vec![T::one(); n]);
        log_beta.push(T::zero());
        for r in 1..=max_len {
            let carried: Vec<T> = beta[r - 1].iter().zip(&factor).map(|(&b, &f)| b * f).collect();
            let mut next: Vec<T> = (0..n)
                .map(|s| {
                    aut.row(s as u32)
                        .iter()
                        .fold(T::zero(), |acc, &to| acc + carried[to as usize])
                })
                .collect();
            let top = next.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
            for v in &mut next {
                *v /= top;
            }
            log_beta.push(log_beta[r - 1] + top.ln() - floor);
            beta.push(next);
        }
        Sweeps {
            alpha,
            log_alpha,
            beta,
            log_beta,
        }
    }

    fn log_z(&self, k: usize) -> T {
        self.log_alpha[k]
    }

    /// Expected number of visits to each state over a string of length `k`.
    fn state_mass(&self, k: usize) -> Vec<T> {
        let n = self.alpha[0].len();
        let mut mass = vec![T::zero(); n];
        let log_z = self.log_z(k);
        for t in 1..=k {
            let scale = (self.log_alpha[t] + self.log_beta[k - t] - log_z).exp();
            let (a, b) = (&self.alpha[t], &self.beta[k - t]);
            for s in 0..n {
                mass[s] += a[s] * b[s] * scale;
            }
        }
        mass
    }
}

fn pattern_totals<T: Scalar>(aut: &PatternAutomaton, mass: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); aut.patterns().len()];
    for (s, &m) in mass.iter().enumerate() {
        for &p in aut.pattern_suffixes(s as u32) {
            out[p as usize] += m;
        }
    }
    out
}

fn check_table<T>(aut: &PatternAutomaton, table: &PatternTable<T>) -> Result<()> {
    if aut.patterns() != table.patterns.as_slice() {
        return Err(Error::InvalidArgument(
            "automaton was not built from the table's patterns".into(),
        ));
    }
    Ok(())
}

/// Log-partition values for every length up to `max_len` and expected
/// counts for each length in `lengths`.
pub fn length_table<T: Scalar>(
    aut: &PatternAutomaton,
    weights: &[T],
    max_len: usize,
    lengths: &[usize],
) -> LengthTable<T> {
    let top = lengths.iter().copied().max().unwrap_or(0).max(max_len);
    let sweeps = Sweeps::run(aut, weights, top);
    let expected = lengths
        .par_iter()
        .map(|&k| (k, pattern_totals(aut, &sweeps.state_mass(k))))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    LengthTable {
        log_z: sweeps.log_alpha[..=max_len].to_vec(),
        expected,
    }
}

/// `log sum_{y in A^k} exp(-E(y))`.
pub fn log_partition<T: Scalar>(k: usize, aut: &PatternAutomaton, table: &PatternTable<T>) -> Result<T> {
    check_table(aut, table)?;
    Ok(Sweeps::run(aut, &table.weights, k).log_z(k))
}

/// Expected occurrence count of every pattern under the length-`k` distribution.
pub fn expected_counts<T: Scalar>(k: usize, aut: &PatternAutomaton, table: &PatternTable<T>) -> Result<Vec<T>> {
    check_table(aut, table)?;
    let sweeps = Sweeps::run(aut, &table.weights, k);
    Ok(pattern_totals(aut, &sweeps.state_mass(k)))
}

/// Smooth part of the training objective, precomputed for one corpus.
///
/// Observed pattern counts and the sentence-length histogram are fixed, so an
/// evaluation only reruns the length dynamic program.
pub struct CrfObjective<'a> {
    aut: &'a PatternAutomaton,
    observed: Vec<f64>,
    /// `(length, number of sentences)` for every distinct length.
    lengths: Vec<(usize, usize)>,
}

impl<'a> CrfObjective<'a> {
    pub fn new(corpus: &CharCorpus, aut: &'a PatternAutomaton) -> Result<Self> {
        let per_sentence: Vec<Vec<f64>> = corpus
            .sentences
            .par_iter()
            .map(|s| {
                let mut counts = vec![0.0; aut.patterns().len()];
                for state in aut.encode_sentence(s)? {
                    for &p in aut.pattern_suffixes(state) {
                        counts[p as usize] += 1.0;
                    }
                }
                Ok(counts)
            })
            .collect::<Result<_>>()?;
        let mut observed = vec![0.0; aut.patterns().len()];
        for counts in per_sentence {
            for (o, c) in observed.iter_mut().zip(counts) {
                *o += c;
            }
        }
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &corpus.sentences {
            *hist.entry(s.len()).or_default() += 1;
        }
        Ok(CrfObjective {
            aut,
            observed,
            lengths: hist.into_iter().collect(),
        })
    }

    pub fn observed_counts(&self) -> &[f64] {
        &self.observed
    }

    /// Negative log-likelihood and its gradient with respect to the weights.
    pub fn evaluate<T: Scalar>(&self, weights: &[T]) -> (T, Vec<T>) {
        let max_len = self.lengths.last().map_or(0, |&(k, _)| k);
        let sweeps = Sweeps::run(self.aut, weights, max_len);
        // per-length work in parallel, summed in length order for reproducibility
        let masses: Vec<(T, Vec<T>)> = self
            .lengths
            .par_iter()
            .map(|&(k, n)| {
                let n = T::of(n as f64);
                let mut mass = sweeps.state_mass(k);
                for m in &mut mass {
                    *m *= n;
                }
                (n * sweeps.log_z(k), mass)
            })
            .collect();
        let mut nll = T::zero();
        let mut state_mass = vec![T::zero(); self.aut.num_states()];
        for (z, mass) in masses {
            nll += z;
            for (a, b) in state_mass.iter_mut().zip(mass) {
                *a += b;
            }
        }
        let expected = pattern_totals(self.aut, &state_mass);
        let mut grad = Vec::with_capacity(weights.len());
        for ((&w, &obs), e) in weights.iter().zip(&self.observed).zip(expected) {
            nll += w * T::of(obs);
            grad.push(T::of(obs) - e);
        }
        (nll, grad)
    }
}

/// `-sum_i log Pr(sentence_i)` and its gradient; the L1 term is left to the optimizer.
pub fn nll_and_grad<T: Scalar>(
    corpus: &CharCorpus,
    aut: &PatternAutomaton,
    table: &PatternTable<T>,
) -> Result<(T, Vec<T>)> {
    check_table(aut, table)?;
    Ok(CrfObjective::new(corpus, aut)?.evaluate(&table.weights))
}

/// Fit the weights of `patterns` by minimizing the L1-regularized objective.
pub fn train_crf(
    corpus: &CharCorpus,
    alphabet_size: usize,
    patterns: Vec<Vec<u32>>,
    reg_c: f64,
    cfg: &OwlqnConfig<f64>,
) -> Result<(PatternTable<f64>, OwlqnReport<f64>)> {
    let aut = PatternAutomaton::build(&patterns, alphabet_size)?;
    let objective = CrfObjective::new(corpus, &aut)?;
    let cfg = OwlqnConfig {
        lambda: reg_c,
        ..cfg.clone()
    };
    let report = owlqn::minimize(
        |x: &[f64], g: &mut [f64]| {
            let (v, grad) = objective.evaluate(x);
            g.copy_from_slice(&grad);
            v
        },
        vec![0.0; patterns.len()],
        &cfg,
    )?;
    let table = PatternTable {
        patterns,
        weights: report.x.clone(),
        reg_c,
    };
    Ok((table, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_from_text, SourceProfile};

    fn ab_model() -> (Alphabet, PatternAutomaton, PatternTable<f64>) {
        let a = Alphabet::from_chars("ab");
        let pats = vec![a.encode_str("ab").unwrap()];
        let aut = PatternAutomaton::build(&pats, 2).unwrap();
        let mut table = PatternTable::zeros(pats, 0.0);
        table.weights[0] = 2.0_f64.ln();
        (a, aut, table)
    }

    #[test]
    fn occurrence_counts() {
        let a = Alphabet::from_chars("ab");
        let s = |t: &str| a.encode_str(t).unwrap();
        assert_eq!(count_occurrences(&s("ab"), &s("abab")), 2);
        assert_eq!(count_occurrences(&s("aa"), &s("aaa")), 2);
        assert_eq!(count_occurrences(&s("a"), &[]), 0);
    }

    #[test]
    fn energy_examples() {
        let (a, _, mut table) = ab_model();
        assert!((energy(&a.encode_str("ab").unwrap(), &table) - 2.0_f64.ln()).abs() < 1e-15);
        table.weights[0] = 0.5;
        assert!((energy(&a.encode_str("abab").unwrap(), &table) - 1.0).abs() < 1e-15);
        table.weights[0] = 0.0;
        assert_eq!(energy(&a.encode_str("abab").unwrap(), &table), 0.0);
    }

    #[test]
    fn uniform_partition() {
        let a = Alphabet::from_chars("ab");
        let aut = PatternAutomaton::build(&[], 2).unwrap();
        let table = PatternTable::<f64>::zeros(vec![], 0.0);
        assert!((log_partition(2, &aut, &table).unwrap() - 4.0_f64.ln()).abs() < 1e-15);
        assert!(expected_counts(2, &aut, &table).unwrap().is_empty());
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn ab_partition_and_expectation() {
        let (_, aut, table) = ab_model();
        assert!((log_partition(2, &aut, &table).unwrap() - 3.5_f64.ln()).abs() < 1e-14);
        assert!((expected_counts(2, &aut, &table).unwrap()[0] - 1.0 / 7.0).abs() < 1e-14);
        assert_eq!(log_partition(0, &aut, &table).unwrap(), 0.0);
        let mut zero = table.clone();
        zero.weights[0] = 0.0;
        assert!((expected_counts(2, &aut, &zero).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn table_must_match_automaton() {
        let (_, aut, _) = ab_model();
        let other = PatternTable::<f64>::zeros(vec![vec![1, 0]], 0.0);
        assert!(log_partition(2, &aut, &other).is_err());
    }

    #[test]
    fn empty_corpus_objective() {
        let (_, aut, table) = ab_model();
        let corpus = CharCorpus {
            sentences: vec![],
            word_spans: vec![],
            profile: SourceProfile::Raw,
        };
        let (v, g) = nll_and_grad(&corpus, &aut, &table).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn single_precision_is_close() {
        let (_, aut, table) = ab_model();
        let t32 = PatternTable {
            patterns: table.patterns.clone(),
            weights: vec![table.weights[0] as f32],
            reg_c: 0.0f32,
        };
        assert!((log_partition(6, &aut, &t32).unwrap() as f64 - log_partition(6, &aut, &table).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn long_strings_stay_finite() {
        let (_, aut, mut table) = ab_model();
        table.weights[0] = -30.0;
        let z = log_partition(2000, &aut, &table).unwrap();
        assert!(z.is_finite() && z > 0.0);
        let e = expected_counts(2000, &aut, &table).unwrap();
        // nearly every string is (ab)^1000
        assert!((e[0] - 1000.0).abs() < 1.0);
    }

    #[test]
    fn table_tsv_roundtrip() {
        let a = Alphabet::from_chars("ab\t");
        let table = PatternTable {
            patterns: vec![a.encode_str("ab").unwrap(), a.encode_str("\ta").unwrap(), a.encode_str("b").unwrap()],
            weights: vec![0.1 + 0.2, 0.0, -1.0e-300],
            reg_c: 3.0,
        };
        let mut buf = Vec::new();
        table.write_tsv(&mut buf, &a).unwrap();
        let back = PatternTable::read_tsv(buf.as_slice(), &a, 3.0).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.selected(), vec![true, false, true]);
        assert!(PatternTable::<f64>::read_tsv("ab\t0.5\t0\n".as_bytes(), &a, 0.0).is_err());
    }

    #[test]
    fn selection_examples() {
        let table = PatternTable {
            patterns: vec![vec![0], vec![1], vec![2], vec![3]],
            weights: vec![0.0, 0.3, 0.0, -1.2],
            reg_c: 1.0,
        };
        assert_eq!(table.select_patterns(), vec![vec![1], vec![3]]);
        let none = PatternTable::<f64>::zeros(vec![vec![0]], 1.0);
        assert!(none.select_patterns().is_empty());
    }

    #[test]
    fn training_drives_weights_toward_data() {
        let mut a = Alphabet::new();
        let corpus = corpus_from_text("ab ab ab\nab ab\nba ab", SourceProfile::Raw, &mut a);
        let pats = vec![a.encode_str("ab").unwrap(), a.encode_str("bb").unwrap()];
        let cfg = OwlqnConfig::default();
        let (table, report) = train_crf(&corpus, a.len(), pats, 0.0, &cfg).unwrap();
        assert!(report.converged, "{report:?}");
        // "ab" is over-represented (low energy), "bb" never occurs (high energy)
        assert!(table.weights[0] < 0.0);
        assert!(table.weights[1] > 0.0);
    }
}
