//! Frequent-substring mining and the co-occurrence reduction that yields the
//! candidate pattern set.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::automaton::PatternAutomaton;
use crate::corpus::{escape_symbols, unescape_symbols, Alphabet, CharCorpus};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 12;

/// Candidate patterns with their corpus occurrence counts.
///
/// Patterns are kept sorted by length, then lexicographically by symbol id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub patterns: Vec<Vec<u32>>,
    pub counts: Vec<usize>,
    pub f: usize,
    pub max_len: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn count_of(&self, pattern: &[u32]) -> Option<usize> {
        self.patterns
            .iter()
            .position(|p| p == pattern)
            .map(|i| self.counts[i])
    }

    fn sort(&mut self) {
        let mut pairs: Vec<(Vec<u32>, usize)> =
            self.patterns.drain(..).zip(self.counts.drain(..)).collect();
        pairs.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
        let (patterns, counts) = pairs.into_iter().unzip();
        self.patterns = patterns;
        self.counts = counts;
    }
}

const SEPARATOR: u32 = u32::MAX;

/// Sentences joined by a separator, plus the start offset of each sentence.
fn concatenate(corpus: &CharCorpus) -> (Vec<u32>, Vec<usize>) {
    let mut text = Vec::with_capacity(corpus.num_symbols() + corpus.sentences.len());
    let mut starts = Vec::with_capacity(corpus.sentences.len());
    for s in &corpus.sentences {
        starts.push(text.len());
        text.extend_from_slice(s);
        text.push(SEPARATOR);
    }
    (text, starts)
}

/// Suffix array over suffixes truncated at `max_len` symbols or the next separator.
struct TruncatedSuffixArray {
    order: Vec<usize>,
    /// Usable prefix length of each suffix in `order`.
    depth: Vec<usize>,
    /// `lcp[k]` is the common prefix of suffixes `k - 1` and `k`; `lcp[0] = 0`.
    lcp: Vec<usize>,
}

impl TruncatedSuffixArray {
    fn new(text: &[u32], max_len: usize) -> Self {
        let mut depth_at = vec![0usize; text.len()];
        let mut run = 0usize;
        for i in (0..text.len()).rev() {
            run = if text[i] == SEPARATOR { 0 } else { run + 1 };
            depth_at[i] = run.min(max_len);
        }
        let mut order: Vec<usize> = (0..text.len()).filter(|&i| depth_at[i] > 0).collect();
        order.par_sort_unstable_by(|&a, &b| {
            text[a..a + depth_at[a]].cmp(&text[b..b + depth_at[b]])
        });
        let depth: Vec<usize> = order.iter().map(|&i| depth_at[i]).collect();
        let mut lcp = vec![0usize; order.len()];
        for k in 1..order.len() {
            let (a, b) = (order[k - 1], order[k]);
            let lim = depth[k - 1].min(depth[k]);
            lcp[k] = (0..lim).take_while(|&j| text[a + j] == text[b + j]).count();
        }
        TruncatedSuffixArray { order, depth, lcp }
    }
}

/// Every substring of length `<= max_len` occurring in more than `f` places.
///
/// Occurrences are counted at every start position, overlaps included, and
/// never span two sentences.
pub fn count_frequent_substrings(corpus: &CharCorpus, f: usize, max_len: usize) -> Result<CandidateSet> {
    if f < 1 || max_len < 1 {
        return Err(Error::InvalidArgument(format!(
            "mining needs f >= 1 and max_len >= 1 (got f={f}, max_len={max_len})"
        )));
    }
    let (text, _) = concatenate(corpus);
    let sa = TruncatedSuffixArray::new(&text, max_len);
    let n = sa.order.len();

    let per_length: Vec<Vec<(Vec<u32>, usize)>> = (1..=max_len)
        .into_par_iter()
        .map(|len| {
            let mut found = Vec::new();
            let mut k = 0;
            while k < n {
                if sa.depth[k] < len {
                    k += 1;
                    continue;
                }
                let start = k;
                k += 1;
                while k < n && sa.depth[k] >= len && sa.lcp[k] >= len {
                    k += 1;
                }
                let count = k - start;
                if count > f {
                    let pos = sa.order[start];
                    found.push((text[pos..pos + len].to_vec(), count));
                }
            }
            found
        })
        .collect();

    let (patterns, counts) = per_length.into_iter().flatten().unzip();
    let mut out = CandidateSet {
        patterns,
        counts,
        f,
        max_len,
    };
    out.sort();
    Ok(out)
}

/// Start positions (in the concatenated text) of every candidate occurrence.
fn occurrences(cands: &CandidateSet, corpus: &CharCorpus) -> Result<Vec<Vec<usize>>> {
    let mut occ = vec![Vec::new(); cands.len()];
    if cands.is_empty() {
        return Ok(occ);
    }
    let alphabet_size = cands
        .patterns
        .iter()
        .flatten()
        .chain(corpus.sentences.iter().flatten())
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);
    let aut = PatternAutomaton::build(&cands.patterns, alphabet_size)?;
    let (_, starts) = concatenate(corpus);
    for (sentence, &offset) in corpus.sentences.iter().zip(&starts) {
        let states = aut.encode_sentence(sentence)?;
        for (end, &state) in states.iter().enumerate() {
            for &p in aut.pattern_suffixes(state) {
                let len = cands.patterns[p as usize].len();
                occ[p as usize].push(offset + end + 1 - len);
            }
        }
    }
    for o in &mut occ {
        o.sort_unstable();
    }
    Ok(occ)
}

/// Drop every candidate whose occurrences all lie inside occurrences of one
/// longer candidate containing it.
pub fn reduce_candidates(cands: &CandidateSet, corpus: &CharCorpus) -> Result<CandidateSet> {
    let occ = occurrences(cands, corpus)?;
    let index: HashMap<&[u32], usize> = cands
        .patterns
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_slice(), i))
        .collect();

    // containers[alpha] = [(beta, offsets of alpha inside beta)]
    let mut containers: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); cands.len()];
    for (b, beta) in cands.patterns.iter().enumerate() {
        let mut inner: HashMap<usize, Vec<usize>> = HashMap::new();
        for len in 1..beta.len() {
            for k in 0..=beta.len() - len {
                if let Some(&a) = index.get(&beta[k..k + len]) {
                    inner.entry(a).or_default().push(k);
                }
            }
        }
        for (a, offsets) in inner {
            containers[a].push((b, offsets));
        }
    }

    let removable: Vec<bool> = containers
        .par_iter()
        .enumerate()
        .map(|(a, list)| {
            list.iter().any(|(b, offsets)| {
                let outer = &occ[*b];
                occ[a].iter().all(|&p| {
                    offsets
                        .iter()
                        .any(|&k| p >= k && outer.binary_search(&(p - k)).is_ok())
                })
            })
        })
        .collect();

    let mut out = CandidateSet {
        patterns: Vec::new(),
        counts: Vec::new(),
        f: cands.f,
        max_len: cands.max_len,
    };
    for (i, remove) in removable.into_iter().enumerate() {
        if !remove {
            out.patterns.push(cands.patterns[i].clone());
            out.counts.push(cands.counts[i]);
        }
    }
    Ok(out)
}

/// Frequent substrings followed by the reduction.
pub fn mine_patterns(corpus: &CharCorpus, f: usize, max_len: usize) -> Result<CandidateSet> {
    let cands = count_frequent_substrings(corpus, f, max_len)?;
    reduce_candidates(&cands, corpus)
}

/// Write one `escaped-pattern<TAB>count` line per candidate.
pub fn write_patterns<W: Write>(mut w: W, cands: &CandidateSet, alphabet: &Alphabet) -> Result<()> {
    for (p, c) in cands.patterns.iter().zip(&cands.counts) {
        let text = escape_symbols(&alphabet.decode(p)?);
        writeln!(w, "{text}\t{c}").map_err(|e| Error::io("<patterns>", e))?;
    }
    Ok(())
}

/// Read a patterns file back as `(pattern ids, count)` pairs.
pub fn read_patterns<R: BufRead>(r: R, alphabet: &Alphabet) -> Result<Vec<(Vec<u32>, usize)>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<patterns>", e))?;
        if line.is_empty() {
            continue;
        }
        let (text, count) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::Format(format!("patterns line {}: missing count", lineno + 1)))?;
        let count = count
            .parse()
            .map_err(|_| Error::Format(format!("patterns line {}: bad count {count:?}", lineno + 1)))?;
        let ids = unescape_symbols(text)?
            .into_iter()
            .map(|s| {
                alphabet
                    .id_of(s)
                    .ok_or_else(|| Error::Format(format!("patterns line {}: symbol {s} not in alphabet", lineno + 1)))
            })
            .collect::<Result<Vec<u32>>>()?;
        out.push((ids, count));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_from_text, SourceProfile};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn corpus(text: &str) -> (CharCorpus, Alphabet) {
        let mut a = Alphabet::new();
        let c = corpus_from_text(text, SourceProfile::Raw, &mut a);
        (c, a)
    }

    fn naive_counts(corpus: &CharCorpus, f: usize, max_len: usize) -> BTreeMap<Vec<u32>, usize> {
        let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for s in &corpus.sentences {
            for i in 0..s.len() {
                for j in i + 1..=(i + max_len).min(s.len()) {
                    *counts.entry(s[i..j].to_vec()).or_default() += 1;
                }
            }
        }
        counts.retain(|_, c| *c > f);
        counts
    }

    /// Containment oracle straight from the definition: scan every pair.
    fn naive_reduce(corpus: &CharCorpus, cands: &[Vec<u32>]) -> Vec<Vec<u32>> {
        let occurrences = |p: &[u32]| -> Vec<(usize, usize)> {
            let mut v = Vec::new();
            for (si, s) in corpus.sentences.iter().enumerate() {
                for i in 0..s.len() {
                    if s[i..].starts_with(p) {
                        v.push((si, i));
                    }
                }
            }
            v
        };
        cands
            .iter()
            .filter(|alpha| {
                !cands.iter().any(|beta| {
                    beta.len() > alpha.len()
                        && beta.windows(alpha.len()).any(|w| w == alpha.as_slice())
                        && occurrences(alpha).iter().all(|&(si, i)| {
                            occurrences(beta).iter().any(|&(sj, j)| {
                                si == sj && j <= i && i + alpha.len() <= j + beta.len()
                            })
                        })
                })
            })
            .cloned()
            .collect()
    }

    fn as_map(c: &CandidateSet) -> BTreeMap<Vec<u32>, usize> {
        c.patterns.iter().cloned().zip(c.counts.iter().copied()).collect()
    }

    #[test]
    fn abab_counts() {
        let (c, a) = corpus("abab");
        let got = count_frequent_substrings(&c, 1, 4).unwrap();
        let ab = a.encode_str("ab").unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got.count_of(&a.encode_str("a").unwrap()), Some(2));
        assert_eq!(got.count_of(&a.encode_str("b").unwrap()), Some(2));
        assert_eq!(got.count_of(&ab), Some(2));
        let reduced = reduce_candidates(&got, &c).unwrap();
        assert_eq!(reduced.patterns, vec![ab.clone()]);
        assert_eq!(mine_patterns(&c, 1, 4).unwrap().patterns, vec![ab]);
    }

    #[test]
    fn no_repeats_no_candidates() {
        let (c, _) = corpus("abc");
        assert!(count_frequent_substrings(&c, 1, 12).unwrap().is_empty());
    }

    #[test]
    fn unrelated_candidates_survive() {
        let (c, a) = corpus("abcd abcd");
        let cands = CandidateSet {
            patterns: vec![a.encode_str("ab").unwrap(), a.encode_str("cd").unwrap()],
            counts: vec![2, 2],
            f: 1,
            max_len: 12,
        };
        assert_eq!(reduce_candidates(&cands, &c).unwrap(), cands);
    }

    #[test]
    fn partially_covered_candidate_kept() {
        let (c, a) = corpus("ab ac");
        let cands = CandidateSet {
            patterns: vec![a.encode_str("a").unwrap(), a.encode_str("ab").unwrap()],
            counts: vec![2, 1],
            f: 0,
            max_len: 12,
        };
        let reduced = reduce_candidates(&cands, &c).unwrap();
        assert!(reduced.patterns.contains(&a.encode_str("a").unwrap()));
    }

    #[test]
    fn covered_by_double_containment() {
        // every "a" is inside an "aa", though "aa" occurs fewer times than "a"
        let (c, a) = corpus("aa b aa");
        let cands = count_frequent_substrings(&c, 1, 3).unwrap();
        let reduced = reduce_candidates(&cands, &c).unwrap();
        assert!(!reduced.patterns.contains(&a.encode_str("a").unwrap()));
        assert!(reduced.patterns.contains(&a.encode_str("aa").unwrap()));
    }

    #[test]
    fn threshold_above_corpus_size_is_empty() {
        let (c, _) = corpus("the cat sat on the mat\nthe end");
        let total = c.num_symbols();
        assert!(mine_patterns(&c, total, 12).unwrap().is_empty());
    }

    #[test]
    fn occurrences_do_not_cross_sentences() {
        let (c, a) = corpus("ab\nab");
        let got = count_frequent_substrings(&c, 1, 5).unwrap();
        assert!(got.count_of(&a.encode_str("bab").unwrap()).is_none());
        assert_eq!(got.count_of(&a.encode_str("ab").unwrap()), Some(2));
    }

    #[test]
    fn bad_parameters() {
        let (c, _) = corpus("abab");
        assert!(count_frequent_substrings(&c, 0, 3).is_err());
        assert!(count_frequent_substrings(&c, 1, 0).is_err());
    }

    #[test]
    fn patterns_file_roundtrip() {
        let (c, a) = corpus("a\tb a\tb\nx\\y x\\y");
        let cands = mine_patterns(&c, 1, 4).unwrap();
        let mut buf = Vec::new();
        write_patterns(&mut buf, &cands, &a).unwrap();
        let back = read_patterns(buf.as_slice(), &a).unwrap();
        let (p, n): (Vec<_>, Vec<_>) = back.into_iter().unzip();
        assert_eq!(p, cands.patterns);
        assert_eq!(n, cands.counts);
    }

    /// Raising the threshold can expose a pattern whose only covering
    /// super-pattern fell below it, so the mined set is not monotone in `f`.
    #[test]
    fn mined_set_not_monotone_in_threshold() {
        let (c, a) = corpus("aa aa aa b");
        let low = mine_patterns(&c, 2, 3).unwrap();
        let high = mine_patterns(&c, 3, 3).unwrap();
        let single_a = a.encode_str("a").unwrap();
        assert!(!low.patterns.contains(&single_a));
        assert!(high.patterns.contains(&single_a));
        // the frequent-substring stage alone is monotone
        let lo = count_frequent_substrings(&c, 2, 3).unwrap();
        let hi = count_frequent_substrings(&c, 3, 3).unwrap();
        assert!(hi.patterns.iter().all(|p| lo.patterns.contains(p)));
    }

    fn small_corpus() -> impl Strategy<Value = String> {
        proptest::collection::vec("[ab ]{0,30}", 1..6).prop_map(|lines| lines.join("\n"))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn counting_matches_naive(text in small_corpus(), f in 1usize..4, max_len in 1usize..6) {
            let (c, _) = corpus(&text);
            let got = count_frequent_substrings(&c, f, max_len).unwrap();
            prop_assert_eq!(as_map(&got), naive_counts(&c, f, max_len));
        }

        #[test]
        fn reduction_matches_naive(text in small_corpus(), f in 1usize..3) {
            let (c, _) = corpus(&text);
            let cands = count_frequent_substrings(&c, f, 5).unwrap();
            let got = reduce_candidates(&cands, &c).unwrap();
            prop_assert_eq!(got.patterns, naive_reduce(&c, &cands.patterns));
        }

        #[test]
        fn frequent_substrings_monotone_in_f(text in small_corpus(), f in 1usize..4) {
            let (c, _) = corpus(&text);
            let lo = count_frequent_substrings(&c, f, 5).unwrap();
            let hi = count_frequent_substrings(&c, f + 1, 5).unwrap();
            prop_assert!(hi.patterns.iter().all(|p| lo.patterns.contains(p)));
        }
    }
}
