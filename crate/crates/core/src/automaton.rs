//! Finite-state machine over pattern prefixes.
//!
//! States are all prefixes of the generating patterns (the empty prefix is
//! state 0). Reading symbol `a` in state `s` moves to the longest state that
//! is a suffix of `s a`, so after reading a sentence prefix the machine sits
//! in the longest pattern prefix ending there. Construction follows the
//! Aho-Corasick goto/fail scheme, collapsed into a dense transition table.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::{BufRead, Write};

use num_traits::Float;

use crate::corpus::{
    escape_symbols, unescape_symbols, Alphabet, CharCorpus, EncodedCorpus, SubwordKind, WordVocab,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternAutomaton {
    alphabet_size: usize,
    patterns: Vec<Vec<u32>>,
    /// Prefix string of each state, breadth-first (by length, then symbol order).
    states: Vec<Vec<u32>>,
    delta: Vec<u32>,
    suffix_link: Vec<u32>,
    pattern_suffixes: Vec<Vec<u32>>,
}

pub const START: u32 = 0;

impl PatternAutomaton {
    /// Build from patterns over symbol ids `0..alphabet_size`.
    ///
    /// Pattern ids in [`pattern_suffixes`](Self::pattern_suffixes) are indices into `patterns`.
    pub fn build(patterns: &[Vec<u32>], alphabet_size: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in patterns {
            if p.is_empty() {
                return Err(Error::EmptyPattern);
            }
            if let Some(&bad) = p.iter().find(|&&s| s as usize >= alphabet_size) {
                return Err(Error::UnknownSymbol(bad));
            }
            if !seen.insert(p.as_slice()) {
                return Err(Error::DuplicatePattern(format!("{p:?}")));
            }
        }

        // trie with ordered children so the breadth-first numbering is canonical
        let mut children: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new()];
        let mut terminal: Vec<Vec<u32>> = vec![Vec::new()];
        for (pid, p) in patterns.iter().enumerate() {
            let mut node = 0;
            for &a in p {
                let next = children.len();
                node = *children[node].entry(a).or_insert(next);
                if node == next {
                    children.push(BTreeMap::new());
                    terminal.push(Vec::new());
                }
            }
            terminal[node].push(pid as u32);
        }

        let mut order = Vec::with_capacity(children.len());
        let mut parent_edge = vec![(usize::MAX, 0u32); children.len()];
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for (&a, &v) in &children[u] {
                parent_edge[v] = (u, a);
                queue.push_back(v);
            }
        }
        let mut new_id = vec![0u32; children.len()];
        for (i, &u) in order.iter().enumerate() {
            new_id[u] = i as u32;
        }

        let n = order.len();
        let width = alphabet_size;
        let mut states: Vec<Vec<u32>> = Vec::with_capacity(n);
        let mut delta = vec![START; n * width];
        let mut suffix_link = vec![START; n];
        let mut pattern_suffixes: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (i, &u) in order.iter().enumerate() {
            let (parent, a) = parent_edge[u];
            let prefix = if i == 0 {
                Vec::new()
            } else {
                let mut s = states[new_id[parent] as usize].clone();
                s.push(a);
                s
            };
            states.push(prefix);
            if i > 0 {
                let p = new_id[parent] as usize;
                suffix_link[i] = if p == 0 {
                    START
                } else {
                    delta[suffix_link[p] as usize * width + a as usize]
                };
            }
            let link = suffix_link[i] as usize;
            let mut outs = terminal[u].clone();
            if i > 0 {
                outs.extend_from_slice(&pattern_suffixes[link]);
            }
            pattern_suffixes[i] = outs;
            for b in 0..width {
                delta[i * width + b] = match children[u].get(&(b as u32)) {
                    Some(&v) => new_id[v],
                    None if i == 0 => START,
                    None => delta[link * width + b],
                };
            }
        }

        Ok(PatternAutomaton {
            alphabet_size,
            patterns: patterns.to_vec(),
            states,
            delta,
            suffix_link,
            pattern_suffixes,
        })
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn patterns(&self) -> &[Vec<u32>] {
        &self.patterns
    }

    /// The prefix string a state stands for.
    pub fn state(&self, s: u32) -> &[u32] {
        &self.states[s as usize]
    }

    pub fn state_id(&self, prefix: &[u32]) -> Option<u32> {
        self.states.iter().position(|s| s == prefix).map(|i| i as u32)
    }

    #[inline]
    pub fn next(&self, s: u32, a: u32) -> u32 {
        self.delta[s as usize * self.alphabet_size + a as usize]
    }

    /// Transition row of state `s`, indexed by symbol.
    #[inline]
    pub fn row(&self, s: u32) -> &[u32] {
        let w = self.alphabet_size;
        &self.delta[s as usize * w..(s as usize + 1) * w]
    }

    pub fn suffix_link(&self, s: u32) -> u32 {
        self.suffix_link[s as usize]
    }

    /// Ids of generating patterns that are suffixes of state `s`.
    pub fn pattern_suffixes(&self, s: u32) -> &[u32] {
        &self.pattern_suffixes[s as usize]
    }

    /// Per-state weight: the sum of the weights of patterns that are suffixes of the state.
    pub fn state_weights<T: Float>(&self, pattern_weights: &[T]) -> Vec<T> {
        assert_eq!(pattern_weights.len(), self.patterns.len());
        self.pattern_suffixes
            .iter()
            .map(|ps| ps.iter().fold(T::zero(), |acc, &p| acc + pattern_weights[p as usize]))
            .collect()
    }

    /// States after each symbol, starting from the empty prefix.
    pub fn encode_sentence(&self, sentence: &[u32]) -> Result<Vec<u32>> {
        let mut s = START;
        sentence
            .iter()
            .map(|&a| {
                if a as usize >= self.alphabet_size {
                    return Err(Error::UnknownSymbol(a));
                }
                s = self.next(s, a);
                Ok(s)
            })
            .collect()
    }

    /// Write the automaton as sectioned text; states and patterns are stored as strings.
    pub fn write_text<W: Write>(&self, mut w: W, alphabet: &Alphabet) -> Result<()> {
        let io = |e| Error::io("<automaton>", e);
        let line = |ids: &[u32]| -> Result<String> { Ok(escape_symbols(&alphabet.decode(ids)?)) };
        writeln!(w, "# patlm automaton v1").map_err(io)?;
        writeln!(w, "[alphabet]\n{}", alphabet.len()).map_err(io)?;
        for (i, s) in alphabet.symbols().iter().enumerate() {
            writeln!(w, "{i}\t{}", escape_symbols(&[*s])).map_err(io)?;
        }
        writeln!(w, "[patterns]\n{}", self.patterns.len()).map_err(io)?;
        for (i, p) in self.patterns.iter().enumerate() {
            writeln!(w, "{i}\t{}", line(p)?).map_err(io)?;
        }
        writeln!(w, "[states]\n{}", self.states.len()).map_err(io)?;
        for (i, s) in self.states.iter().enumerate() {
            writeln!(w, "{i}\t{}", line(s)?).map_err(io)?;
        }
        writeln!(w, "[delta]\n{} {}", self.states.len(), self.alphabet_size).map_err(io)?;
        for s in 0..self.states.len() {
            let row: Vec<String> = self.row(s as u32).iter().map(u32::to_string).collect();
            writeln!(w, "{}", row.join(" ")).map_err(io)?;
        }
        writeln!(w, "[suffix_links]\n{}", self.states.len()).map_err(io)?;
        let links: Vec<String> = self.suffix_link.iter().map(u32::to_string).collect();
        writeln!(w, "{}", links.join(" ")).map_err(io)?;
        Ok(())
    }

    /// Read an automaton written by [`write_text`](Self::write_text), re-interning
    /// its strings into `alphabet` and checking the stored table against a rebuild.
    pub fn read_text<R: BufRead>(r: R, alphabet: &Alphabet) -> Result<Self> {
        let lines: Vec<String> = r
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io("<automaton>", e))?;
        let mut cursor = lines.iter().filter(|l| !l.starts_with('#'));
        let fmt = |m: &str| Error::Format(format!("automaton: {m}"));

        let mut section = |name: &str| -> Result<(String, Vec<String>)> {
            let header = cursor.next().ok_or_else(|| fmt(&format!("missing [{name}]")))?;
            if header != &format!("[{name}]") {
                return Err(fmt(&format!("expected [{name}], found {header:?}")));
            }
            let size_line = cursor.next().ok_or_else(|| fmt("missing size"))?.clone();
            let rows: usize = match name {
                "suffix_links" => 1,
                "delta" => size_line
                    .split(' ')
                    .next()
                    .and_then(|x| x.parse().ok())
                    .ok_or_else(|| fmt("bad delta size"))?,
                _ => size_line.parse().map_err(|_| fmt("bad section size"))?,
            };
            let body = (0..rows)
                .map(|_| cursor.next().cloned().ok_or_else(|| fmt(&format!("truncated [{name}]"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((size_line, body))
        };
        let strings = |body: &[String]| -> Result<Vec<Vec<crate::corpus::Symbol>>> {
            body.iter()
                .enumerate()
                .map(|(i, l)| {
                    let (id, text) = l.split_once('\t').ok_or_else(|| fmt("missing id column"))?;
                    if id.parse::<usize>().ok() != Some(i) {
                        return Err(fmt(&format!("row {i} has id {id:?}")));
                    }
                    unescape_symbols(text)
                })
                .collect()
        };

        let (_, alpha_body) = section("alphabet")?;
        let stored_alphabet: Vec<crate::corpus::Symbol> =
            strings(&alpha_body)?.into_iter().flatten().collect();
        let (_, pat_body) = section("patterns")?;
        let (_, state_body) = section("states")?;
        let (delta_size, delta_body) = section("delta")?;
        let (_, link_body) = section("suffix_links")?;

        let to_ids = |syms: Vec<crate::corpus::Symbol>| -> Result<Vec<u32>> {
            syms.into_iter()
                .map(|s| alphabet.id_of(s).ok_or_else(|| fmt(&format!("symbol {s} not in alphabet"))))
                .collect()
        };
        let patterns = strings(&pat_body)?
            .into_iter()
            .map(to_ids)
            .collect::<Result<Vec<_>>>()?;
        let aut = Self::build(&patterns, alphabet.len())?;

        let stored_states = strings(&state_body)?
            .into_iter()
            .map(to_ids)
            .collect::<Result<Vec<_>>>()?;
        let mut index = HashMap::new();
        for (i, s) in stored_states.iter().enumerate() {
            let new = aut.state_id(s).ok_or_else(|| fmt("stored state is not a pattern prefix"))?;
            index.insert(i, new);
        }
        if stored_states.len() != aut.num_states() {
            return Err(fmt("state count differs from the pattern prefix closure"));
        }
        let cols: usize = delta_size
            .split(' ')
            .nth(1)
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| fmt("bad delta size"))?;
        if cols != stored_alphabet.len() {
            return Err(fmt("delta width differs from stored alphabet"));
        }
        for (i, row) in delta_body.iter().enumerate() {
            let ids: Vec<usize> = row
                .split(' ')
                .map(|x| x.parse().map_err(|_| fmt("bad delta entry")))
                .collect::<Result<_>>()?;
            if ids.len() != cols {
                return Err(fmt("delta row has wrong width"));
            }
            for (col, &target) in ids.iter().enumerate() {
                let Some(a) = alphabet.id_of(stored_alphabet[col]) else { continue };
                let expected = aut.next(index[&i], a);
                if index.get(&target) != Some(&expected) {
                    return Err(fmt("transition table disagrees with the patterns"));
                }
            }
        }
        let links: Vec<usize> = link_body[0]
            .split(' ')
            .filter(|x| !x.is_empty())
            .map(|x| x.parse().map_err(|_| fmt("bad suffix link")))
            .collect::<Result<_>>()?;
        for (i, &l) in links.iter().enumerate() {
            if index.get(&l) != Some(&aut.suffix_link(index[&i])) {
                return Err(fmt("suffix links disagree with the patterns"));
            }
        }
        Ok(aut)
    }
}

/// Build over an [`Alphabet`].
pub fn build_automaton(patterns: &[Vec<u32>], alphabet: &Alphabet) -> Result<PatternAutomaton> {
    PatternAutomaton::build(patterns, alphabet.len())
}

/// Rewrite every word as the slice of its sentence's state stream.
pub fn encode_words(
    aut: &PatternAutomaton,
    corpus: &CharCorpus,
    alphabet: &Alphabet,
    vocab: &WordVocab,
) -> Result<EncodedCorpus> {
    if aut.alphabet_size() != alphabet.len() {
        return Err(Error::InvalidArgument(format!(
            "automaton built over {} symbols, alphabet has {}",
            aut.alphabet_size(),
            alphabet.len()
        )));
    }
    EncodedCorpus::from_streams(corpus, alphabet, vocab, SubwordKind::Patterns, aut.num_states(), |i| {
        aut.encode_sentence(&corpus.sentences[i])
    })
}
