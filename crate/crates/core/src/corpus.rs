//! Corpus loading, alphabets, word vocabularies and encoded token streams.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One character-level symbol.
///
/// `Unk` stands for the whole PTB `<unk>` token so that it counts as a single
/// character rather than five.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Char(char),
    Unk,
}

impl Symbol {
    /// Text the symbol stands for in the original corpus.
    pub fn surface(self) -> String {
        match self {
            Symbol::Char(c) => c.to_string(),
            Symbol::Unk => UNK_TOKEN.to_string(),
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&escape_symbols(&[*self]))
    }
}

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

/// Escape a symbol sequence into a single tab- and newline-free line.
///
/// Backslash, tab, newline and carriage return are backslash-escaped; the
/// reserved unknown-word symbol is written `\U`.
pub fn escape_symbols(symbols: &[Symbol]) -> String {
    let mut out = String::with_capacity(symbols.len());
    for s in symbols {
        match s {
            Symbol::Unk => out.push_str("\\U"),
            Symbol::Char('\\') => out.push_str("\\\\"),
            Symbol::Char('\t') => out.push_str("\\t"),
            Symbol::Char('\n') => out.push_str("\\n"),
            Symbol::Char('\r') => out.push_str("\\r"),
            Symbol::Char(c) => out.push(*c),
        }
    }
    out
}

pub fn unescape_symbols(text: &str) -> Result<Vec<Symbol>> {
    let mut out = Vec::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(Symbol::Char(c));
            continue;
        }
        let sym = match chars.next() {
            Some('U') => Symbol::Unk,
            Some('\\') => Symbol::Char('\\'),
            Some('t') => Symbol::Char('\t'),
            Some('n') => Symbol::Char('\n'),
            Some('r') => Symbol::Char('\r'),
            other => {
                return Err(Error::Format(format!(
                    "bad escape sequence \\{} in {text:?}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        };
        out.push(sym);
    }
    Ok(out)
}

/// Dense bijection between symbols and ids `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<Symbol>,
    ids: HashMap<Symbol, u32>,
}

impl Alphabet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_symbols(symbols: impl IntoIterator<Item = Symbol>) -> Result<Self> {
        let mut alphabet = Self::new();
        for s in symbols {
            if alphabet.id_of(s).is_some() {
                return Err(Error::Format(format!("duplicate alphabet symbol {s}")));
            }
            alphabet.intern(s);
        }
        Ok(alphabet)
    }

    /// Alphabet over the characters of `text`, in order of first appearance.
    pub fn from_chars(text: &str) -> Self {
        let mut alphabet = Self::new();
        for c in text.chars() {
            alphabet.intern(Symbol::Char(c));
        }
        alphabet
    }

    pub fn intern(&mut self, symbol: Symbol) -> u32 {
        if let Some(&id) = self.ids.get(&symbol) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(symbol);
        self.ids.insert(symbol, id);
        id
    }

    pub fn id_of(&self, symbol: Symbol) -> Option<u32> {
        self.ids.get(&symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<Symbol> {
        self.symbols.get(id as usize).copied()
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Map a string of plain characters to ids, failing on characters outside the alphabet.
    pub fn encode_str(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.id_of(Symbol::Char(c))
                    .ok_or_else(|| Error::InvalidArgument(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<Symbol>> {
        ids.iter()
            .map(|&id| self.symbol(id).ok_or(Error::UnknownSymbol(id)))
            .collect()
    }

    /// Surface text of a symbol-id sequence.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        Ok(self.decode(ids)?.into_iter().map(Symbol::surface).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceProfile {
    /// Mikolov-preprocessed PTB: `<unk>` is one symbol, an end-of-sentence word is appended per line.
    Ptb,
    /// WikiText-2: equality-sign runs are collapsed, nothing is appended.
    Wikitext2,
    Raw,
}

impl SourceProfile {
    pub fn appends_eos(self) -> bool {
        matches!(self, SourceProfile::Ptb)
    }
}

impl std::str::FromStr for SourceProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ptb" => Ok(SourceProfile::Ptb),
            "wikitext2" => Ok(SourceProfile::Wikitext2),
            "raw" => Ok(SourceProfile::Raw),
            other => Err(Error::InvalidArgument(format!("unknown profile {other:?}"))),
        }
    }
}

/// Half-open `[start, end)` range of symbol positions holding one word.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharCorpus {
    pub sentences: Vec<Vec<u32>>,
    pub word_spans: Vec<Vec<Span>>,
    pub profile: SourceProfile,
}

impl CharCorpus {
    pub fn num_symbols(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn num_words(&self) -> usize {
        self.word_spans.iter().map(Vec::len).sum()
    }

    /// Iterate over every word as a slice of symbol ids.
    pub fn words(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.sentences
            .iter()
            .zip(&self.word_spans)
            .flat_map(|(sent, spans)| spans.iter().map(move |&(s, e)| &sent[s..e]))
    }
}

/// Collapse the spaces inside runs of equality signs (`= =` and `= = =`).
///
/// A single space is dropped whenever both of its neighbours are `=`; this is
/// the fixed point of rewriting `= = =` to `===` and `= =` to `==`.
pub fn wikitext_normalize(line: &str) -> String {
    let chars: Vec<char> = line.chars().collect();
    let mut out = String::with_capacity(line.len());
    for (i, &c) in chars.iter().enumerate() {
        let between_equals =
            c == ' ' && i > 0 && chars[i - 1] == '=' && chars.get(i + 1) == Some(&'=');
        if !between_equals {
            out.push(c);
        }
    }
    out
}

/// Split one normalized line into symbols and word spans, interning into `alphabet`.
pub fn tokenize_line(
    line: &str,
    profile: SourceProfile,
    alphabet: &mut Alphabet,
) -> (Vec<u32>, Vec<Span>) {
    let mut symbols = Vec::with_capacity(line.len());
    let mut spans = Vec::new();
    let mut rest = line;
    while !rest.is_empty() {
        let ws_len = rest
            .find(|c: char| !c.is_whitespace())
            .unwrap_or(rest.len());
        for c in rest[..ws_len].chars() {
            symbols.push(alphabet.intern(Symbol::Char(c)));
        }
        rest = &rest[ws_len..];
        if rest.is_empty() {
            break;
        }
        let word_len = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let word = &rest[..word_len];
        let start = symbols.len();
        if profile == SourceProfile::Ptb && word == UNK_TOKEN {
            symbols.push(alphabet.intern(Symbol::Unk));
        } else {
            for c in word.chars() {
                symbols.push(alphabet.intern(Symbol::Char(c)));
            }
        }
        spans.push((start, symbols.len()));
        rest = &rest[word_len..];
    }
    (symbols, spans)
}

/// Build a corpus from in-memory text with one sentence per line.
pub fn corpus_from_text(text: &str, profile: SourceProfile, alphabet: &mut Alphabet) -> CharCorpus {
    let mut sentences = Vec::new();
    let mut word_spans = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if !text.is_empty() {
        for raw in body.split('\n') {
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            let line = match profile {
                SourceProfile::Wikitext2 => wikitext_normalize(raw),
                _ => raw.to_string(),
            };
            let (symbols, spans) = tokenize_line(&line, profile, alphabet);
            sentences.push(symbols);
            word_spans.push(spans);
        }
    }
    CharCorpus {
        sentences,
        word_spans,
        profile,
    }
}

/// Load a UTF-8 corpus file, one sentence per line.
pub fn load_corpus(
    path: impl AsRef<Path>,
    profile: SourceProfile,
    alphabet: &mut Alphabet,
) -> Result<CharCorpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::InvalidUtf8 {
        path: path.to_path_buf(),
        position: e.valid_up_to(),
    })?;
    Ok(corpus_from_text(text, profile, alphabet))
}

/// Smallest `n` such that at least `p` percent of word tokens have length `<= n`.
pub fn word_length_percentile(corpus: &CharCorpus, p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside (0, 100]")));
    }
    let mut lengths: Vec<usize> = corpus.words().map(<[u32]>::len).collect();
    if lengths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    lengths.sort_unstable();
    let total = lengths.len() as f64;
    let idx = lengths
        .iter()
        .enumerate()
        .position(|(i, _)| (i + 1) as f64 * 100.0 >= p * total)
        .unwrap_or(lengths.len() - 1);
    Ok(lengths[idx])
}

/// Word-type vocabulary with a reserved unknown id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    unk: u32,
    eos: Option<u32>,
}

impl WordVocab {
    pub fn from_words(words: Vec<String>, eos: bool) -> Result<Self> {
        let mut vocab = Self::empty(eos);
        for w in words {
            if w == UNK_TOKEN || (eos && w == EOS_TOKEN) {
                continue;
            }
            vocab.add(w);
        }
        Ok(vocab)
    }

    fn empty(eos: bool) -> Self {
        let mut vocab = WordVocab {
            words: Vec::new(),
            index: HashMap::new(),
            unk: 0,
            eos: None,
        };
        vocab.add(UNK_TOKEN.to_string());
        if eos {
            vocab.eos = Some(vocab.add(EOS_TOKEN.to_string()));
        }
        vocab
    }

    fn add(&mut self, word: String) -> u32 {
        if let Some(&id) = self.index.get(&word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.index.insert(word.clone(), id);
        self.words.push(word);
        id
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    /// Id of `word`, falling back to the unknown id.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(self.unk)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    pub fn eos(&self) -> Option<u32> {
        self.eos
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut vocab: WordVocab =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        vocab.rebuild_index();
        Ok(vocab)
    }
}

/// One id per distinct word string in `corpus`, in order of first appearance.
pub fn build_word_vocab(corpus: &CharCorpus, alphabet: &Alphabet) -> Result<WordVocab> {
    let eos = corpus.profile.appends_eos() && !corpus.sentences.is_empty();
    let mut vocab = WordVocab::empty(eos);
    for word in corpus.words() {
        let text = alphabet.detokenize(word)?;
        if text != UNK_TOKEN {
            vocab.add(text);
        }
    }
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubwordKind {
    Chars,
    Patterns,
}

/// A word-token stream where every token carries its subword id sequence.
///
/// Subword ids index the input alphabet: characters or automaton states.  When
/// the source appends end-of-sentence words, those tokens use the extra input
/// id `input_size - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedCorpus {
    pub kind: SubwordKind,
    pub input_size: usize,
    pub vocab_size: usize,
    words: Vec<u32>,
    offsets: Vec<u32>,
    subwords: Vec<u32>,
}

impl EncodedCorpus {
    /// Assemble a token stream from per-sentence subword streams.
    ///
    /// `stream(i)` must return one subword id per symbol of sentence `i`; the
    /// word tokens are sliced out of it along the word spans.
    pub fn from_streams(
        corpus: &CharCorpus,
        alphabet: &Alphabet,
        vocab: &WordVocab,
        kind: SubwordKind,
        base_input_size: usize,
        mut stream: impl FnMut(usize) -> Result<Vec<u32>>,
    ) -> Result<Self> {
        let eos = if corpus.profile.appends_eos() {
            Some(vocab.eos().ok_or_else(|| {
                Error::VocabMismatch("corpus appends end-of-sentence but vocabulary has none".into())
            })?)
        } else {
            None
        };
        let input_size = base_input_size + usize::from(eos.is_some());
        let mut out = EncodedCorpus {
            kind,
            input_size,
            vocab_size: vocab.len(),
            words: Vec::new(),
            offsets: vec![0],
            subwords: Vec::new(),
        };
        for (i, (sentence, spans)) in corpus.sentences.iter().zip(&corpus.word_spans).enumerate() {
            let states = stream(i)?;
            debug_assert_eq!(states.len(), sentence.len());
            for &(s, e) in spans {
                let text = alphabet.detokenize(&sentence[s..e])?;
                out.push(vocab.id(&text), &states[s..e]);
            }
            if let Some(eos) = eos {
                out.push(eos, &[base_input_size as u32]);
            }
        }
        Ok(out)
    }

    fn push(&mut self, word: u32, subwords: &[u32]) {
        self.words.push(word);
        self.subwords.extend_from_slice(subwords);
        self.offsets.push(self.subwords.len() as u32);
    }

    /// Build directly from `(word, subwords)` pairs.
    pub fn from_tokens<'a>(
        kind: SubwordKind,
        input_size: usize,
        vocab_size: usize,
        tokens: impl IntoIterator<Item = (u32, &'a [u32])>,
    ) -> Result<Self> {
        let mut out = EncodedCorpus {
            kind,
            input_size,
            vocab_size,
            words: Vec::new(),
            offsets: vec![0],
            subwords: Vec::new(),
        };
        for (w, sub) in tokens {
            if w as usize >= vocab_size {
                return Err(Error::OutOfRange {
                    index: w as usize,
                    size: vocab_size,
                });
            }
            if let Some(&bad) = sub.iter().find(|&&s| s as usize >= input_size) {
                return Err(Error::OutOfRange {
                    index: bad as usize,
                    size: input_size,
                });
            }
            out.push(w, sub);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, i: usize) -> u32 {
        self.words[i]
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn subwords(&self, i: usize) -> &[u32] {
        &self.subwords[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    /// Contiguous sub-stream of tokens `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> EncodedCorpus {
        let mut out = EncodedCorpus {
            kind: self.kind,
            input_size: self.input_size,
            vocab_size: self.vocab_size,
            words: Vec::with_capacity(range.len()),
            offsets: vec![0],
            subwords: Vec::new(),
        };
        for i in range {
            out.push(self.words[i], self.subwords(i));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("encoded corpus serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let out: EncodedCorpus =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("encoded corpus: {e}")))?;
        if out.offsets.len() != out.words.len() + 1
            || out.offsets.last().copied() != Some(out.subwords.len() as u32)
        {
            return Err(Error::Format("encoded corpus: inconsistent offsets".into()));
        }
        Ok(out)
    }
}

/// Character-level encoding: every word is its own symbol id sequence.
pub fn encode_chars(corpus: &CharCorpus, alphabet: &Alphabet, vocab: &WordVocab) -> Result<EncodedCorpus> {
    EncodedCorpus::from_streams(corpus, alphabet, vocab, SubwordKind::Chars, alphabet.len(), |i| {
        Ok(corpus.sentences[i].clone())
    })
}
