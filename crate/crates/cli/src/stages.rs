//! One function per subcommand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use patlm::automaton::{build_automaton, encode_words, PatternAutomaton};
use patlm::corpus::{
    build_word_vocab, encode_chars, load_corpus, word_length_percentile, Alphabet, CharCorpus, EncodedCorpus,
    SubwordKind,
};
use patlm::crf::{train_crf, PatternTable};
use patlm::evaluator::{evaluate, gate_stats};
use patlm::lm::{Composition, LanguageModel, LmConfig};
use patlm::mining::{mine_patterns, read_patterns, write_patterns};
use patlm::owlqn::OwlqnConfig;
use patlm::synth::{generate, SynthConfig};
use patlm::trainer::{init_params, train, write_metrics, TrainConfig};
use patlm::Scalar;

use crate::config::{Loaded, Precision, Split};
use crate::failure::Failure;
use crate::manifest::{self, Recorder};

/// Percentile of training word lengths used as the Concat pad length.
const PAD_PERCENTILE: f64 = 95.0;

fn create(l: &Loaded, shown: &Path) -> Result<(PathBuf, BufWriter<File>), Failure> {
    let actual = l.path(shown);
    if let Some(dir) = actual.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::output(dir, &e))?;
    }
    let f = File::create(&actual).map_err(|e| Failure::output(&actual, &e))?;
    Ok((actual, BufWriter::new(f)))
}

fn flush(path: &Path, mut w: BufWriter<File>) -> Result<(), Failure> {
    w.flush().map_err(|e| Failure::output(path, &e))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::input(path, &e))
}

fn recorder(l: &Loaded, stage: &'static str) -> Recorder {
    Recorder::new(stage, l.hash(), l.config.seed)
}

/// Record `shown` as an input after checking it against its manifest.
fn input(l: &Loaded, rec: &mut Recorder, shown: &Path) -> Result<PathBuf, Failure> {
    let actual = l.path(shown);
    rec.input(shown, &actual)?;
    Ok(actual)
}

/// Load the three splits into one alphabet, training split first.
fn load_data(l: &Loaded, rec: &mut Recorder) -> Result<(Alphabet, Vec<CharCorpus>), Failure> {
    let d = &l.config.data;
    let mut alphabet = Alphabet::new();
    let mut out = Vec::with_capacity(3);
    for shown in [&d.train, &d.valid, &d.test] {
        let path = input(l, rec, shown)?;
        out.push(load_corpus(&path, d.profile, &mut alphabet)?);
    }
    if out[0].num_words() == 0 {
        return Err(patlm::Error::EmptyCorpus.into());
    }
    Ok((alphabet, out))
}

fn count(n: usize) -> toml::Value {
    toml::Value::Integer(n as i64)
}

pub fn synth(l: &Loaded) -> Result<(), Failure> {
    let s = &l.config.synth;
    let cfg = SynthConfig {
        seed: l.config.seed,
        tokens: s.tokens,
        roots: s.roots,
        root_classes: s.root_classes,
        function_words: s.function_words,
        zipf: s.zipf,
        fidelity: s.fidelity,
        min_pairs: s.min_pairs,
        max_pairs: s.max_pairs,
        valid_fraction: s.valid_fraction,
        test_fraction: s.test_fraction,
    };
    let corpus = generate(&cfg)?;
    let mut rec = recorder(l, "synth");
    for (name, text) in [("train", &corpus.train), ("valid", &corpus.valid), ("test", &corpus.test)] {
        let shown = s.dir.join(format!("{name}.txt"));
        let (actual, mut w) = create(l, &shown)?;
        w.write_all(text.as_bytes()).map_err(|e| Failure::output(&actual, &e))?;
        flush(&actual, w)?;
        rec.output(&shown, &actual);
        rec.scalar(&format!("tokens_{name}"), count(text.split_whitespace().count()));
    }
    rec.scalar("suffixes", corpus.suffixes.clone());
    rec.scalar("roots", count(corpus.roots.len()));
    rec.scalar("function_words", count(corpus.function_words.len()));
    println!("synth: wrote {}", s.dir.display());
    rec.finish()
}

pub fn mine(l: &Loaded) -> Result<(), Failure> {
    let m = &l.config.mine;
    let mut rec = recorder(l, "mine");
    let (alphabet, data) = load_data(l, &mut rec)?;
    let cands = mine_patterns(&data[0], m.f, m.l_max)?;
    let (actual, mut w) = create(l, &m.output)?;
    write_patterns(&mut w, &cands, &alphabet)?;
    flush(&actual, w)?;
    rec.output(&m.output, &actual);
    rec.scalar("alphabet", count(alphabet.len()));
    rec.scalar("candidates", count(cands.len()));
    rec.scalar("f", count(m.f));
    rec.scalar("L_max", count(m.l_max));
    rec.scalar("train_symbols", count(data[0].num_symbols()));
    println!("mine: |A|={} |candidates|={}", alphabet.len(), cands.len());
    rec.finish()
}

pub fn train_crf_stage(l: &Loaded) -> Result<(), Failure> {
    let c = &l.config.crf;
    let mut rec = recorder(l, "train-crf");
    let (alphabet, data) = load_data(l, &mut rec)?;
    let path = input(l, &mut rec, &l.config.mine.output)?;
    let patterns: Vec<Vec<u32>> = read_patterns(open(&path)?, &alphabet)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let opt = OwlqnConfig {
        memory: c.m,
        max_iter: c.max_iter,
        grad_tol: c.grad_tol,
        rel_tol: c.rel_tol,
        progress_window: c.progress_window,
        ..OwlqnConfig::default()
    };
    let n_cands = patterns.len();
    let (table, report) = train_crf(&data[0], alphabet.len(), patterns, c.c, &opt)?;
    if !report.objective.is_finite() {
        return Err(Failure::numeric("CRF objective is not finite"));
    }
    let (actual, mut w) = create(l, &c.output)?;
    table.write_tsv(&mut w, &alphabet)?;
    flush(&actual, w)?;
    rec.output(&c.output, &actual);
    let selected = table.select_patterns().len();
    rec.scalar("alphabet", count(alphabet.len()));
    rec.scalar("candidates", count(n_cands));
    rec.scalar("selected", count(selected));
    rec.scalar("C", c.c);
    rec.scalar("m", count(c.m));
    rec.scalar("grad_tol", c.grad_tol);
    rec.scalar("rel_tol", c.rel_tol);
    rec.scalar("max_iter", count(c.max_iter));
    rec.scalar("iterations", count(report.iterations));
    rec.scalar("converged", report.converged);
    rec.scalar("line_search_failed", report.line_search_failed);
    rec.scalar("objective", report.objective);
    rec.scalar("length_one_patterns_included", true);
    println!(
        "train-crf: |candidates|={n_cands} |selected|={selected} iterations={} converged={}",
        report.iterations, report.converged
    );
    rec.finish()
}

pub fn build_automaton_stage(l: &Loaded) -> Result<(), Failure> {
    let out = &l.config.automaton.output;
    let mut rec = recorder(l, "build-automaton");
    let (alphabet, _) = load_data(l, &mut rec)?;
    let path = input(l, &mut rec, &l.config.crf.output)?;
    let table = PatternTable::<f64>::read_tsv(open(&path)?, &alphabet, l.config.crf.c)?;
    let selected = table.select_patterns();
    let aut = build_automaton(&selected, &alphabet)?;
    let (actual, mut w) = create(l, out)?;
    aut.write_text(&mut w, &alphabet)?;
    flush(&actual, w)?;
    rec.output(out, &actual);
    rec.scalar("alphabet", count(alphabet.len()));
    rec.scalar("selected", count(selected.len()));
    rec.scalar("states", count(aut.num_states()));
    println!("build-automaton: |patterns|={} |S|={}", selected.len(), aut.num_states());
    rec.finish()
}

pub fn encode(l: &Loaded) -> Result<(), Failure> {
    let e = &l.config.encode;
    let mut rec = recorder(l, "encode");
    let (alphabet, data) = load_data(l, &mut rec)?;
    let vocab = build_word_vocab(&data[0], &alphabet)?;
    let aut = match e.kind {
        SubwordKind::Patterns => {
            let path = input(l, &mut rec, &l.config.automaton.output)?;
            Some(PatternAutomaton::read_text(open(&path)?, &alphabet)?)
        }
        SubwordKind::Chars => None,
    };
    let n = word_length_percentile(&data[0], PAD_PERCENTILE)?;
    for (split, corpus) in Split::ALL.iter().zip(&data) {
        let encoded = match &aut {
            Some(aut) => encode_words(aut, corpus, &alphabet, &vocab)?,
            None => encode_chars(corpus, &alphabet, &vocab)?,
        };
        let shown = e.split_path(*split);
        let (actual, mut w) = create(l, &shown)?;
        w.write_all(encoded.to_json().as_bytes())
            .map_err(|err| Failure::output(&actual, &err))?;
        flush(&actual, w)?;
        rec.output(&shown, &actual);
        rec.scalar(&format!("tokens_{}", split.name()), count(encoded.len()));
        if *split == Split::Train {
            rec.scalar("input_size", count(encoded.input_size));
        }
    }
    let kind = match e.kind {
        SubwordKind::Patterns => "patterns",
        SubwordKind::Chars => "chars",
    };
    rec.scalar("kind", kind);
    rec.scalar("alphabet", count(alphabet.len()));
    rec.scalar("vocab", count(vocab.len()));
    rec.scalar("n", count(n));
    if let Some(aut) = &aut {
        rec.scalar("states", count(aut.num_states()));
    }
    println!("encode: kind={kind} |W|={} n={n}", vocab.len());
    rec.finish()
}

fn read_encoded(l: &Loaded, rec: &mut Recorder, split: Split) -> Result<EncodedCorpus, Failure> {
    let shown = l.config.encode.split_path(split);
    let path = input(l, rec, &shown)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::input(&path, &e))?;
    Ok(EncodedCorpus::from_json(&text)?)
}

/// Pad length from the config, or else the one recorded when the corpus was encoded.
fn pad_len(l: &Loaded) -> Result<usize, Failure> {
    if l.config.lm.n > 0 {
        return Ok(l.config.lm.n);
    }
    let mpath = manifest::manifest_path(&l.path(&l.config.encode.split_path(Split::Train)));
    let m = manifest::read(&mpath).map_err(|_| Failure::config("lm.n is 0 and no encode manifest records n"))?;
    m.scalars
        .get("n")
        .and_then(toml::Value::as_integer)
        .map(|v| v as usize)
        .ok_or_else(|| Failure::config("encode manifest has no n"))
}

fn lm_config(l: &Loaded, corpus: &EncodedCorpus, n: usize) -> Result<LmConfig, Failure> {
    let s = &l.config.lm;
    let mut cfg = LmConfig::recipe(s.composition, corpus.kind, s.size, corpus.input_size, corpus.vocab_size, n);
    if s.d_lm > 0 {
        cfg.d_lm = s.d_lm;
        if s.composition != Composition::Cnn {
            cfg.d_hw = s.d_lm;
        }
        if s.composition == Composition::Sum {
            cfg.d_x = s.d_lm;
        }
    }
    if !s.cnn_widths.is_empty() {
        cfg.cnn_widths = s.cnn_widths.clone();
    }
    if !s.cnn_depths.is_empty() {
        cfg.cnn_depths = s.cnn_depths.clone();
    }
    if s.composition == Composition::Cnn {
        cfg.d_hw = cfg.cnn_depths.iter().sum();
    }
    if s.d_hw > 0 {
        cfg.d_hw = s.d_hw;
        if s.composition == Composition::Sum && s.d_x == 0 {
            cfg.d_x = s.d_hw;
        }
    }
    if s.d_x > 0 {
        cfg.d_x = s.d_x;
    }
    cfg.highway_layers = s.highway_layers;
    cfg.lstm_layers = s.lstm_layers;
    for (rate, slot) in [
        (s.dropout_embedding, &mut cfg.dropout.embedding),
        (s.dropout_gate_input, &mut cfg.dropout.gate_input),
        (s.dropout_hidden, &mut cfg.dropout.hidden),
        (s.dropout_output, &mut cfg.dropout.output),
    ] {
        if rate >= 0.0 {
            *slot = rate;
        }
    }
    cfg.validate()?;
    if s.budget > 0 {
        cfg = cfg.fit_budget(s.budget)?;
    }
    Ok(cfg)
}

pub fn train_lm(l: &Loaded) -> Result<(), Failure> {
    match l.config.lm.precision {
        Precision::F32 => train_lm_typed::<f32>(l),
        Precision::F64 => train_lm_typed::<f64>(l),
    }
}

fn train_lm_typed<T: Scalar>(l: &Loaded) -> Result<(), Failure> {
    let s = &l.config.lm;
    let t = &l.config.train;
    let mut rec = recorder(l, "train-lm");
    let train_corpus = read_encoded(l, &mut rec, Split::Train)?;
    let valid_corpus = read_encoded(l, &mut rec, Split::Valid)?;
    let n = pad_len(l)?;
    let cfg = lm_config(l, &train_corpus, n)?;
    let tc = TrainConfig {
        bptt: t.bptt,
        batch: t.batch,
        lr: t.lr,
        epochs: t.epochs,
        init_range: t.init_range,
        forget_bias: t.forget_bias,
        transform_bias: t.transform_bias,
        clip: t.clip,
        seed: l.config.seed,
    };
    let model = LanguageModel::new(cfg.clone(), init_params::<T>(&cfg, &tc)?)?;
    println!("train-lm: {} parameters", cfg.param_count());
    let outcome = train(model, &train_corpus, &valid_corpus, &tc, |m, _| {
        println!(
            "epoch {} lr {} train_ppl {:.3} valid_ppl {:.3} clips {} seconds {:.1}",
            m.epoch, m.lr, m.train_ppl, m.valid_ppl, m.grad_clip_events, m.wall_seconds
        );
    })?;

    let (ckpt, mut w) = create(l, &s.checkpoint)?;
    outcome.best.save(&mut w)?;
    flush(&ckpt, w)?;
    rec.output(&s.checkpoint, &ckpt);
    let (metrics, mut w) = create(l, &s.metrics)?;
    write_metrics(&mut w, &outcome.history)?;
    flush(&metrics, w)?;

    rec.scalar("params", count(cfg.param_count()));
    rec.scalar("n", count(n));
    rec.scalar("d_LM", count(cfg.d_lm));
    rec.scalar("d_HW", count(cfg.d_hw));
    rec.scalar("d_X", count(cfg.d_x));
    rec.scalar("epochs_run", count(outcome.history.len()));
    rec.scalar("best_epoch", count(outcome.best_epoch));
    rec.scalar("best_valid_ppl", outcome.best_valid_ppl);
    if let Some(e) = outcome.diverged_at {
        rec.scalar("diverged_at", count(e));
    }
    rec.finish()?;
    match outcome.diverged_at {
        Some(e) => Err(Failure::numeric(format!(
            "training diverged at epoch {e}; kept the checkpoint of epoch {}",
            outcome.best_epoch
        ))),
        None => {
            println!(
                "train-lm: best epoch {} valid_ppl {:.3}",
                outcome.best_epoch, outcome.best_valid_ppl
            );
            Ok(())
        }
    }
}

fn load_model(l: &Loaded, rec: &mut Recorder) -> Result<LanguageModel<f64>, Failure> {
    let path = input(l, rec, &l.config.lm.checkpoint)?;
    Ok(LanguageModel::<f64>::load(open(&path)?)?)
}

pub fn eval_lm(l: &Loaded) -> Result<(), Failure> {
    let e = &l.config.eval;
    let mut rec = recorder(l, "eval-lm");
    let model = load_model(l, &mut rec)?;
    let corpus = read_encoded(l, &mut rec, e.split)?;
    let report = evaluate(&model, &corpus)?;
    if !report.perplexity.is_finite() {
        return Err(Failure::numeric("perplexity is not finite"));
    }
    let (actual, mut w) = create(l, &e.output)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|err| Failure::output(&actual, &err.into()))?;
    flush(&actual, w)?;
    rec.output(&e.output, &actual);
    rec.scalar("split", e.split.name());
    rec.scalar("perplexity", report.perplexity);
    rec.scalar("tokens", count(report.tokens));
    rec.scalar("params", count(report.params.total));
    println!("eval-lm: {} perplexity {:.3}", e.split.name(), report.perplexity);
    rec.finish()
}

pub fn diag_gates(l: &Loaded) -> Result<(), Failure> {
    let g = &l.config.gates;
    let mut rec = recorder(l, "diag-gates");
    let model = load_model(l, &mut rec)?;
    let corpus = read_encoded(l, &mut rec, g.split)?;
    let stats = gate_stats(&model, &corpus, g.max_samples)?;
    let (actual, mut w) = create(l, &g.output)?;
    stats.write_csv(&mut w)?;
    flush(&actual, w)?;
    rec.output(&g.output, &actual);
    rec.scalar("split", g.split.name());
    rec.scalar("mean", stats.mean());
    for s in stats.summary() {
        rec.scalar(&format!("layer{}_mean", s.layer), s.mean);
        rec.scalar(&format!("layer{}_count", s.layer), count(s.count));
        rec.scalar(&format!("layer{}_deciles", s.layer), s.deciles.clone());
        println!("diag-gates: layer {} mean {:.4} over {} values", s.layer, s.mean, s.count);
    }
    rec.finish()
}
