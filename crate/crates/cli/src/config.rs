//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use patlm::corpus::{SourceProfile, SubwordKind};
use patlm::lm::{Composition, SizeClass};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for the parallel kernels; 0 lets the runtime decide.
    pub threads: usize,
    pub data: DataConfig,
    pub synth: SynthSection,
    pub mine: MineConfig,
    pub crf: CrfConfig,
    pub automaton: AutomatonConfig,
    pub encode: EncodeConfig,
    pub lm: LmSection,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub gates: GatesConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            threads: 0,
            data: DataConfig::default(),
            synth: SynthSection::default(),
            mine: MineConfig::default(),
            crf: CrfConfig::default(),
            automaton: AutomatonConfig::default(),
            encode: EncodeConfig::default(),
            lm: LmSection::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            gates: GatesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub profile: SourceProfile,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "data/train.txt".into(),
            valid: "data/valid.txt".into(),
            test: "data/test.txt".into(),
            profile: SourceProfile::Ptb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Directory receiving `train.txt`, `valid.txt` and `test.txt`.
    pub dir: PathBuf,
    pub tokens: usize,
    pub roots: usize,
    pub root_classes: usize,
    pub function_words: usize,
    pub zipf: f64,
    pub fidelity: f64,
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = patlm::synth::SynthConfig::default();
        SynthSection {
            dir: "data".into(),
            tokens: d.tokens,
            roots: d.roots,
            root_classes: d.root_classes,
            function_words: d.function_words,
            zipf: d.zipf,
            fidelity: d.fidelity,
            min_pairs: d.min_pairs,
            max_pairs: d.max_pairs,
            valid_fraction: d.valid_fraction,
            test_fraction: d.test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineConfig {
    pub f: usize,
    #[serde(rename = "L_max")]
    pub l_max: usize,
    pub output: PathBuf,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            f: 300,
            l_max: 12,
            output: "work/candidates.tsv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    #[serde(rename = "C")]
    pub c: f64,
    pub m: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub progress_window: usize,
    pub max_iter: usize,
    pub output: PathBuf,
}

impl Default for CrfConfig {
    fn default() -> Self {
        let d = patlm::owlqn::OwlqnConfig::<f64>::default();
        CrfConfig {
            c: 1600.0,
            m: d.memory,
            grad_tol: d.grad_tol,
            rel_tol: d.rel_tol,
            progress_window: d.progress_window,
            max_iter: d.max_iter,
            output: "work/pattern_table.tsv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutomatonConfig {
    pub output: PathBuf,
}

impl Default for AutomatonConfig {
    fn default() -> Self {
        AutomatonConfig {
            output: "work/automaton.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub kind: SubwordKind,
    /// Output stem; the stage writes `<prefix>.{train,valid,test}.json`.
    pub prefix: PathBuf,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            kind: SubwordKind::Patterns,
            prefix: "work/patterns".into(),
        }
    }
}

impl EncodeConfig {
    pub fn split_path(&self, split: Split) -> PathBuf {
        let mut s = self.prefix.clone().into_os_string();
        s.push(format!(".{}.json", split.name()));
        s.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Architecture keys; zero means "take the value from the size-class recipe".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub composition: Composition,
    pub size: SizeClass,
    pub precision: Precision,
    #[serde(rename = "d_LM")]
    pub d_lm: usize,
    #[serde(rename = "d_HW")]
    pub d_hw: usize,
    #[serde(rename = "d_X")]
    pub d_x: usize,
    /// Concat pad length; 0 takes the value recorded when the corpus was encoded.
    pub n: usize,
    pub cnn_widths: Vec<usize>,
    pub cnn_depths: Vec<usize>,
    pub highway_layers: usize,
    pub lstm_layers: usize,
    /// Dropout rates per site; negative takes the recipe rate.
    pub dropout_embedding: f64,
    pub dropout_gate_input: f64,
    pub dropout_hidden: f64,
    pub dropout_output: f64,
    /// Target parameter count; when positive, d_X is refitted to match it.
    pub budget: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            composition: Composition::Sum,
            size: SizeClass::Small,
            precision: Precision::F32,
            d_lm: 0,
            d_hw: 0,
            d_x: 0,
            n: 0,
            cnn_widths: Vec::new(),
            cnn_depths: Vec::new(),
            highway_layers: 2,
            lstm_layers: 2,
            dropout_embedding: -1.0,
            dropout_gate_input: -1.0,
            dropout_hidden: -1.0,
            dropout_output: -1.0,
            budget: 0,
            checkpoint: "work/model.ckpt".into(),
            metrics: "work/metrics.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub bptt: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub init_range: f64,
    pub forget_bias: f64,
    pub transform_bias: f64,
    pub clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = patlm::trainer::TrainConfig::default();
        TrainSection {
            bptt: d.bptt,
            batch: d.batch,
            lr: d.lr,
            epochs: d.epochs,
            init_range: d.init_range,
            forget_bias: d.forget_bias,
            transform_bias: d.transform_bias,
            clip: d.clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub output: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            output: "work/eval.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatesConfig {
    pub split: Split,
    /// Number of word tokens whose gate activations are collected.
    pub max_samples: usize,
    pub output: PathBuf,
}

impl Default for GatesConfig {
    fn default() -> Self {
        GatesConfig {
            split: Split::Valid,
            max_samples: 10_000,
            output: "work/gates.csv".into(),
        }
    }
}

/// A loaded configuration together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    pub base: PathBuf,
}

impl Loaded {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// SHA-256 of the effective configuration in canonical TOML form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Parse `section.key=value`; the value is read as a TOML literal and falls
/// back to a plain string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), Failure> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override {item:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        cur = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("override {key:?}: {s} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Loaded, Failure> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::input(p, &e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Failure::config(format!("{}: {}", p.display(), e.message())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (table, base)
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::config(e.message().to_string()))?;
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    Ok(Loaded { config, base })
}
