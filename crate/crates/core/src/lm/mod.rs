//! Subword-aware word-level language model.
//!
//! A word arrives as a sequence of subword ids (characters or automaton
//! states). Their embeddings are composed into one word vector (`concat`,
//! `sum` or a max-over-time `cnn`), optionally projected to the highway width,
//! passed through a stack of highway layers and a stack of LSTM layers, and the
//! top hidden state predicts the next word through a softmax.
//!
//! Forward and backward passes are written out by hand over row-batched
//! matrices: a window of `steps` time steps for `batch` parallel streams is
//! laid out as `steps * batch` rows, row `t * batch + b`.

mod dropout;
mod layers;
mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::corpus::SubwordKind;
use crate::error::{Error, Result};

pub use dropout::{DropoutMasks, MaskSite};
pub use layers::{compose, highway_forward, lstm_stack_step, softmax_nll, SoftmaxGrads};
pub use model::{ForwardOutput, LanguageModel, LstmState, Window};
pub use params::{
    read_checkpoint, write_checkpoint, ConvBank, HighwayLayer, LmParams, LstmLayer, ParamCount,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    Concat,
    Sum,
    Cnn,
}

impl std::str::FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Composition::Concat),
            "sum" => Ok(Composition::Sum),
            "cnn" => Ok(Composition::Cnn),
            other => Err(Error::InvalidArgument(format!("unknown composition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
}

impl std::str::FromStr for SizeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            other => Err(Error::InvalidArgument(format!("unknown size class {other:?}"))),
        }
    }
}

/// Variational dropout rates per site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    /// Composed word vector.
    pub embedding: f64,
    /// Input of every LSTM layer.
    pub gate_input: f64,
    /// Recurrent hidden state entering the gates.
    pub hidden: f64,
    /// Top LSTM output before the softmax.
    pub output: f64,
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        embedding: 0.0,
        gate_input: 0.0,
        hidden: 0.0,
        output: 0.0,
    };

    /// Rates of the published recipe: small models, medium Concat/Sum, medium CNN.
    pub fn recipe(size: SizeClass, composition: Composition) -> Self {
        let (e, g) = match (size, composition) {
            (SizeClass::Small, _) => (0.1, 0.2),
            (SizeClass::Medium, Composition::Cnn) => (0.2, 0.35),
            (SizeClass::Medium, _) => (0.15, 0.3),
        };
        DropoutRates {
            embedding: e,
            gate_input: g,
            hidden: e,
            output: g,
        }
    }

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }

    fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("embedding", self.embedding),
            ("gate_input", self.gate_input),
            ("hidden", self.hidden),
            ("output", self.output),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("dropout rate {name}={r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Architecture of one language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub composition: Composition,
    /// Number of distinct subword input ids.
    pub input_size: usize,
    /// Number of output words.
    pub vocab_size: usize,
    /// Subword embedding width.
    pub d_x: usize,
    /// Highway width.
    pub d_hw: usize,
    /// LSTM state width.
    pub d_lm: usize,
    /// Concat pad/truncate length in subwords.
    pub pad_len: usize,
    pub cnn_widths: Vec<usize>,
    pub cnn_depths: Vec<usize>,
    pub highway_layers: usize,
    pub lstm_layers: usize,
    pub dropout: DropoutRates,
}

impl LmConfig {
    /// Hyperparameters of the published recipe for a given model family.
    pub fn recipe(
        composition: Composition,
        kind: SubwordKind,
        size: SizeClass,
        input_size: usize,
        vocab_size: usize,
        pad_len: usize,
    ) -> Self {
        let d_lm = match size {
            SizeClass::Small => 300,
            SizeClass::Medium => 650,
        };
        let (d_x, widths, depths): (usize, Vec<usize>, Vec<usize>) = match (composition, kind, size) {
            (Composition::Concat, SubwordKind::Chars, _) => (15, vec![], vec![]),
            (Composition::Concat, SubwordKind::Patterns, _) => (30, vec![], vec![]),
            (Composition::Sum, _, _) => (d_lm, vec![], vec![]),
            (Composition::Cnn, SubwordKind::Patterns, SizeClass::Small) => {
                (50, (1..=6).collect(), vec![100, 50, 75, 100, 100, 100])
            }
            (Composition::Cnn, SubwordKind::Patterns, SizeClass::Medium) => {
                (100, (1..=7).collect(), vec![100, 100, 150, 200, 200, 200, 200])
            }
            (Composition::Cnn, SubwordKind::Chars, SizeClass::Small) => {
                (15, (1..=6).collect(), (1..=6).map(|w| 25 * w).collect())
            }
            (Composition::Cnn, SubwordKind::Chars, SizeClass::Medium) => {
                (15, (1..=7).collect(), vec![50, 100, 150, 200, 200, 200, 200])
            }
        };
        let d_hw = match composition {
            Composition::Cnn => depths.iter().sum(),
            _ => d_lm,
        };
        LmConfig {
            composition,
            input_size,
            vocab_size,
            d_x,
            d_hw,
            d_lm,
            pad_len,
            cnn_widths: widths,
            cnn_depths: depths,
            highway_layers: 2,
            lstm_layers: 2,
            dropout: DropoutRates::recipe(size, composition),
        }
    }

    /// Width of the composed word vector before any projection.
    pub fn composed_dim(&self) -> usize {
        match self.composition {
            Composition::Concat => self.pad_len * self.d_x,
            Composition::Sum => self.d_x,
            Composition::Cnn => self.cnn_depths.iter().sum(),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.composed_dim() != self.d_hw
    }

    pub fn lstm_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.d_hw
        } else {
            self.d_lm
        }
    }

    pub fn max_width(&self) -> usize {
        self.cnn_widths.iter().copied().max().unwrap_or(1)
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> usize {
        let conv = match self.composition {
            Composition::Cnn => self
                .cnn_widths
                .iter()
                .zip(&self.cnn_depths)
                .map(|(w, h)| w * self.d_x * h + h)
                .sum(),
            _ => 0,
        };
        let proj = if self.has_projection() {
            self.composed_dim() * self.d_hw + self.d_hw
        } else {
            0
        };
        let highway = self.highway_layers * 2 * (self.d_hw * self.d_hw + self.d_hw);
        let lstm: usize = (0..self.lstm_layers)
            .map(|l| (self.lstm_input_dim(l) + self.d_lm + 1) * 4 * self.d_lm)
            .sum();
        self.input_size * self.d_x + conv + proj + highway + lstm + self.d_lm * self.vocab_size + self.vocab_size
    }

    /// Adjusts the free width of this configuration so that its parameter
    /// count comes closest to `target`. The width varied is `d_x` for `concat`
    /// and `cnn`, and `d_x = d_hw` jointly for `sum`.
    pub fn fit_budget(&self, target: usize) -> Result<LmConfig> {
        let with = |k: usize| {
            let mut c = self.clone();
            c.d_x = k;
            if c.composition == Composition::Sum {
                c.d_hw = k;
            }
            c
        };
        let (mut lo, mut hi) = (1usize, 1usize);
        while with(hi).param_count() < target {
            lo = hi;
            hi *= 2;
            if hi > 1 << 20 {
                return Err(Error::InvalidArgument(format!("no width reaches {target} parameters")));
            }
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if with(mid).param_count() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let gap = |k: usize| with(k).param_count().abs_diff(target);
        let best = if gap(lo) <= gap(hi) { lo } else { hi };
        let out = with(best);
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_size == 0 || self.vocab_size == 0 {
            return bad("input and vocabulary sizes must be positive".into());
        }
        if self.d_x == 0 || self.d_hw == 0 || self.d_lm == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.lstm_layers == 0 {
            return bad("at least one LSTM layer is required".into());
        }
        match self.composition {
            Composition::Concat if self.pad_len == 0 => return bad("concat needs pad_len >= 1".into()),
            Composition::Cnn => {
                if self.cnn_widths.is_empty() || self.cnn_widths.len() != self.cnn_depths.len() {
                    return bad("cnn widths and depths must be non-empty and of equal length".into());
                }
                if self.cnn_widths.contains(&0) || self.cnn_depths.contains(&0) {
                    return bad("cnn widths and depths must be positive".into());
                }
            }
            _ => {}
        }
        self.dropout.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_dimensions() {
        let c = LmConfig::recipe(Composition::Cnn, SubwordKind::Patterns, SizeClass::Small, 890, 10_000, 9);
        assert_eq!(c.d_hw, 525);
        assert_eq!(c.d_x, 50);
        assert!(!c.has_projection());
        let c = LmConfig::recipe(Composition::Cnn, SubwordKind::Patterns, SizeClass::Medium, 890, 10_000, 9);
        assert_eq!(c.d_hw, 1150);
        assert_eq!(c.d_lm, 650);
        let c = LmConfig::recipe(Composition::Cnn, SubwordKind::Chars, SizeClass::Small, 50, 10_000, 9);
        assert_eq!(c.d_hw, 525);
        let c = LmConfig::recipe(Composition::Concat, SubwordKind::Chars, SizeClass::Small, 50, 10_000, 9);
        assert_eq!((c.d_x, c.d_hw, c.composed_dim()), (15, 300, 135));
        assert!(c.has_projection());
        let c = LmConfig::recipe(Composition::Sum, SubwordKind::Patterns, SizeClass::Medium, 890, 10_000, 9);
        assert_eq!((c.d_x, c.d_hw, c.d_lm), (650, 650, 650));
        assert!(!c.has_projection());
        assert_eq!(c.dropout, DropoutRates { embedding: 0.15, gate_input: 0.3, hidden: 0.15, output: 0.3 });
    }

    #[test]
    fn recipe_dropout_groups() {
        assert_eq!(DropoutRates::recipe(SizeClass::Small, Composition::Cnn).embedding, 0.1);
        assert_eq!(DropoutRates::recipe(SizeClass::Medium, Composition::Cnn).output, 0.35);
        assert_eq!(DropoutRates::recipe(SizeClass::Medium, Composition::Concat).hidden, 0.15);
    }

    #[test]
    fn analytic_count_matches_tensors() {
        for c in [Composition::Concat, Composition::Sum, Composition::Cnn] {
            for kind in [SubwordKind::Chars, SubwordKind::Patterns] {
                let mut cfg = LmConfig::recipe(c, kind, SizeClass::Small, 40, 90, 6);
                cfg.d_lm = 20;
                cfg.d_hw = if c == Composition::Cnn { cfg.d_hw } else { 20 };
                if c == Composition::Sum {
                    cfg.d_x = 20;
                }
                let n = LmParams::<f32>::zeros(&cfg).count().total;
                assert_eq!(cfg.param_count(), n, "{c:?} {kind:?}");
            }
        }
    }

    #[test]
    fn budget_fit_within_two_percent() {
        let mut pat = LmConfig::recipe(Composition::Concat, SubwordKind::Patterns, SizeClass::Small, 400, 500, 6);
        pat.d_lm = 64;
        pat.d_hw = 64;
        let mut chr = pat.clone();
        chr.input_size = 30;
        chr.d_x = 15;
        let fit = chr.fit_budget(pat.param_count()).unwrap();
        let r = fit.param_count() as f64 / pat.param_count() as f64;
        assert!((r - 1.0).abs() < 0.02, "{r}");
        assert!(fit.d_x > 15);

        let mut s = pat.clone();
        s.composition = Composition::Sum;
        s.d_x = 64;
        let mut cs = s.clone();
        cs.input_size = 30;
        let fit = cs.fit_budget(s.param_count()).unwrap();
        assert_eq!(fit.d_x, fit.d_hw);
        assert!((fit.param_count() as f64 / s.param_count() as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn validation() {
        let mut c = LmConfig::recipe(Composition::Sum, SubwordKind::Chars, SizeClass::Small, 10, 10, 5);
        assert!(c.validate().is_ok());
        c.dropout.hidden = 1.0;
        assert!(c.validate().is_err());
        let mut c = LmConfig::recipe(Composition::Cnn, SubwordKind::Chars, SizeClass::Small, 10, 10, 5);
        c.cnn_depths.pop();
        assert!(c.validate().is_err());
    }
}
