//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are errors. `label_len` follows `seq_len / 2` unless it is
//! set explicitly; feature counts of 0 are filled in from the data.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{SplitRatios, SynthKind};
use crate::error::{Error, Result};
use crate::gsa::{MergeScalars, Pooling};
use crate::model::{Mechanism, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub target: String,
    /// Use only the target column for input and output.
    pub univariate: bool,
    pub split: SplitRatios,
    pub stride: usize,
    pub synth_kind: SynthKind,
    pub synth_len: usize,
    pub synth_features: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            target: "OT".into(),
            univariate: false,
            split: SplitRatios::default(),
            stride: 1,
            synth_kind: SynthKind::SineMix,
            synth_len: 2000,
            synth_features: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    label_len_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            n_features_in: 0,
            n_features_out: 0,
            ..ModelConfig::default()
        };
        Self {
            model,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            label_len_explicit: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "d",
    "heads",
    "e_l",
    "d_l",
    "l_g",
    "l_s",
    "l_comp",
    "seq_len",
    "label_len",
    "pred_len",
    "n_features_in",
    "n_features_out",
    "ffn_hidden",
    "ablation_local_only",
    "attention",
    "pooling",
    "merge_scalars",
    "decoder_leaky_global",
    "learning_rate",
    "batch_size",
    "epochs",
    "max_iters",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "patience",
    "grad_clip",
    "lr_decay",
    "target",
    "univariate",
    "split_train",
    "split_val",
    "split_test",
    "stride",
    "synth_kind",
    "synth_len",
    "synth_features",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

fn parse_choice<T: Copy>(key: &str, value: &str, choices: &[(&str, T)]) -> Result<T> {
    choices
        .iter()
        .find(|(n, _)| *n == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("`{key}`: expected one of {names:?}, got `{value}`"))
        })
}

const MECHANISMS: &[(&str, Mechanism)] = &[("grouped", Mechanism::Grouped), ("canonical", Mechanism::Canonical)];
const POOLINGS: &[(&str, Pooling)] = &[("mean", Pooling::Mean), ("sum", Pooling::Sum)];
const MERGES: &[(&str, MergeScalars)] = &[("per_group", MergeScalars::PerGroup), ("per_layer", MergeScalars::PerLayer)];

fn name_of<T: PartialEq>(choices: &[(&'static str, T)], v: &T) -> &'static str {
    choices.iter().find(|(_, c)| c == v).map(|(n, _)| *n).expect("listed choice")
}

impl RunConfig {
    pub fn with_model(model: ModelConfig) -> Self {
        Self {
            model,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        let v = value.trim();
        match key {
            "d" => m.d = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "e_l" => m.e_l = parse(key, v)?,
            "d_l" => m.d_l = parse(key, v)?,
            "l_g" => m.l_g = parse(key, v)?,
            "l_s" => m.l_s = parse(key, v)?,
            "l_comp" => m.l_comp = parse(key, v)?,
            "seq_len" => m.seq_len = parse(key, v)?,
            "label_len" => {
                m.label_len = parse(key, v)?;
                self.label_len_explicit = true;
            }
            "pred_len" => m.pred_len = parse(key, v)?,
            "n_features_in" => m.n_features_in = parse(key, v)?,
            "n_features_out" => m.n_features_out = parse(key, v)?,
            "ffn_hidden" => m.ffn_hidden = parse(key, v)?,
            "ablation_local_only" => m.ablation_local_only = parse(key, v)?,
            "attention" => m.attention = parse_choice(key, v, MECHANISMS)?,
            "pooling" => m.pooling = parse_choice(key, v, POOLINGS)?,
            "merge_scalars" => m.merge = parse_choice(key, v, MERGES)?,
            "decoder_leaky_global" => m.decoder_leaky_global = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "max_iters" => t.max_iters = parse_opt(key, v)?,
            "adam_beta1" => t.beta1 = parse(key, v)?,
            "adam_beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "patience" => t.patience = parse_opt(key, v)?,
            "grad_clip" => t.grad_clip = parse_opt(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "target" => d.target = v.to_string(),
            "univariate" => d.univariate = parse(key, v)?,
            "split_train" => d.split.train = parse(key, v)?,
            "split_val" => d.split.val = parse(key, v)?,
            "split_test" => d.split.test = parse(key, v)?,
            "stride" => d.stride = parse(key, v)?,
            "synth_kind" => d.synth_kind = v.parse()?,
            "synth_len" => d.synth_len = parse(key, v)?,
            "synth_features" => d.synth_features = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{raw}`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Model config with `label_len` and feature counts resolved.
    pub fn resolved_model(&self, n_features: usize) -> ModelConfig {
        let mut m = self.model.clone();
        if !self.label_len_explicit {
            m.label_len = m.seq_len / 2;
        }
        if m.n_features_in == 0 {
            m.n_features_in = n_features;
        }
        if m.n_features_out == 0 {
            m.n_features_out = n_features;
        }
        m
    }

    /// Every key with its current value, parseable by [`RunConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let entries: Vec<(&str, String)> = vec![
            ("d", m.d.to_string()),
            ("heads", m.heads.to_string()),
            ("e_l", m.e_l.to_string()),
            ("d_l", m.d_l.to_string()),
            ("l_g", m.l_g.to_string()),
            ("l_s", m.l_s.to_string()),
            ("l_comp", m.l_comp.to_string()),
            ("seq_len", m.seq_len.to_string()),
            ("label_len", m.label_len.to_string()),
            ("pred_len", m.pred_len.to_string()),
            ("n_features_in", m.n_features_in.to_string()),
            ("n_features_out", m.n_features_out.to_string()),
            ("ffn_hidden", m.ffn_hidden.to_string()),
            ("ablation_local_only", m.ablation_local_only.to_string()),
            ("attention", name_of(MECHANISMS, &m.attention).into()),
            ("pooling", name_of(POOLINGS, &m.pooling).into()),
            ("merge_scalars", name_of(MERGES, &m.merge).into()),
            ("decoder_leaky_global", m.decoder_leaky_global.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("max_iters", show_opt(&t.max_iters)),
            ("adam_beta1", t.beta1.to_string()),
            ("adam_beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("seed", t.seed.to_string()),
            ("patience", show_opt(&t.patience)),
            ("grad_clip", show_opt(&t.grad_clip)),
            ("lr_decay", t.lr_decay.to_string()),
            ("target", d.target.clone()),
            ("univariate", d.univariate.to_string()),
            ("split_train", d.split.train.to_string()),
            ("split_val", d.split.val.to_string()),
            ("split_test", d.split.test.to_string()),
            ("stride", d.stride.to_string()),
            ("synth_kind", d.synth_kind.name().into()),
            ("synth_len", d.synth_len.to_string()),
            ("synth_features", d.synth_features.to_string()),
        ];
        debug_assert_eq!(entries.len(), KEYS.len());
        let mut s = String::new();
        for (k, v) in entries {
            if k == "label_len" && !self.label_len_explicit {
                let _ = writeln!(s, "# label_len = seq_len / 2");
            } else {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_len_follows_seq_len_in_any_order() {
        let a = RunConfig::parse_str("seq_len = 168\n").unwrap();
        assert_eq!(a.resolved_model(7).label_len, 84);
        let b = RunConfig::parse_str("label_len = 10\nseq_len = 168\n").unwrap();
        let c = RunConfig::parse_str("seq_len = 168\nlabel_len = 10\n").unwrap();
        assert_eq!(b.resolved_model(7).label_len, 10);
        assert_eq!(b, c);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse_str("d = 8\nwidth = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width") && msg.contains("line 2"), "{msg}");
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
        assert!(cfg.apply_overrides(&["d"]).is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = RunConfig::parse_str("# header\n\nd = 32 # width\nattention = canonical\nmax_iters = 5\n").unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.model.attention, Mechanism::Canonical);
        assert_eq!(cfg.train.max_iters, Some(5));
        cfg.apply_overrides(&["d=16", "max_iters=none", "pooling=sum"]).unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.train.max_iters, None);
        assert_eq!(cfg.model.pooling, Pooling::Sum);
        assert!(cfg.apply_overrides(&["attention=linear"]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["d=24", "heads=3", "grad_clip=1.5", "synth_kind=white_noise", "label_len=7"]).unwrap();
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let plain = RunConfig::default();
        assert_eq!(RunConfig::parse_str(&plain.to_text()).unwrap(), plain);
    }

    #[test]
    fn feature_counts_inferred() {
        let m = RunConfig::default().resolved_model(7);
        assert_eq!((m.n_features_in, m.n_features_out), (7, 7));
    }
}
