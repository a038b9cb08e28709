//! Flat `key = value` configuration with typed defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::train::{LabelBudget, TrainConfig};
use crate::vat::VatConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Real,
    Count,
    Seed,
    Flag,
    Text,
    ModelKind,
    SynthKind,
}

struct KeyDoc {
    key: &'static str,
    default: &'static str,
    kind: Kind,
    help: &'static str,
}

const fn doc(key: &'static str, default: &'static str, kind: Kind, help: &'static str) -> KeyDoc {
    KeyDoc {
        key,
        default,
        kind,
        help,
    }
}

const KEYS: &[KeyDoc] = &[
    doc("model.kind", "small_cnn", Kind::ModelKind, "large_cnn, small_cnn, mlp or linear"),
    doc("model.leaky_slope", "0.1", Kind::Real, "negative slope of the leaky ReLU"),
    doc("vat.epsilon", "2.5", Kind::Real, "perturbation norm"),
    doc("vat.xi", "10", Kind::Real, "power iteration probe scale"),
    doc("vat.power_iterations", "1", Kind::Count, "power iteration count"),
    doc("vat.alpha", "1", Kind::Real, "weight of the adversarial loss"),
    doc("vat.include_labeled", "false", Kind::Flag, "also regularize labeled batches"),
    doc("train.lr", "0.001", Kind::Real, "Adam learning rate"),
    doc("train.batch", "32", Kind::Count, "labeled and unlabeled batch size"),
    doc("train.epochs", "100", Kind::Count, "passes over the labeled set"),
    doc("train.repeats", "3", Kind::Count, "independent runs"),
    doc("train.seed", "0", Kind::Seed, "seed of the first run"),
    doc("train.use_vat", "true", Kind::Flag, "add the adversarial loss"),
    doc("train.labeled_ratio", "0.4", Kind::Real, "fraction of train labels kept per class"),
    doc("train.labeled_per_class", "0", Kind::Count, "fixed labels per class; 0 uses the ratio"),
    doc("data.manifest", "", Kind::Text, "image manifest"),
    doc("data.points", "", Kind::Text, "point table, used instead of a manifest"),
    doc("synth.kind", "blob_images", Kind::SynthKind, "blob_images or moons"),
    doc("synth.count_per_class", "256", Kind::Count, "samples per class"),
    doc("synth.noise", "0.1", Kind::Real, "Gaussian noise std"),
    doc("synth.side", "32", Kind::Count, "image side length"),
    doc("synth.seed", "0", Kind::Seed, "generator seed"),
    doc("eval.checkpoint", "", Kind::Text, "checkpoint to evaluate"),
    doc("perturb.checkpoint", "", Kind::Text, "checkpoint used for the perturbation"),
    doc("perturb.image", "", Kind::Text, "PGM image to perturb"),
];

fn lookup(key: &str) -> Option<&'static KeyDoc> {
    KEYS.iter().find(|d| d.key == key)
}

fn check_value(d: &KeyDoc, value: &str) -> std::result::Result<(), String> {
    let ok = match d.kind {
        Kind::Real => value.parse::<f64>().map(|v| v.is_finite()).unwrap_or(false),
        Kind::Count => value.parse::<usize>().is_ok(),
        Kind::Seed => value.parse::<u64>().is_ok(),
        Kind::Flag => matches!(value, "true" | "false"),
        Kind::Text => true,
        Kind::ModelKind => value.parse::<ModelKind>().is_ok(),
        Kind::SynthKind => value.parse::<SyntheticKind>().is_ok(),
    };
    if ok {
        Ok(())
    } else {
        let expected = match d.kind {
            Kind::Real => "a finite number",
            Kind::Count => "a non-negative integer",
            Kind::Seed => "an unsigned 64-bit integer",
            Kind::Flag => "true or false",
            Kind::Text => "text",
            Kind::ModelKind | Kind::SynthKind => d.help,
        };
        Err(format!("invalid value `{value}` for {}: expected {expected}", d.key))
    }
}

/// Every known key with its current value.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|d| (d.key, d.default.to_string())).collect(),
        }
    }
}

impl Config {
    /// Parses file text on top of the defaults. `origin` names the source in
    /// errors.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(origin, format!("line {line_no}: expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(d) = lookup(key) else {
                return Err(Error::parse(origin, format!("line {line_no}: unknown key `{key}`")));
            };
            if let Some(first) = seen.insert(d.key, line_no) {
                return Err(Error::parse(
                    origin,
                    format!("line {line_no}: duplicate key `{key}` (first set on line {first})"),
                ));
            }
            check_value(d, value).map_err(|m| Error::parse(origin, format!("line {line_no}: {m}")))?;
            cfg.values.insert(d.key, value.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Builds the effective config: optional file, then `--key value`
    /// overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = match file {
            Some(path) => Self::load(path)?,
            None => Config::default(),
        };
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = lookup(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        check_value(d, value).map_err(Error::Config)?;
        self.values.insert(d.key, value.to_string());
        Ok(())
    }

    pub fn is_known(key: &str) -> bool {
        lookup(key).is_some()
    }

    pub fn get(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => panic!("unknown config key `{key}`"),
        }
    }

    pub fn real(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated real")
    }

    pub fn count(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated count")
    }

    pub fn seed(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated seed")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    /// `None` when a text key is empty.
    pub fn text(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    pub fn model_kind(&self) -> ModelKind {
        self.get("model.kind").parse().expect("validated model kind")
    }

    pub fn vat_config(&self) -> Result<VatConfig> {
        let vat = VatConfig {
            epsilon: self.real("vat.epsilon"),
            xi: self.real("vat.xi"),
            power_iterations: self.count("vat.power_iterations"),
            alpha: self.real("vat.alpha"),
            include_labeled: self.flag("vat.include_labeled"),
        };
        vat.validate()?;
        Ok(vat)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let labels = match self.count("train.labeled_per_class") {
            0 => LabelBudget::Ratio(self.real("train.labeled_ratio")),
            n => LabelBudget::PerClass(n),
        };
        let cfg = TrainConfig {
            learning_rate: self.real("train.lr"),
            batch_size: self.count("train.batch"),
            epochs: self.count("train.epochs"),
            labels,
            repeats: self.count("train.repeats"),
            seed: self.seed("train.seed"),
            use_vat: self.flag("train.use_vat"),
            vat: self.vat_config()?,
            model_kind: self.model_kind(),
            leaky_slope: self.real("model.leaky_slope"),
            seed_per_repeat: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            kind: self.get("synth.kind").parse()?,
            count_per_class: self.count("synth.count_per_class"),
            noise: self.real("synth.noise"),
            side: self.count("synth.side"),
            seed: self.seed("synth.seed"),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The full effective config in file syntax, one key per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for d in KEYS {
            let _ = writeln!(out, "{} = {}", d.key, self.values[d.key]);
        }
        out
    }

    /// Lists every key with default and description.
    pub fn describe() -> String {
        let mut out = String::new();
        for d in KEYS {
            let default = if d.default.is_empty() { "(empty)" } else { d.default };
            let _ = writeln!(out, "  {:<24} {:<12} {}", d.key, default, d.help);
        }
        out
    }
}
