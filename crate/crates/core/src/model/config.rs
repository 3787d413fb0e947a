//! Architecture hyperparameters and the flat `key = value` config format.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Visual,
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Acoustic];

    /// One-letter tag used in parameter names.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Visual => "v",
            Modality::Acoustic => "a",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
            Modality::Acoustic => 2,
        }
    }

    /// The two other modalities, acoustic before visual before text.
    pub fn partners(self) -> [Modality; 2] {
        match self {
            Modality::Text => [Modality::Acoustic, Modality::Visual],
            Modality::Visual => [Modality::Acoustic, Modality::Text],
            Modality::Acoustic => [Modality::Visual, Modality::Text],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "text" => Ok(Modality::Text),
            "v" | "visual" => Ok(Modality::Visual),
            "a" | "acoustic" => Ok(Modality::Acoustic),
            _ => Err(Error::Config(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Pooling {
    Last,
    #[default]
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Last => "last",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Pooling::Last),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!("unknown pooling {s:?}"))),
        }
    }
}

/// Which modalities feed the prediction. Pairs are text-centred.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ModalitySubset {
    Single(Modality),
    /// Text plus one partner, a single branch.
    Pair(Modality),
    /// Both branches.
    #[default]
    Full,
}

impl ModalitySubset {
    pub const TABLE: [ModalitySubset; 6] = [
        ModalitySubset::Single(Modality::Text),
        ModalitySubset::Single(Modality::Acoustic),
        ModalitySubset::Single(Modality::Visual),
        ModalitySubset::Pair(Modality::Visual),
        ModalitySubset::Pair(Modality::Acoustic),
        ModalitySubset::Full,
    ];

    /// Modalities whose features are read.
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            ModalitySubset::Single(m) => vec![m],
            ModalitySubset::Pair(p) => vec![Modality::Text, p],
            ModalitySubset::Full => Modality::ALL.to_vec(),
        }
    }
}

impl fmt::Display for ModalitySubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalitySubset::Single(m) => write!(f, "{}", m.tag().to_ascii_uppercase()),
            ModalitySubset::Pair(p) => write!(f, "T{}", p.tag().to_ascii_uppercase()),
            ModalitySubset::Full => f.write_str("TV+TA"),
        }
    }
}

impl FromStr for ModalitySubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T" => Ok(ModalitySubset::Single(Modality::Text)),
            "V" => Ok(ModalitySubset::Single(Modality::Visual)),
            "A" => Ok(ModalitySubset::Single(Modality::Acoustic)),
            "TV" => Ok(ModalitySubset::Pair(Modality::Visual)),
            "TA" => Ok(ModalitySubset::Pair(Modality::Acoustic)),
            "TV+TA" | "TA+TV" | "FULL" => Ok(ModalitySubset::Full),
            _ => Err(Error::Config(format!("unknown modality subset {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Common feature width (`d`).
    pub d: usize,
    /// Common sequence length after resampling (`L`).
    pub seq_len: usize,
    /// Number of stacked cross-attention modules (`N`).
    pub depth: usize,
    /// Attention heads (`h`); must divide `d`.
    pub heads: usize,
    pub ffn_mult: usize,
    /// Weight of the unimodal loss.
    pub lambda: f32,
    pub pooling: Pooling,
    pub gates_enabled: bool,
    pub joint_learning_enabled: bool,
    pub center_modality: Modality,
    pub positional_encoding: bool,
    /// Adds a residual connection around each attention block.
    pub attention_residual: bool,
    /// Temporal kernel of the projection and shared-encoder convolutions.
    pub conv_kernel: usize,
    pub modalities: ModalitySubset,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            seq_len: 24,
            depth: 5,
            heads: 4,
            ffn_mult: 4,
            lambda: 0.5,
            pooling: Pooling::Mean,
            gates_enabled: true,
            joint_learning_enabled: true,
            center_modality: Modality::Text,
            positional_encoding: true,
            attention_residual: false,
            conv_kernel: 3,
            modalities: ModalitySubset::Full,
        }
    }
}

/// Keys accepted in config files, in the order they are written.
pub const MODEL_KEYS: [&str; 14] = [
    "d",
    "L",
    "N",
    "h",
    "ffn_mult",
    "lambda",
    "pooling",
    "gates_enabled",
    "joint_learning_enabled",
    "center_modality",
    "positional_encoding",
    "attention_residual",
    "conv_kernel",
    "modalities",
];

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of h = {}",
                self.d, self.heads
            )));
        }
        if self.depth < 1 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("L must be at least 2".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.modalities != ModalitySubset::Full && self.center_modality != Modality::Text {
            return Err(Error::Config(
                "modality subsets other than TV+TA require center_modality = text".into(),
            ));
        }
        Ok(())
    }

    /// Sets one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_value(key, value)?,
            "L" => self.seq_len = parse_value(key, value)?,
            "N" => self.depth = parse_value(key, value)?,
            "h" => self.heads = parse_value(key, value)?,
            "ffn_mult" => self.ffn_mult = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "pooling" => self.pooling = value.trim().parse()?,
            "gates_enabled" => self.gates_enabled = parse_value(key, value)?,
            "joint_learning_enabled" => self.joint_learning_enabled = parse_value(key, value)?,
            "center_modality" => self.center_modality = value.trim().parse()?,
            "positional_encoding" => self.positional_encoding = parse_value(key, value)?,
            "attention_residual" => self.attention_residual = parse_value(key, value)?,
            "conv_kernel" => self.conv_kernel = parse_value(key, value)?,
            "modalities" => self.modalities = value.trim().parse()?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d" => self.d.to_string(),
            "L" => self.seq_len.to_string(),
            "N" => self.depth.to_string(),
            "h" => self.heads.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "lambda" => self.lambda.to_string(),
            "pooling" => self.pooling.to_string(),
            "gates_enabled" => self.gates_enabled.to_string(),
            "joint_learning_enabled" => self.joint_learning_enabled.to_string(),
            "center_modality" => self.center_modality.to_string(),
            "positional_encoding" => self.positional_encoding.to_string(),
            "attention_residual" => self.attention_residual.to_string(),
            "conv_kernel" => self.conv_kernel.to_string(),
            "modalities" => self.modalities.to_string(),
            _ => return None,
        })
    }

    pub fn to_kv(&self) -> String {
        MODEL_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses a config file, starting from the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
