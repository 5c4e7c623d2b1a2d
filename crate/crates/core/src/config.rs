//! Training configuration and its flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Model variants: the full model and the ablations that switch encoder
/// branches off or swap them out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Issr,
    OnlyIntra,
    MfIntra,
    CoIntra,
    BiIntra,
    InterGru4Rec,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Issr,
        Variant::OnlyIntra,
        Variant::MfIntra,
        Variant::CoIntra,
        Variant::BiIntra,
        Variant::InterGru4Rec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Issr => "issr",
            Variant::OnlyIntra => "only-intra",
            Variant::MfIntra => "mf-intra",
            Variant::CoIntra => "co-intra",
            Variant::BiIntra => "bi-intra",
            Variant::InterGru4Rec => "inter-gru4rec",
        }
    }

    /// Which branches of the pipeline this variant runs.
    pub fn wiring(self) -> Wiring {
        let full = Wiring {
            bipartite: true,
            cooc: true,
            mf_branch: false,
            attention: true,
            identity_residual_init: false,
        };
        match self {
            Variant::Issr => full,
            Variant::OnlyIntra => Wiring {
                bipartite: false,
                cooc: false,
                identity_residual_init: true,
                ..full
            },
            Variant::MfIntra => Wiring {
                bipartite: false,
                cooc: false,
                mf_branch: true,
                ..full
            },
            Variant::CoIntra => Wiring {
                bipartite: false,
                ..full
            },
            Variant::BiIntra => Wiring {
                cooc: false,
                ..full
            },
            Variant::InterGru4Rec => Wiring {
                attention: false,
                ..full
            },
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Branch switches derived from a [`Variant`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    /// Bipartite-graph convolution branch.
    pub bipartite: bool,
    /// Co-occurrence-graph convolution branch.
    pub cooc: bool,
    /// Raw item embeddings stand in for the graph branches, trained with an
    /// auxiliary user-item factorization loss.
    pub mf_branch: bool,
    /// Personalized attention; when off the interest vector is the last GRU state.
    pub attention: bool,
    /// Start the residual transform at the identity matrix.
    pub identity_residual_init: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub context_len: usize,
    pub targets: usize,
    pub gcn_b_layers: usize,
    pub gcn_c_layers: usize,
    pub neighbor_samples: usize,
    pub num_negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variant: Variant,
    pub gcn_activation: Activation,
    pub residual_activation: Activation,
    pub attention_activation: Activation,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            context_len: 5,
            targets: 3,
            gcn_b_layers: 2,
            gcn_c_layers: 1,
            neighbor_samples: 10,
            num_negatives: 3,
            batch_size: 256,
            epochs: 20,
            learning_rate: 1e-3,
            seed: 42,
            variant: Variant::Issr,
            gcn_activation: Activation::Relu,
            residual_activation: Activation::Relu,
            attention_activation: Activation::Tanh,
            patience: 5,
        }
    }
}

/// Keys every config file must set. `seed` is optional; the CLI supplies it.
pub const REQUIRED_KEYS: [&str; 15] = [
    "dim",
    "context_len",
    "targets",
    "gcn_b_layers",
    "gcn_c_layers",
    "neighbor_samples",
    "num_negatives",
    "batch_size",
    "epochs",
    "learning_rate",
    "variant",
    "gcn_activation",
    "residual_activation",
    "attention_activation",
    "patience",
];

fn parse_value<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = map
        .get(key)
        .ok_or_else(|| Error::MissingConfigKey(key.to_string()))?;
    raw.parse::<T>().map_err(|e| Error::InvalidConfig {
        key: key.to_string(),
        message: format!("`{raw}`: {e}"),
    })
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if !REQUIRED_KEYS.contains(&k) && k != "seed" {
                return Err(Error::InvalidConfig {
                    key: k.to_string(),
                    message: "unknown key".into(),
                });
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        let config = TrainConfig {
            dim: parse_value(&map, "dim")?,
            context_len: parse_value(&map, "context_len")?,
            targets: parse_value(&map, "targets")?,
            gcn_b_layers: parse_value(&map, "gcn_b_layers")?,
            gcn_c_layers: parse_value(&map, "gcn_c_layers")?,
            neighbor_samples: parse_value(&map, "neighbor_samples")?,
            num_negatives: parse_value(&map, "num_negatives")?,
            batch_size: parse_value(&map, "batch_size")?,
            epochs: parse_value(&map, "epochs")?,
            learning_rate: parse_value(&map, "learning_rate")?,
            seed: if map.contains_key("seed") {
                parse_value(&map, "seed")?
            } else {
                TrainConfig::default().seed
            },
            variant: parse_value(&map, "variant")?,
            gcn_activation: parse_value(&map, "gcn_activation")?,
            residual_activation: parse_value(&map, "residual_activation")?,
            attention_activation: parse_value(&map, "attention_activation")?,
            patience: parse_value(&map, "patience")?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "context_len = {}", self.context_len);
        let _ = writeln!(s, "targets = {}", self.targets);
        let _ = writeln!(s, "gcn_b_layers = {}", self.gcn_b_layers);
        let _ = writeln!(s, "gcn_c_layers = {}", self.gcn_c_layers);
        let _ = writeln!(s, "neighbor_samples = {}", self.neighbor_samples);
        let _ = writeln!(s, "num_negatives = {}", self.num_negatives);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "gcn_activation = {}", self.gcn_activation.name());
        let _ = writeln!(s, "residual_activation = {}", self.residual_activation.name());
        let _ = writeln!(s, "attention_activation = {}", self.attention_activation.name());
        let _ = writeln!(s, "patience = {}", self.patience);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("context_len", self.context_len),
            ("targets", self.targets),
            ("neighbor_samples", self.neighbor_samples),
            ("num_negatives", self.num_negatives),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig {
                key: "learning_rate".into(),
                message: format!("{} is not a finite non-negative number", self.learning_rate),
            });
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_config_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
