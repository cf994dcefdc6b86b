use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::ssm::Discretization;
use crate::error::{Error, Result};

/// Sequence-model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Transformer,
    LinearTf,
    Performer,
    Mamba,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Transformer,
        Family::LinearTf,
        Family::Performer,
        Family::Mamba,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Transformer => "transformer",
            Family::LinearTf => "linear_tf",
            Family::Performer => "performer",
            Family::Mamba => "mamba",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, Family::Mamba)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown family '{s}' (valid: transformer, linear_tf, performer, mamba)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub expert_hidden: usize,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    pub num_layers: usize,
    /// Residual stream width M.
    pub hidden_dim: usize,
    /// Query/key width C of the attention families.
    pub head_dim: usize,
    /// State width C of the selective SSM.
    pub ssm_state_size: usize,
    pub conv_width: usize,
    /// Mamba inner width = `expand · hidden_dim`.
    pub expand: usize,
    /// Rank of the Δ projection.
    pub dt_rank: usize,
    /// Feed-forward width of the attention families.
    pub ffn_hidden: usize,
    /// Target-code vocabulary size V.
    pub vocab_size: usize,
    /// Width of raw x-embeddings fed to the input projector.
    pub input_dim: usize,
    /// `Some(d)` switches the vocabulary head to a d-dimensional regression head.
    pub target_dim: Option<usize>,
    pub num_performer_features: usize,
    /// Learned absolute positions available to the transformer.
    pub max_positions: usize,
    pub moe: Option<MoeConfig>,
    pub discretization: Discretization,
    pub record_associations: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Mamba,
            num_layers: 4,
            hidden_dim: 512,
            head_dim: 64,
            ssm_state_size: 128,
            conv_width: 4,
            expand: 2,
            dt_rank: 32,
            ffn_hidden: 2048,
            vocab_size: 200,
            input_dim: 16,
            target_dim: None,
            num_performer_features: 64,
            max_positions: 2048,
            moe: None,
            discretization: Discretization::Zoh,
            record_associations: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the toy experiments. The SSM gets a
    /// single wide layer, which trains much faster at this scale than a
    /// deep narrow stack.
    pub fn toy(family: Family) -> Self {
        let (num_layers, hidden_dim) = match family {
            Family::Mamba => (1, 128),
            _ => (2, 48),
        };
        Self {
            family,
            num_layers,
            hidden_dim,
            head_dim: 16,
            ssm_state_size: 16,
            conv_width: 4,
            expand: 2,
            dt_rank: 4,
            ffn_hidden: 64,
            num_performer_features: 16,
            ..Self::default()
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.hidden_dim
    }

    /// Width of the model's output rows: V, or the regression target width.
    pub fn output_dim(&self) -> usize {
        self.target_dim.unwrap_or(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("ssm_state_size", self.ssm_state_size),
            ("conv_width", self.conv_width),
            ("expand", self.expand),
            ("dt_rank", self.dt_rank),
            ("ffn_hidden", self.ffn_hidden),
            ("input_dim", self.input_dim),
            ("num_performer_features", self.num_performer_features),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.target_dim == Some(0) {
            return Err(Error::Config("target_dim must be at least 1".into()));
        }
        if let Some(moe) = self.moe {
            if moe.num_experts == 0 {
                return Err(Error::Config("mixture of experts needs at least one expert".into()));
            }
            if moe.expert_hidden == 0 {
                return Err(Error::Config("expert_hidden must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Flat key/value form, stable across runs (sorted keys).
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("family", self.family.to_string());
        put("num_layers", self.num_layers.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("head_dim", self.head_dim.to_string());
        put("ssm_state_size", self.ssm_state_size.to_string());
        put("conv_width", self.conv_width.to_string());
        put("expand", self.expand.to_string());
        put("dt_rank", self.dt_rank.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("input_dim", self.input_dim.to_string());
        put("target_dim", self.target_dim.map_or("none".into(), |d| d.to_string()));
        put("num_performer_features", self.num_performer_features.to_string());
        put("max_positions", self.max_positions.to_string());
        put("moe_experts", self.moe.map_or(0, |m| m.num_experts).to_string());
        put("moe_expert_hidden", self.moe.map_or(0, |m| m.expert_hidden).to_string());
        put("discretization", self.discretization.to_string());
        put("record_associations", self.record_associations.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing model key '{k}'")))
        }
        fn num(kv: &BTreeMap<String, String>, k: &str) -> Result<usize> {
            get(kv, k)?
                .parse()
                .map_err(|_| Error::Config(format!("model key '{k}' is not an integer")))
        }
        let target_dim = match get(kv, "target_dim")? {
            "none" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::Config("model key 'target_dim' is not an integer".into()))?,
            ),
        };
        let experts = num(kv, "moe_experts")?;
        let cfg = Self {
            family: get(kv, "family")?.parse()?,
            num_layers: num(kv, "num_layers")?,
            hidden_dim: num(kv, "hidden_dim")?,
            head_dim: num(kv, "head_dim")?,
            ssm_state_size: num(kv, "ssm_state_size")?,
            conv_width: num(kv, "conv_width")?,
            expand: num(kv, "expand")?,
            dt_rank: num(kv, "dt_rank")?,
            ffn_hidden: num(kv, "ffn_hidden")?,
            vocab_size: num(kv, "vocab_size")?,
            input_dim: num(kv, "input_dim")?,
            target_dim,
            num_performer_features: num(kv, "num_performer_features")?,
            max_positions: num(kv, "max_positions")?,
            moe: (experts > 0).then(|| MoeConfig {
                num_experts: experts,
                expert_hidden: num(kv, "moe_expert_hidden").unwrap_or(0),
            }),
            discretization: get(kv, "discretization")?.parse()?,
            record_associations: get(kv, "record_associations")? == "true",
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_configuration() {
        let c = ModelConfig::default();
        assert_eq!((c.num_layers, c.hidden_dim, c.ssm_state_size, c.conv_width), (4, 512, 128, 4));
        assert_eq!(c.vocab_size, 200);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::toy(Family::Performer);
        c.moe = Some(MoeConfig {
            num_experts: 3,
            expert_hidden: 8,
        });
        c.target_dim = Some(50);
        c.discretization = Discretization::Euler;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::toy(Family::Mamba);
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(Family::Mamba);
        c.num_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(Family::Mamba);
        c.moe = Some(MoeConfig {
            num_experts: 0,
            expert_hidden: 4,
        });
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let err = "gru".parse::<Family>().unwrap_err().to_string();
        assert!(err.contains("linear_tf") && err.contains("mamba"));
    }
}
