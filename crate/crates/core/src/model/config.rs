use std::fmt;
use std::str::FromStr;

use super::ModelError;

macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}
pub(crate) use text_enum;

text_enum!(
    /// Placement of layer normalization inside each encoder layer.
    NormStyle { NormFormer => "normformer", Pre => "pre", Post => "post" }
);

text_enum!(
    Activation { Geglu => "geglu", Gelu => "gelu" }
);

text_enum!(
    PositionEncoding { Relative => "relative", Absolute => "absolute" }
);

text_enum!(
    /// Optional sentence-level head trained next to MLM.
    NspHead { None => "none", Document => "document", Order => "order" }
);

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Feed-forward width. For GEGLU this is already the reduced width; the
    /// GELU variant widens it by 3/2 so both have the same parameter count.
    pub ff_intermediate: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub norm_style: NormStyle,
    pub activation: Activation,
    pub positions: PositionEncoding,
    pub ff_init_scaling: bool,
    pub ff_biases: bool,
    pub nsp_head: NspHead,
}

impl Default for ModelConfig {
    /// Base-sized encoder.
    fn default() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            head_dim: 64,
            ff_intermediate: 2048,
            vocab_size: 16_384,
            max_len: 512,
            dropout: 0.1,
            attention_dropout: 0.1,
            norm_style: NormStyle::NormFormer,
            activation: Activation::Geglu,
            positions: PositionEncoding::Relative,
            ff_init_scaling: true,
            ff_biases: false,
            nsp_head: NspHead::None,
        }
    }
}

impl ModelConfig {
    /// Two-layer, 16-dimensional encoder used for gradient checks and
    /// desk-scale experiments.
    pub fn toy(vocab_size: usize, max_len: usize) -> Self {
        Self {
            layers: 2,
            hidden: 16,
            heads: 2,
            head_dim: 8,
            ff_intermediate: 32,
            vocab_size,
            max_len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.max_len == 0 {
            return invalid("layers, heads, head_dim and max_len must be positive".into());
        }
        if self.hidden != self.heads * self.head_dim {
            return invalid(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden, self.heads, self.head_dim
            ));
        }
        if self.ff_intermediate == 0 {
            return invalid("ff_intermediate must be positive".into());
        }
        if self.vocab_size <= crate::tokenizer::SPECIAL_TOKENS.len() {
            return invalid(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            ));
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return invalid(format!("{name} {rate} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Actual feed-forward width for the configured activation.
    pub fn ff_width(&self) -> usize {
        match self.activation {
            Activation::Geglu => self.ff_intermediate,
            Activation::Gelu => (1.5 * self.ff_intermediate as f64).round() as usize,
        }
    }

    /// Standard deviation of the initial weight distribution, `sqrt(2 / 5d)`.
    pub fn init_std(&self) -> f64 {
        (2.0 / (5.0 * self.hidden as f64)).sqrt()
    }

    /// Ordered `(key, value)` pairs; inverse of [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("ff_intermediate", self.ff_intermediate.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("attention_dropout", self.attention_dropout.to_string()),
            ("norm_style", self.norm_style.to_string()),
            ("activation", self.activation.to_string()),
            ("positions", self.positions.to_string()),
            ("ff_init_scaling", self.ff_init_scaling.to_string()),
            ("ff_biases", self.ff_biases.to_string()),
            ("nsp_head", self.nsp_head.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for an
    /// unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ModelError>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e: T::Err| ModelError::InvalidConfig(format!("{key} = {value}: {e}")))
        }
        match key {
            "layers" => self.layers = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "ff_intermediate" => self.ff_intermediate = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "attention_dropout" => self.attention_dropout = parse(key, value)?,
            "norm_style" => self.norm_style = parse(key, value)?,
            "activation" => self.activation = parse(key, value)?,
            "positions" => self.positions = parse(key, value)?,
            "ff_init_scaling" => self.ff_init_scaling = parse(key, value)?,
            "ff_biases" => self.ff_biases = parse(key, value)?,
            "nsp_head" => self.nsp_head = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
