use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the attention readout is combined with the query value features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Concat,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScaling {
    /// Raw dot products.
    None,
    /// Dot products divided by `sqrt(key_channels)`.
    InvSqrtKey,
}

/// Layout of each key/value encoding layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Conv3x3,
    Conv1x1,
    /// 1×1 channel reduction, relu, 3×3 spatial encoding.
    Conv1x1Conv3x3,
}

/// One backbone stage: `width` output channels, spatial downsampling `stride`
/// (1, 2 or 4; a stride-4 stage is two stride-2 convolutions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of memory frames `T`; 0 selects the per-frame baseline.
    pub memory_length: usize,
    pub key_channels: usize,
    pub value_channels: usize,
    pub num_classes: usize,
    pub backbone: Vec<Stage>,
    pub aggregation: Aggregation,
    pub attention_scaling: AttentionScaling,
    pub encoder: EncoderKind,
    pub aux_loss_weight: f64,
}

impl Default for ModelConfig {
    /// Four memory frames, 64 key / 256 value channels, output stride 16.
    fn default() -> Self {
        Self::with_key_channels(4, 64, 19, vec![
            Stage { width: 8, stride: 2 },
            Stage { width: 16, stride: 2 },
            Stage { width: 32, stride: 4 },
        ])
    }
}

impl ModelConfig {
    /// Value channels follow the 4× key convention.
    pub fn with_key_channels(memory_length: usize, key_channels: usize, num_classes: usize, backbone: Vec<Stage>) -> Self {
        Self {
            memory_length,
            key_channels,
            value_channels: 4 * key_channels,
            num_classes,
            backbone,
            aggregation: Aggregation::Concat,
            attention_scaling: AttentionScaling::None,
            encoder: EncoderKind::Conv1x1Conv3x3,
            aux_loss_weight: 0.4,
        }
    }

    pub fn output_stride(&self) -> usize {
        self.backbone.iter().map(|s| s.stride).product()
    }

    /// Channels entering the segmentation head.
    pub fn head_channels(&self) -> usize {
        match (self.memory_length, self.aggregation) {
            (0, _) | (_, Aggregation::Sum) => self.value_channels,
            (_, Aggregation::Concat) => 2 * self.value_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.key_channels == 0 || self.value_channels == 0 {
            return fail("key and value channels must be positive".into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.backbone.len() < 2 {
            return fail("backbone needs at least two stages (the penultimate one feeds the aux head)".into());
        }
        if let Some(s) = self.backbone.iter().find(|s| s.width == 0 || ![1, 2, 4].contains(&s.stride)) {
            return fail(format!("invalid backbone stage {s:?}: width > 0, stride in {{1, 2, 4}}"));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return fail(format!("aux_loss_weight must be finite and >= 0, got {}", self.aux_loss_weight));
        }
        Ok(())
    }
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: ", $($text, " "),+, ")"),
                        other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Aggregation { Concat => "concat", Sum => "sum" });
keyword_enum!(AttentionScaling { None => "none", InvSqrtKey => "inv_sqrt_ck" });
keyword_enum!(EncoderKind { Conv3x3 => "3x3", Conv1x1 => "1x1", Conv1x1Conv3x3 => "1x1+3x3" });

impl Aggregation {
    pub(crate) fn code(self) -> f64 {
        match self {
            Aggregation::Concat => 0.0,
            Aggregation::Sum => 1.0,
        }
    }

    pub(crate) fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 => Some(Aggregation::Concat),
            1 => Some(Aggregation::Sum),
            _ => None,
        }
    }
}

impl AttentionScaling {
    pub(crate) fn code(self) -> f64 {
        match self {
            AttentionScaling::None => 0.0,
            AttentionScaling::InvSqrtKey => 1.0,
        }
    }

    pub(crate) fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 => Some(AttentionScaling::None),
            1 => Some(AttentionScaling::InvSqrtKey),
            _ => None,
        }
    }
}

impl EncoderKind {
    pub(crate) fn code(self) -> f64 {
        match self {
            EncoderKind::Conv1x1Conv3x3 => 0.0,
            EncoderKind::Conv3x3 => 1.0,
            EncoderKind::Conv1x1 => 2.0,
        }
    }

    pub(crate) fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 => Some(EncoderKind::Conv1x1Conv3x3),
            1 => Some(EncoderKind::Conv3x3),
            2 => Some(EncoderKind::Conv1x1),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!(c.value_channels, 4 * c.key_channels);
        assert_eq!(c.output_stride(), 16);
        assert_eq!(c.head_channels(), 512);
        c.validate().unwrap();
    }

    #[test]
    fn head_channel_arithmetic() {
        let mut c = ModelConfig::default();
        c.aggregation = Aggregation::Sum;
        assert_eq!(c.head_channels(), c.value_channels);
        c.memory_length = 0;
        c.aggregation = Aggregation::Concat;
        assert_eq!(c.head_channels(), c.value_channels);
    }

    #[test]
    fn keyword_round_trip() {
        for e in [EncoderKind::Conv3x3, EncoderKind::Conv1x1, EncoderKind::Conv1x1Conv3x3] {
            assert_eq!(e.to_string().parse::<EncoderKind>().unwrap(), e);
        }
        assert!("avg".parse::<Aggregation>().is_err());
        assert_eq!("inv_sqrt_ck".parse::<AttentionScaling>().unwrap(), AttentionScaling::InvSqrtKey);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.backbone.truncate(1);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.backbone[0].stride = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.num_classes = 256;
        assert!(c.validate().is_err());
    }
}
