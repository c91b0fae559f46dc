use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::numerics::NORM_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Group,
    Batch,
    Layer,
}

/// Order of the two middle modules inside a conformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerOrder {
    /// FFN → MHSA → Conv → FFN
    NonStreaming,
    /// FFN → Conv → MHSA → FFN
    Streaming,
}

/// Scaled-down analogs of the small/medium/large encoder sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizePreset {
    ToyS,
    ToyM,
    ToyL,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(format!("unknown {} `{}`", stringify!($ty), other)),
                }
            }
        }
    };
}

string_enum!(NormKind { Group => "group", Batch => "batch", Layer => "layer" });
string_enum!(LayerOrder { NonStreaming => "nonstreaming", Streaming => "streaming" });
string_enum!(SizePreset { ToyS => "toyS", ToyM => "toyM", ToyL => "toyL" });

/// Architecture of the conformer-lite encoder and its classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_expansion: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    pub norm_kind: NormKind,
    pub group_count: usize,
    pub layer_order: LayerOrder,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Rows of the learned positional table; inputs may be at most this long.
    pub max_frames: usize,
    pub positional: bool,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub size_preset: Option<SizePreset>,
}

impl ModelConfig {
    pub fn preset(preset: SizePreset) -> Self {
        let (num_layers, model_dim) = match preset {
            SizePreset::ToyS => (4, 16),
            SizePreset::ToyM => (6, 24),
            SizePreset::ToyL => (8, 32),
        };
        Self {
            num_layers,
            model_dim,
            size_preset: Some(preset),
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.model_dim * self.ffn_expansion
    }

    /// Channels normalized together by group norm.
    pub fn channels_per_group(&self) -> usize {
        self.model_dim / self.group_count
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("ffn_expansion", self.ffn_expansion),
            ("num_heads", self.num_heads),
            ("group_count", self.group_count),
            ("feature_dim", self.feature_dim),
            ("max_frames", self.max_frames),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.model_dim % self.group_count != 0 {
            return fail(format!(
                "model_dim {} not divisible by group_count {}",
                self.model_dim, self.group_count
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_momentum must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Stable textual form, one `key=value` per line. Used for hashing and
    /// for config files.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        line("num_layers", self.num_layers.to_string());
        line("model_dim", self.model_dim.to_string());
        line("ffn_expansion", self.ffn_expansion.to_string());
        line("num_heads", self.num_heads.to_string());
        line("conv_kernel", self.conv_kernel.to_string());
        line("norm_kind", self.norm_kind.to_string());
        line("group_count", self.group_count.to_string());
        line("layer_order", self.layer_order.to_string());
        line("num_classes", self.num_classes.to_string());
        line("feature_dim", self.feature_dim.to_string());
        line("max_frames", self.max_frames.to_string());
        line("positional", self.positional.to_string());
        line("norm_eps", format!("{:e}", self.norm_eps));
        line("bn_momentum", format!("{:e}", self.bn_momentum));
        s
    }

    /// Hash of the architecture-relevant fields; the size preset label is
    /// not part of it.
    pub fn hash(&self) -> u64 {
        crate::rng::fnv1a(self.canonical().as_bytes())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            model_dim: 32,
            ffn_expansion: 4,
            num_heads: 4,
            conv_kernel: 7,
            norm_kind: NormKind::Group,
            group_count: 4,
            layer_order: LayerOrder::NonStreaming,
            num_classes: 8,
            feature_dim: 12,
            max_frames: 16,
            positional: true,
            norm_eps: NORM_EPS,
            bn_momentum: 0.1,
            size_preset: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [SizePreset::ToyS, SizePreset::ToyM, SizePreset::ToyL] {
            ModelConfig::preset(p).validate().unwrap();
        }
        let l = ModelConfig::preset(SizePreset::ToyL);
        assert_eq!((l.num_layers, l.model_dim), (8, 32));
    }

    #[test]
    fn rejects_indivisible_dims() {
        let bad = ModelConfig {
            num_heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            group_count: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            conv_kernel: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn enum_text_round_trip() {
        for k in [NormKind::Group, NormKind::Batch, NormKind::Layer] {
            assert_eq!(k.as_str().parse::<NormKind>().unwrap(), k);
        }
        assert_eq!("streaming".parse::<LayerOrder>().unwrap(), LayerOrder::Streaming);
        assert!("toyXL".parse::<SizePreset>().is_err());
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            norm_kind: NormKind::Batch,
            ..a.clone()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
