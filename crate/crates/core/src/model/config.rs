use std::fmt;
use std::str::FromStr;

use crate::error::{PahsError, Result};

/// Order of the two ping-pong updates inside one recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateOrder {
    /// Current blurry feature first, then the previous latent feature.
    BlurFirst,
    LatentFirst,
}

/// Which attention refines the hidden state before reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    /// Plain non-local attention (selection score pinned to one).
    NonLocal,
    /// Non-local attention attenuated by a learned per-query selection score.
    Selective,
}

/// Where queries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionSource {
    /// Queries from the blurry feature, keys and values from the hidden state.
    Cross,
    /// Queries, keys and values all from the hidden state.
    SelfAttention,
}

/// Backward-pass window meaning "every remaining frame".
pub const FULL_WINDOW: usize = usize::MAX;

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature channels of the blurry and latent features.
    pub c: usize,
    /// Ping-pong recurrence count.
    pub n_pp: usize,
    /// Token downsampling stride of the attention embeddings.
    pub attn_stride: usize,
    /// Query/key embedding width; `c / 3` when unset.
    pub attn_dim: Option<usize>,
    /// Frames after `t` visible to the backward pass ([`FULL_WINDOW`] for all).
    pub future_window: usize,
    pub bidirectional: bool,
    /// Add the blurry input to the reconstructor output.
    pub global_skip: bool,
    pub seed: u64,
    pub update_order: UpdateOrder,
    pub attention: AttentionKind,
    pub attention_source: AttentionSource,
    pub extractor_blocks: usize,
    pub head_blocks: usize,
    pub tail_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c: 192,
            n_pp: 4,
            attn_stride: 4,
            attn_dim: None,
            future_window: 19,
            bidirectional: true,
            global_skip: true,
            seed: 0,
            update_order: UpdateOrder::BlurFirst,
            attention: AttentionKind::Selective,
            attention_source: AttentionSource::Cross,
            extractor_blocks: 5,
            head_blocks: 3,
            tail_blocks: 2,
        }
    }
}

impl ModelConfig {
    /// Full-size model.
    pub fn full() -> Self {
        ModelConfig::default()
    }

    /// Small preset. Nominally 92 channels; 93 keeps `c / 3` integral.
    pub fn small() -> Self {
        ModelConfig {
            c: 93,
            ..ModelConfig::default()
        }
    }

    /// CPU-friendly preset used by tests and the toy training runs.
    pub fn desk() -> Self {
        ModelConfig {
            c: 24,
            n_pp: 2,
            future_window: 3,
            ..ModelConfig::default()
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.c / 3
    }

    pub fn attn_dim(&self) -> usize {
        self.attn_dim.unwrap_or(self.c / 3)
    }

    /// Required divisor of frame height and width.
    pub fn spatial_multiple(&self) -> usize {
        4 * self.attn_stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.c % 3 != 0 {
            return Err(PahsError::Config(format!(
                "c must be a positive multiple of 3, got {}",
                self.c
            )));
        }
        if self.attn_stride == 0 {
            return Err(PahsError::Config("attn_stride must be positive".into()));
        }
        if self.attn_dim() == 0 {
            return Err(PahsError::Config("attn_dim must be positive".into()));
        }
        Ok(())
    }

    /// Checks that a `height x width` frame fits the shape contracts.
    pub fn check_frame(&self, height: usize, width: usize) -> Result<()> {
        let m = self.spatial_multiple();
        for (axis, len) in [("height", height), ("width", width)] {
            if len == 0 || len % m != 0 {
                return Err(PahsError::Contract(format!(
                    "frame {axis} {len} is not a positive multiple of {m} (4 x attn_stride)"
                )));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "c" => self.c = parse(key, value)?,
            "n_pp" => self.n_pp = parse(key, value)?,
            "attn_stride" => self.attn_stride = parse(key, value)?,
            "attn_dim" => {
                self.attn_dim = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "future_window" => self.future_window = parse_window(value)?,
            "bidirectional" => self.bidirectional = parse_bool(key, value)?,
            "global_skip" => self.global_skip = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "update_order" => self.update_order = value.parse()?,
            "attention" => self.attention = value.parse()?,
            "attention_source" => self.attention_source = value.parse()?,
            "extractor_blocks" => self.extractor_blocks = parse(key, value)?,
            "head_blocks" => self.head_blocks = parse(key, value)?,
            "tail_blocks" => self.tail_blocks = parse(key, value)?,
            other => return Err(PahsError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)` pairs, in a fixed order that
    /// [`ModelConfig::set`] accepts back.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("c", self.c.to_string()),
            ("n_pp", self.n_pp.to_string()),
            ("attn_stride", self.attn_stride.to_string()),
            (
                "attn_dim",
                self.attn_dim.map_or("auto".to_string(), |d| d.to_string()),
            ),
            ("future_window", window_to_string(self.future_window)),
            ("bidirectional", self.bidirectional.to_string()),
            ("global_skip", self.global_skip.to_string()),
            ("seed", self.seed.to_string()),
            ("update_order", self.update_order.to_string()),
            ("attention", self.attention.to_string()),
            ("attention_source", self.attention_source.to_string()),
            ("extractor_blocks", self.extractor_blocks.to_string()),
            ("head_blocks", self.head_blocks.to_string()),
            ("tail_blocks", self.tail_blocks.to_string()),
        ]
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| PahsError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(PahsError::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

pub fn parse_window(value: &str) -> Result<usize> {
    match value {
        "full" | "inf" => Ok(FULL_WINDOW),
        v => parse("future_window", v),
    }
}

pub fn window_to_string(window: usize) -> String {
    if window == FULL_WINDOW {
        "full".into()
    } else {
        window.to_string()
    }
}

macro_rules! keyword_enum {
    ($ty:ident, $what:expr, { $($variant:ident => $text:expr),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = PahsError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(PahsError::Config(format!("unknown {} `{other}`", $what))),
                }
            }
        }
    };
}

keyword_enum!(UpdateOrder, "update order", { BlurFirst => "b_first", LatentFirst => "l_first" });
keyword_enum!(AttentionKind, "attention kind", { None => "none", NonLocal => "nla", Selective => "snla" });
keyword_enum!(AttentionSource, "attention source", { Cross => "cross", SelfAttention => "self" });

/// Splits a `key = value` text (`#` starts a comment) into
/// `(line number, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            PahsError::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        out.push((lineno + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key = value` config text onto `base`.
pub fn parse_config_text(text: &str, base: &mut ModelConfig) -> Result<()> {
    for (lineno, key, value) in parse_key_values(text)? {
        base.set(&key, &value)
            .map_err(|e| PahsError::Config(format!("line {lineno}: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_full_model() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.c, 192);
        assert_eq!(cfg.hidden_channels(), 64);
        assert_eq!(cfg.attn_dim(), 64);
        assert_eq!(cfg.n_pp, 4);
        assert_eq!(cfg.attn_stride, 4);
        assert_eq!(cfg.future_window, 19);
        cfg.validate().unwrap();
    }

    #[test]
    fn small_preset_is_divisible() {
        let cfg = ModelConfig::small();
        assert_eq!(cfg.c, 93);
        cfg.validate().unwrap();
        let mut bad = cfg;
        bad.c = 92;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frame_divisibility() {
        let cfg = ModelConfig::desk();
        cfg.check_frame(64, 32).unwrap();
        assert!(cfg.check_frame(64, 40).is_err());
        assert!(cfg.check_frame(0, 16).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.future_window = FULL_WINDOW;
        cfg.attention = AttentionKind::NonLocal;
        cfg.attn_dim = Some(5);
        let text: String = cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let mut back = ModelConfig::default();
        parse_config_text(&text, &mut back).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let mut cfg = ModelConfig::default();
        parse_config_text("# header\nc = 12 # trailing\n\n n_pp=0\n", &mut cfg).unwrap();
        assert_eq!((cfg.c, cfg.n_pp), (12, 0));
        assert!(parse_config_text("nonsense", &mut cfg).is_err());
        assert!(parse_config_text("colour = blue", &mut cfg).is_err());
        assert!(parse_config_text("bidirectional = maybe", &mut cfg).is_err());
    }
}
