use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How raw inputs become tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InputSpec {
    /// Token ids looked up in an embedding table.
    Sequence { vocab_size: usize },
    /// A square single-channel image of `grid_side * patch_size` pixels per
    /// side, cut into `grid_side^2` patches that are linearly projected.
    Grid { grid_side: usize, patch_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sequence,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Maximum token count, including the class token when present.
    pub max_tokens: usize,
    pub num_classes: usize,
    pub input: InputSpec,
    /// Prepend a learned class token and read the logits from it. Without it
    /// the first input token is the readout position.
    pub use_class_token: bool,
    #[serde(default, skip_serializing_if = "Readout::is_first")]
    pub readout: Readout,
}

/// Which final hidden state feeds the classifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Row 0: the class token, or the first input token without one.
    #[default]
    First,
    /// Mean of the content rows (class token excluded).
    Mean,
}

impl Readout {
    pub fn is_first(&self) -> bool {
        *self == Readout::First
    }
}

impl ModelConfig {
    /// Desk-scale sequence classifier: 4 layers, 4 heads, width 32, 32 tokens.
    pub fn sequence(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 32,
            ffn_dim: 64,
            max_tokens: 32,
            num_classes,
            input: InputSpec::Sequence { vocab_size },
            use_class_token: true,
            readout: Readout::First,
        }
    }

    /// Desk-scale grid classifier over a 4x4 patch grid plus a class token.
    pub fn grid(grid_side: usize, patch_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 32,
            ffn_dim: 64,
            max_tokens: grid_side * grid_side + 1,
            num_classes,
            input: InputSpec::Grid { grid_side, patch_size },
            use_class_token: true,
            readout: Readout::First,
        }
    }

    pub fn mode(&self) -> Mode {
        match self.input {
            InputSpec::Sequence { .. } => Mode::Sequence,
            InputSpec::Grid { .. } => Mode::Grid,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> Option<usize> {
        match self.input {
            InputSpec::Grid { patch_size, .. } => Some(patch_size * patch_size),
            InputSpec::Sequence { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return bad("layer, head, hidden and ffn sizes must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_tokens < 2 {
            return bad("max_tokens must be at least 2".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        match self.input {
            InputSpec::Sequence { vocab_size: 0 } => bad("empty vocabulary".into()),
            InputSpec::Grid { grid_side, patch_size } => {
                if grid_side == 0 || patch_size == 0 {
                    return bad("grid_side and patch_size must be positive".into());
                }
                let need = grid_side * grid_side + usize::from(self.use_class_token);
                if need != self.max_tokens {
                    return bad(format!("grid needs max_tokens = {need}, got {}", self.max_tokens));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Offsets of one encoder layer's tensors inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub(crate) offset: usize,
}

/// Flat parameter layout. Every tensor is row-major; linear maps are stored
/// as `in x out` so that `y = x W + b`.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub patch_bias: Option<usize>,
    pub class: Option<usize>,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub wc: usize,
    pub bc: usize,
    pub total: usize,
    pub tensors: Vec<TensorInfo>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors: Vec<TensorInfo> = Vec::new();
        let mut total = 0;
        let mut alloc = |name: String, rows: usize, cols: usize| {
            let offset = total;
            total += rows * cols;
            tensors.push(TensorInfo {
                name,
                rows,
                cols,
                offset,
            });
            offset
        };
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let (embed, patch_bias) = match cfg.input {
            InputSpec::Sequence { vocab_size } => (alloc("embed.tokens".into(), vocab_size, d), None),
            InputSpec::Grid { patch_size, .. } => (
                alloc("embed.patch.weight".into(), patch_size * patch_size, d),
                Some(alloc("embed.patch.bias".into(), 1, d)),
            ),
        };
        let class = cfg.use_class_token.then(|| alloc("embed.class".into(), 1, d));
        let pos = alloc("embed.position".into(), cfg.max_tokens, d);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let mut a = |n: &str, r, c| alloc(format!("layer{l}.{n}"), r, c);
                LayerOffsets {
                    ln1_g: a("ln1.gain", 1, d),
                    ln1_b: a("ln1.bias", 1, d),
                    wq: a("attn.query.weight", d, d),
                    bq: a("attn.query.bias", 1, d),
                    wk: a("attn.key.weight", d, d),
                    bk: a("attn.key.bias", 1, d),
                    wv: a("attn.value.weight", d, d),
                    bv: a("attn.value.bias", 1, d),
                    wo: a("attn.out.weight", d, d),
                    ln2_g: a("ln2.gain", 1, d),
                    ln2_b: a("ln2.bias", 1, d),
                    w1: a("ffn.in.weight", d, f),
                    b1: a("ffn.in.bias", 1, f),
                    w2: a("ffn.out.weight", f, d),
                    b2: a("ffn.out.bias", 1, d),
                }
            })
            .collect();
        let lnf_g = alloc("final_ln.gain".into(), 1, d);
        let lnf_b = alloc("final_ln.bias".into(), 1, d);
        let wc = alloc("classifier.weight".into(), d, cfg.num_classes);
        let bc = alloc("classifier.bias".into(), 1, cfg.num_classes);
        Self {
            embed,
            patch_bias,
            class,
            pos,
            layers,
            lnf_g,
            lnf_b,
            wc,
            bc,
            total,
            tensors,
        }
    }

    pub fn is_layer_norm_gain(&self, name: &str) -> bool {
        name.ends_with(".gain")
    }
}
