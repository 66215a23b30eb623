//! LM block architectures and their shared sublayers.
//!
//! Four variants, all pre-norm with one residual connection per sublayer:
//!
//! * `PrefixMamba`      — mamba2 → mamba2 (pure sequence mixing, no MLPs)
//! * `PrefixSimba`      — mamba2 → feedforward
//! * `CrossSimba`       — mamba2 → cross-attention → feedforward
//! * `CrossTransformer` — causal self-attention → cross-attention → feedforward
//!
//! Prefix variants take their condition through the token sequence itself and
//! reject a memory argument; Cross variants require one.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ssm::Mamba2Layer;
use crate::tensor::{ops, Tape, Tensor};
use crate::{Error, Real, Result};

pub const LAYER_NORM_EPS: Real = 1e-5;

/// The four LM architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockVariant {
    PrefixMamba,
    PrefixSimba,
    CrossSimba,
    CrossTransformer,
}

impl BlockVariant {
    pub fn all() -> [BlockVariant; 4] {
        [
            BlockVariant::PrefixMamba,
            BlockVariant::PrefixSimba,
            BlockVariant::CrossSimba,
            BlockVariant::CrossTransformer,
        ]
    }

    /// Cross variants consume the condition via cross-attention memory;
    /// prefix variants prepend it to the sequence.
    pub fn uses_memory(self) -> bool {
        matches!(self, BlockVariant::CrossSimba | BlockVariant::CrossTransformer)
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::PrefixMamba => "prefix-mamba",
            BlockVariant::PrefixSimba => "prefix-simba",
            BlockVariant::CrossSimba => "cross-simba",
            BlockVariant::CrossTransformer => "cross-transformer",
        }
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<BlockVariant> {
        match s {
            "prefix-mamba" => Ok(BlockVariant::PrefixMamba),
            "prefix-simba" => Ok(BlockVariant::PrefixSimba),
            "cross-simba" => Ok(BlockVariant::CrossSimba),
            "cross-transformer" => Ok(BlockVariant::CrossTransformer),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected prefix-mamba, prefix-simba, cross-simba, cross-transformer)"
            ))),
        }
    }
}

impl std::fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Linear map y = x·W (+ b).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        std: Real,
    ) -> Linear {
        Linear {
            weight: Tensor::randn_param(rng, &[in_dim, out_dim], std),
            bias: with_bias.then(|| Tensor::param(&[out_dim], vec![0.0; out_dim]).expect("bias")),
        }
    }

    pub fn shapes(in_dim: usize, out_dim: usize, with_bias: bool) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![("weight".to_string(), vec![in_dim, out_dim])];
        if with_bias {
            v.push(("bias".to_string(), vec![out_dim]));
        }
        v
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> crate::tensor::Result<Tensor> {
        let y = ops::matmul(tape, x, &self.weight)?;
        match &self.bias {
            Some(b) => ops::add_bias(tape, &y, b),
            None => Ok(y),
        }
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>, prefix: &str) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Pre-norm gain/bias pair.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn init(dim: usize) -> Norm {
        Norm {
            gain: Tensor::param(&[dim], vec![1.0; dim]).expect("gain"),
            bias: Tensor::param(&[dim], vec![0.0; dim]).expect("bias"),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> crate::tensor::Result<Tensor> {
        ops::layer_norm(tape, x, &self.gain, &self.bias, LAYER_NORM_EPS)
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>, prefix: &str) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Channel mixing: linear → GELU → dropout → linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
    pub dropout: Real,
}

impl FeedForward {
    pub fn init(
        rng: &mut ChaCha8Rng,
        hidden: usize,
        inner: usize,
        dropout: Real,
        std: Real,
    ) -> FeedForward {
        FeedForward {
            lin1: Linear::init(rng, hidden, inner, true, std),
            lin2: Linear::init(rng, inner, hidden, true, std),
            dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> crate::tensor::Result<Tensor> {
        let h = self.lin1.forward(tape, x)?;
        let h = ops::gelu(tape, &h)?;
        let h = match rng.as_deref_mut() {
            Some(r) if self.dropout > 0.0 => ops::dropout(tape, &h, self.dropout, r)?,
            _ => h,
        };
        self.lin2.forward(tape, &h)
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>, prefix: &str) {
        self.lin1.named_params(out, &format!("{prefix}.lin1"));
        self.lin2.named_params(out, &format!("{prefix}.lin2"));
    }
}

/// Multi-head attention; self-attention when no memory is given to
/// `forward`, cross-attention otherwise.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub dropout: Real,
}

impl Attention {
    pub fn init(
        rng: &mut ChaCha8Rng,
        hidden: usize,
        n_heads: usize,
        dropout: Real,
        std: Real,
    ) -> Result<Attention> {
        if n_heads == 0 || hidden % n_heads != 0 {
            return Err(Error::config(format!(
                "hidden {hidden} not divisible by {n_heads} heads"
            )));
        }
        // No key bias: softmax scores are invariant to a constant shift per
        // query, so a key bias can never receive gradient.
        Ok(Attention {
            wq: Linear::init(rng, hidden, hidden, true, std),
            wk: Linear::init(rng, hidden, hidden, false, std),
            wv: Linear::init(rng, hidden, hidden, true, std),
            wo: Linear::init(rng, hidden, hidden, true, std),
            n_heads,
            dropout,
        })
    }

    /// Queries come from `x`; keys/values from `memory` when given (no causal
    /// mask over memory), else from `x` itself under a strict causal mask.
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        memory: Option<&Tensor>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> crate::tensor::Result<Tensor> {
        let q = self.wq.forward(tape, x)?;
        let source = memory.unwrap_or(x);
        let k = self.wk.forward(tape, source)?;
        let v = self.wv.forward(tape, source)?;
        let causal = memory.is_none();
        let att = match rng.as_deref_mut() {
            Some(r) if self.dropout > 0.0 => ops::attention(
                tape,
                &q,
                &k,
                &v,
                self.n_heads,
                causal,
                Some((self.dropout, r)),
            )?,
            _ => ops::attention(tape, &q, &k, &v, self.n_heads, causal, None)?,
        };
        self.wo.forward(tape, &att)
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>, prefix: &str) {
        self.wq.named_params(out, &format!("{prefix}.wq"));
        self.wk.named_params(out, &format!("{prefix}.wk"));
        self.wv.named_params(out, &format!("{prefix}.wv"));
        self.wo.named_params(out, &format!("{prefix}.wo"));
    }
}

/// Widths shared by every sublayer of a block.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub hidden: usize,
    pub ssm_inner: usize,
    pub state_dim: usize,
    pub ssm_heads: usize,
    pub conv_width: usize,
    pub attn_heads: usize,
    pub ff_inner: usize,
    pub dropout: Real,
    pub init_std: Real,
}

/// One pre-normed, residual-wrapped sublayer.
#[derive(Debug, Clone)]
pub enum Sublayer {
    Mamba(Norm, Mamba2Layer),
    FeedForward(Norm, FeedForward),
    SelfAttention(Norm, Attention),
    CrossAttention(Norm, Attention),
}

impl Sublayer {
    pub fn kind(&self) -> &'static str {
        match self {
            Sublayer::Mamba(..) => "mamba2",
            Sublayer::FeedForward(..) => "ff",
            Sublayer::SelfAttention(..) => "self_attn",
            Sublayer::CrossAttention(..) => "cross_attn",
        }
    }
}

/// Sublayer kinds per variant, in execution order.
pub fn sublayer_plan(variant: BlockVariant) -> &'static [&'static str] {
    match variant {
        BlockVariant::PrefixMamba => &["mamba2", "mamba2"],
        BlockVariant::PrefixSimba => &["mamba2", "ff"],
        BlockVariant::CrossSimba => &["mamba2", "cross_attn", "ff"],
        BlockVariant::CrossTransformer => &["self_attn", "cross_attn", "ff"],
    }
}

/// One LM block: the variant-specific sequence of pre-normed residual
/// sublayers.
#[derive(Debug, Clone)]
pub struct Block {
    pub variant: BlockVariant,
    pub sublayers: Vec<Sublayer>,
}

impl Block {
    pub fn init(rng: &mut ChaCha8Rng, variant: BlockVariant, dims: &BlockDims) -> Result<Block> {
        let mut sublayers = Vec::new();
        for kind in sublayer_plan(variant) {
            let norm = Norm::init(dims.hidden);
            let sub = match *kind {
                "mamba2" => Sublayer::Mamba(
                    norm,
                    Mamba2Layer::init(
                        rng,
                        dims.hidden,
                        dims.ssm_inner,
                        dims.state_dim,
                        dims.ssm_heads,
                        dims.conv_width,
                        dims.init_std,
                    )?,
                ),
                "ff" => Sublayer::FeedForward(
                    norm,
                    FeedForward::init(rng, dims.hidden, dims.ff_inner, dims.dropout, dims.init_std),
                ),
                "self_attn" => Sublayer::SelfAttention(
                    norm,
                    Attention::init(rng, dims.hidden, dims.attn_heads, dims.dropout, dims.init_std)?,
                ),
                "cross_attn" => Sublayer::CrossAttention(
                    norm,
                    Attention::init(rng, dims.hidden, dims.attn_heads, dims.dropout, dims.init_std)?,
                ),
                other => unreachable!("unknown sublayer kind {other}"),
            };
            sublayers.push(sub);
        }
        Ok(Block { variant, sublayers })
    }

    /// Parameter shapes in `named_params` order, without allocating.
    pub fn param_shapes(variant: BlockVariant, dims: &BlockDims) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (idx, kind) in sublayer_plan(variant).iter().enumerate() {
            let prefix = format!("{idx}.{kind}");
            out.push((format!("{prefix}.norm.gain"), vec![dims.hidden]));
            out.push((format!("{prefix}.norm.bias"), vec![dims.hidden]));
            match *kind {
                "mamba2" => {
                    for (name, shape) in Mamba2Layer::param_shapes(
                        dims.hidden,
                        dims.ssm_inner,
                        dims.state_dim,
                        dims.ssm_heads,
                        dims.conv_width,
                    ) {
                        out.push((format!("{prefix}.{name}"), shape));
                    }
                }
                "ff" => {
                    for (name, shape) in Linear::shapes(dims.hidden, dims.ff_inner, true) {
                        out.push((format!("{prefix}.lin1.{name}"), shape));
                    }
                    for (name, shape) in Linear::shapes(dims.ff_inner, dims.hidden, true) {
                        out.push((format!("{prefix}.lin2.{name}"), shape));
                    }
                }
                "self_attn" | "cross_attn" => {
                    for proj in ["wq", "wk", "wv", "wo"] {
                        let with_bias = proj != "wk";
                        for (name, shape) in Linear::shapes(dims.hidden, dims.hidden, with_bias) {
                            out.push((format!("{prefix}.{proj}.{name}"), shape));
                        }
                    }
                }
                other => unreachable!("unknown sublayer kind {other}"),
            }
        }
        out
    }

    /// Pre-norm residual pass. `memory` is required for Cross variants and
    /// rejected for Prefix variants.
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        memory: Option<&Tensor>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        if self.variant.uses_memory() && memory.is_none() {
            return Err(Error::contract(format!(
                "{} requires a condition memory",
                self.variant
            )));
        }
        if !self.variant.uses_memory() && memory.is_some() {
            return Err(Error::contract(format!(
                "{} is a prefix variant and takes no memory",
                self.variant
            )));
        }
        let mut h = x.clone();
        for sub in &self.sublayers {
            let out = match sub {
                Sublayer::Mamba(norm, layer) => {
                    let normed = norm.forward(tape, &h)?;
                    layer.forward(tape, &normed)?
                }
                Sublayer::FeedForward(norm, ff) => {
                    let normed = norm.forward(tape, &h)?;
                    ff.forward(tape, &normed, rng.as_deref_mut())?
                }
                Sublayer::SelfAttention(norm, attn) => {
                    let normed = norm.forward(tape, &h)?;
                    attn.forward(tape, &normed, None, rng.as_deref_mut())?
                }
                Sublayer::CrossAttention(norm, attn) => {
                    let normed = norm.forward(tape, &h)?;
                    attn.forward(tape, &normed, memory, rng.as_deref_mut())?
                }
            };
            h = ops::add(tape, &h, &out)?;
        }
        Ok(h)
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>, prefix: &str) {
        for (idx, sub) in self.sublayers.iter().enumerate() {
            let sub_prefix = format!("{prefix}{idx}.{}", sub.kind());
            match sub {
                Sublayer::Mamba(norm, layer) => {
                    norm.named_params(out, &format!("{sub_prefix}.norm"));
                    for (name, t) in layer.named_params() {
                        out.push((format!("{sub_prefix}.{name}"), t));
                    }
                }
                Sublayer::FeedForward(norm, ff) => {
                    norm.named_params(out, &format!("{sub_prefix}.norm"));
                    ff.named_params(out, &sub_prefix);
                }
                Sublayer::SelfAttention(norm, attn) | Sublayer::CrossAttention(norm, attn) => {
                    norm.named_params(out, &format!("{sub_prefix}.norm"));
                    attn.named_params(out, &sub_prefix);
                }
            }
        }
    }

    /// Zero every sublayer's output projection, making the block an identity
    /// map. Used by tests and by callers wanting identity-at-init blocks.
    pub fn zero_out_projections(&self) -> Result<()> {
        for sub in &self.sublayers {
            match sub {
                Sublayer::Mamba(_, layer) => {
                    layer
                        .out_proj
                        .set_data(vec![0.0; layer.out_proj.numel()])?;
                }
                Sublayer::FeedForward(_, ff) => {
                    ff.lin2.weight.set_data(vec![0.0; ff.lin2.weight.numel()])?;
                    if let Some(b) = &ff.lin2.bias {
                        b.set_data(vec![0.0; b.numel()])?;
                    }
                }
                Sublayer::SelfAttention(_, attn) | Sublayer::CrossAttention(_, attn) => {
                    attn.wo.weight.set_data(vec![0.0; attn.wo.weight.numel()])?;
                    if let Some(b) = &attn.wo.bias {
                        b.set_data(vec![0.0; b.numel()])?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Additive sinusoidal positional encodings (t_len × width, row-major).
pub fn sinusoidal_encoding(t_len: usize, width: usize) -> Vec<Real> {
    let mut pe = vec![0.0; t_len * width];
    for t in 0..t_len {
        for i in 0..width / 2 {
            let freq = (10_000.0 as Real).powf(-2.0 * i as Real / width as Real);
            let angle = t as Real * freq;
            pe[t * width + 2 * i] = angle.sin();
            if 2 * i + 1 < width {
                pe[t * width + 2 * i + 1] = angle.cos();
            }
        }
    }
    pe
}
