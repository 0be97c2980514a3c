//! Modal feature compression and interaction at the bottleneck.
//!
//! Each modality's bottleneck feature is tokenized and refined by `l1`
//! ordinary self-attention layers of its own. The four features are then
//! concatenated and compressed (a token branch plus a residual conv branch)
//! into `F_c`, whose tokens form the compressed stream. `l2` interaction
//! layers update that stream by attending from it into the four modality
//! streams: queries and keys of all modalities are concatenated along the
//! token axis, values are summed, and each is mixed with the compressed
//! stream's own projections through `alpha` and `beta`.
//!
//! Token-count bookkeeping: with `N` tokens per stream the concatenated keys
//! have `4N` tokens. Queries are pooled back to `N` by averaging the four
//! modality copies of each token, and the value block (`N` tokens) is tiled
//! once per modality group, so the attention matrix is `N x 4N` and the
//! output keeps `N` tokens.
//!
//! Width bookkeeping: queries and keys are reduced to `d_k = E / (2 heads)`
//! per head and values raised to `d_v = 2E / heads`; the output projection
//! maps `heads * d_v` back to `E`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Conv3dGeometry, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv3d, Init, LayerNorm, Linear, Mlp, ParamId, ResBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfciConfig {
    /// Single-modality self-attention layers per modality.
    pub l1: usize,
    /// Interaction layers.
    pub l2: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Channel width of the compressed feature handed to the decoder.
    /// `0` means "same as one encoder's bottleneck width".
    pub bottleneck_channels: usize,
    /// Hidden width of the transformer MLPs, as a multiple of their width.
    pub mlp_ratio: usize,
    /// Edge of the token grid the positional encodings are stored at; other
    /// grids are served by trilinear resampling.
    pub token_grid: usize,
    /// Compression stage on; when off the compressed stream is the mean of
    /// the modality streams and the spatial path a 1x1x1 projection.
    pub mfc: bool,
    /// Interaction layers on; when off the `l2` layers are plain
    /// self-attention over the compressed stream.
    pub mfi: bool,
}

impl Default for MfciConfig {
    fn default() -> Self {
        Self {
            l1: 4,
            l2: 4,
            heads: 8,
            embed_dim: 128,
            patch_size: 1,
            alpha: 0.5,
            beta: 0.5,
            bottleneck_channels: 0,
            mlp_ratio: 2,
            token_grid: 8,
            mfc: true,
            mfi: true,
        }
    }
}

impl MfciConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.l1 < 1 || self.l2 < 1 {
            return bad(format!("l1 and l2 must be at least 1, got ({}, {})", self.l1, self.l2));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.patch_size == 0 || self.mlp_ratio == 0 || self.token_grid == 0 {
            return bad("heads, embed_dim, patch_size, mlp_ratio and token_grid must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(2 * self.heads) {
            return bad(format!(
                "embed_dim {} must be divisible by 2 * heads = {}",
                self.embed_dim,
                2 * self.heads
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be non-negative, got ({}, {})", self.alpha, self.beta));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.embed_dim / (2 * self.heads)
    }

    pub fn d_v(&self) -> usize {
        2 * self.embed_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Modality(usize),
    Fused,
    Compressed,
}

/// `[B, N, E]` tokens laid out over a `grid` of patches in (d, h, w) raster
/// order.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: [usize; 3],
    pub source: TokenSource,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Patch embedding, learned positional encoding and a projection of the
/// per-channel spatial means, summed.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub patch: Conv3d,
    pub pos: ParamId,
    pub channel_avg: Linear,
    pub patch_size: usize,
    pub embed_dim: usize,
}

impl Tokenizer {
    pub fn new(init: &mut Init, name: &str, cin: usize, cfg: &MfciConfig) -> Self {
        let p = cfg.patch_size;
        let g = cfg.token_grid;
        let e = cfg.embed_dim;
        Self {
            patch: Conv3d::new(init, &format!("{name}.patch"), cin, e, Conv3dGeometry { kernel: p, stride: p, padding: 0 }, true),
            pos: init.normal(format!("{name}.pos"), &[e, g, g, g], 0.02),
            channel_avg: Linear::new(init, &format!("{name}.channel_avg"), cin, e, false),
            patch_size: p,
            embed_dim: e,
        }
    }

    pub fn grid(&self, shape: &[usize]) -> Result<[usize; 3]> {
        let p = self.patch_size;
        if shape.len() != 5 || shape[2..].iter().any(|&n| n == 0 || n % p != 0) {
            return shape_err(format!("spatial extents of {shape:?} must be positive multiples of patch size {p}"));
        }
        Ok([shape[2] / p, shape[3] / p, shape[4] / p])
    }

    /// Positional encodings for `grid`, as `[N, E]`.
    pub fn positions(&self, p: &Bound, grid: [usize; 3]) -> Result<Var> {
        let mut pe = p.var(self.pos).clone();
        for (axis, &n) in grid.iter().enumerate() {
            if pe.shape()[axis + 1] != n {
                pe = pe.resample_axis(axis + 1, n)?;
            }
        }
        pe.reshape(&[self.embed_dim, grid.iter().product()])?.transpose_last()
    }

    pub fn forward(&self, p: &Bound, f: &Var, source: TokenSource) -> Result<TokenSequence> {
        let grid = self.grid(f.shape())?;
        let (b, c) = (f.shape()[0], f.shape()[1]);
        let n: usize = grid.iter().product();
        let e = self.embed_dim;
        let embedded = self.patch.forward(p, f)?.reshape(&[b, e, n])?.transpose_last()?;
        let means = f.mean_axes(&[2, 3, 4])?.reshape(&[b, 1, c])?;
        let avg = self.channel_avg.forward(p, &means)?;
        let tokens = embedded.add(&avg)?.add(&self.positions(p, grid)?)?;
        Ok(TokenSequence { tokens, grid, source })
    }
}

/// Per-token linear map back to a `cout`-channel patch, reassembled on the
/// grid.
#[derive(Clone, Debug)]
pub struct Detokenizer {
    pub proj: Linear,
    pub cout: usize,
    pub patch_size: usize,
}

impl Detokenizer {
    pub fn new(init: &mut Init, name: &str, embed: usize, cout: usize, patch_size: usize) -> Self {
        Self {
            proj: Linear::new(init, &format!("{name}.proj"), embed, cout * patch_size.pow(3), true),
            cout,
            patch_size,
        }
    }

    pub fn forward(&self, p: &Bound, tokens: &Var, grid: [usize; 3]) -> Result<Var> {
        let b = tokens.shape()[0];
        let ps = self.patch_size;
        let [gd, gh, gw] = grid;
        self.proj
            .forward(p, tokens)?
            .reshape(&[b, gd, gh, gw, self.cout, ps, ps, ps])?
            .permute(&[0, 4, 1, 5, 2, 6, 3, 7])?
            .reshape(&[b, self.cout, gd * ps, gh * ps, gw * ps])
    }
}

/// `[B, N, h * d] -> [B, h, N, d]`
pub fn split_heads(x: &Var, heads: usize) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return shape_err(format!("cannot split {s:?} into {heads} heads"));
    }
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

/// `[B, h, N, d] -> [B, N, h * d]`
pub fn merge_heads(x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Scaled dot-product attention on head-split blocks. Returns the output
/// `[B, h, Nq, d_v]` and the row-stochastic weights `[B, h, Nq, Nk]`.
pub fn attention_core(q: &Var, k: &Var, v: &Var, d_k: usize) -> Result<(Var, Var)> {
    let logits = q.matmul(&k.transpose_last()?)?.mul_scalar(1.0 / (d_k as f64).sqrt());
    let weights = logits.softmax(3)?;
    Ok((weights.matmul(v)?, weights))
}

/// Pre-norm transformer layer with ordinary multi-head self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm1: LayerNorm,
    pub qkv: QkvProjection,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, cfg: &MfciConfig) -> Self {
        let e = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), e),
            qkv: QkvProjection::new(init, &format!("{name}.qkv"), e, e, e),
            out: Linear::new(init, &format!("{name}.out"), e, e, true),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), e),
            mlp: Mlp::new(init, &format!("{name}.mlp"), e, cfg.mlp_ratio * e),
            heads: cfg.heads,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<(Var, Var)> {
        let t = project_qkv(&self.qkv, p, &self.norm1.forward(p, x)?)?;
        let d = x.shape()[2] / self.heads;
        let (o, w) = attention_core(
            &split_heads(&t.q, self.heads)?,
            &split_heads(&t.k, self.heads)?,
            &split_heads(&t.v, self.heads)?,
            d,
        )?;
        let x = x.add(&self.out.forward(p, &merge_heads(&o)?)?)?;
        let y = x.add(&self.mlp.forward(p, &self.norm2.forward(p, &x)?)?)?;
        Ok((y, w))
    }
}

/// Token-major `[B, N, width]` query, key and value blocks.
#[derive(Clone, Debug)]
pub struct QkvTriple {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl QkvProjection {
    pub fn new(init: &mut Init, name: &str, din: usize, dqk: usize, dv: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), din, dqk, false),
            k: Linear::new(init, &format!("{name}.k"), din, dqk, false),
            v: Linear::new(init, &format!("{name}.v"), din, dv, false),
        }
    }
}

pub fn project_qkv(proj: &QkvProjection, p: &Bound, tokens: &Var) -> Result<QkvTriple> {
    Ok(QkvTriple {
        q: proj.q.forward(p, tokens)?,
        k: proj.k.forward(p, tokens)?,
        v: proj.v.forward(p, tokens)?,
    })
}

/// Sum of the four modality value blocks.
pub fn sum_values(v: [&Var; 4]) -> Result<Var> {
    v[0].add(v[1])?.add(v[2])?.add(v[3])
}

/// `x + mean over the embedding axis of x`, per token.
pub fn add_channel_avg(x: &Var) -> Result<Var> {
    x.add(&x.mean_axes(&[2])?)
}

/// Mean of the four modality copies of each token: `[B, 4N, w] -> [B, N, w]`.
pub fn pool_modalities(x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(4) {
        return shape_err(format!("cannot pool {s:?} over four modality groups"));
    }
    x.reshape(&[s[0], 4, s[1] / 4, s[2]])?
        .mean_axes(&[1])?
        .reshape(&[s[0], s[1] / 4, s[2]])
}

pub fn tile_modalities(x: &Var) -> Result<Var> {
    Var::concat(&[x.clone(), x.clone(), x.clone(), x.clone()], 1)
}

/// Parameters of the Q/K/V reshaping stages of one interaction layer.
#[derive(Clone, Debug)]
pub struct InteractionHeads {
    pub lin_q: Linear,
    pub mlp_q: Mlp,
    pub lin_k: Linear,
    pub mlp_k: Mlp,
    pub lin_v: Linear,
    pub mlp_v: Mlp,
}

impl InteractionHeads {
    pub fn new(init: &mut Init, name: &str, cfg: &MfciConfig) -> Self {
        let e = cfg.embed_dim;
        let qk = cfg.heads * cfg.d_k();
        let v = cfg.heads * cfg.d_v();
        let r = cfg.mlp_ratio;
        Self {
            lin_q: Linear::new(init, &format!("{name}.lin_q"), e, qk, true),
            mlp_q: Mlp::new(init, &format!("{name}.mlp_q"), qk, r * qk),
            lin_k: Linear::new(init, &format!("{name}.lin_k"), e, qk, true),
            mlp_k: Mlp::new(init, &format!("{name}.mlp_k"), qk, r * qk),
            lin_v: Linear::new(init, &format!("{name}.lin_v"), e, v, true),
            mlp_v: Mlp::new(init, &format!("{name}.mlp_v"), v, r * v),
        }
    }
}

/// Everything the interactive attention computes, for inspection.
pub struct InteractionOutput {
    /// `[B, N, heads * d_v]`, before the output projection.
    pub out: Var,
    /// `[B, heads, N, 4N]`.
    pub weights: Var,
    /// Summed modality values after the raise and MLP, `[B, N, heads * d_v]`.
    pub f_v: Var,
}

/// Interactive multi-head attention.
///
/// `modal` holds the four modality triples at width `E`; `compressed` holds
/// the compressed stream's query and key at `heads * d_k` and value at
/// `heads * d_v`.
pub fn interactive_attention(
    heads_params: &InteractionHeads,
    p: &Bound,
    modal: &[QkvTriple; 4],
    compressed: &QkvTriple,
    cfg: &MfciConfig,
) -> Result<InteractionOutput> {
    let n = modal[0].q.shape()[1];
    if modal.iter().any(|t| t.q.shape()[1] != n || t.k.shape()[1] != n || t.v.shape()[1] != n) {
        return shape_err("modality token counts differ");
    }
    if compressed.q.shape()[1] != n {
        return shape_err(format!("compressed stream has {} tokens, modality streams {n}", compressed.q.shape()[1]));
    }
    let (a, b) = (cfg.alpha, cfg.beta);
    let h = cfg.heads;

    let f_q = Var::concat(&modal.iter().map(|t| t.q.clone()).collect::<Vec<_>>(), 1)?;
    let f_k = Var::concat(&modal.iter().map(|t| t.k.clone()).collect::<Vec<_>>(), 1)?;
    let f_v = sum_values([&modal[0].v, &modal[1].v, &modal[2].v, &modal[3].v])?;

    let f_q = heads_params
        .mlp_q
        .forward_residual(p, &heads_params.lin_q.forward(p, &add_channel_avg(&f_q)?)?)?;
    let f_k = heads_params
        .mlp_k
        .forward_residual(p, &heads_params.lin_k.forward(p, &add_channel_avg(&f_k)?)?)?;
    let f_v = heads_params.mlp_v.forward_residual(p, &heads_params.lin_v.forward(p, &f_v)?)?;

    let q = pool_modalities(&f_q)?.mul_scalar(a).add(&compressed.q.mul_scalar(b))?;
    let k = f_k.mul_scalar(a).add(&tile_modalities(&compressed.k)?.mul_scalar(b))?;
    let v = tile_modalities(&f_v.mul_scalar(a).add(&compressed.v.mul_scalar(b))?)?;

    let (o, weights) = attention_core(&split_heads(&q, h)?, &split_heads(&k, h)?, &split_heads(&v, h)?, cfg.d_k())?;
    Ok(InteractionOutput { out: merge_heads(&o)?, weights, f_v })
}

/// One interaction layer: the compressed stream attends into the fixed
/// modality streams.
#[derive(Clone, Debug)]
pub struct MfiLayer {
    pub norm_modal: LayerNorm,
    pub modal_qkv: [QkvProjection; 4],
    pub norm_comp: LayerNorm,
    pub comp_qkv: QkvProjection,
    pub heads: InteractionHeads,
    pub out: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl MfiLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &MfciConfig) -> Self {
        let e = cfg.embed_dim;
        let qk = cfg.heads * cfg.d_k();
        let v = cfg.heads * cfg.d_v();
        let modal_qkv = std::array::from_fn(|m| QkvProjection::new(init, &format!("{name}.modal{m}"), e, e, e));
        Self {
            norm_modal: LayerNorm::new(init, &format!("{name}.norm_modal"), e),
            modal_qkv,
            norm_comp: LayerNorm::new(init, &format!("{name}.norm_comp"), e),
            comp_qkv: QkvProjection::new(init, &format!("{name}.comp"), e, qk, v),
            heads: InteractionHeads::new(init, &format!("{name}.heads"), cfg),
            out: Linear::new(init, &format!("{name}.out"), v, e, true),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), e),
            ffn: Mlp::new(init, &format!("{name}.ffn"), e, cfg.mlp_ratio * e),
        }
    }

    pub fn forward(&self, p: &Bound, modal: &[Var; 4], s: &Var, cfg: &MfciConfig) -> Result<(Var, Var)> {
        let mut triples = Vec::with_capacity(4);
        for (x, proj) in modal.iter().zip(&self.modal_qkv) {
            triples.push(project_qkv(proj, p, &self.norm_modal.forward(p, x)?)?);
        }
        let triples: [QkvTriple; 4] = triples.try_into().map_err(|_| Error::Shape("four modality streams".into()))?;
        let comp = project_qkv(&self.comp_qkv, p, &self.norm_comp.forward(p, s)?)?;
        let att = interactive_attention(&self.heads, p, &triples, &comp, cfg)?;
        let s = s.add(&self.out.forward(p, &att.out)?)?;
        let s = s.add(&self.ffn.forward(p, &self.norm_ffn.forward(p, &s)?)?)?;
        Ok((s, att.weights))
    }
}

/// Compression stage.
#[derive(Clone, Debug)]
pub enum Compression {
    Full {
        fuse_tokens: Tokenizer,
        seq_branch: Detokenizer,
        spatial: ResBlock,
        comp_tokens: Tokenizer,
    },
    /// Ablated: 1x1x1 projection of the concatenation; the compressed stream
    /// is the mean of the modality streams.
    Plain { proj: Conv3d },
}

/// Output of the compression stage.
pub struct CompressedFeature {
    pub f_c: Var,
    /// Compressed-stream tokens, `[B, N, E]`.
    pub tokens: TokenSequence,
}

#[derive(Clone, Debug)]
pub enum Interaction {
    Mfi(Vec<MfiLayer>),
    Plain(Vec<SelfAttention>),
}

#[derive(Clone, Debug)]
pub struct Mfci {
    pub cfg: MfciConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub modal_tokens: [Tokenizer; 4],
    /// `single[layer][modality]`.
    pub single: Vec<[SelfAttention; 4]>,
    pub compression: Compression,
    pub interaction: Interaction,
    pub out_norm: LayerNorm,
    pub out_detok: Detokenizer,
}

pub struct MfciOutput {
    pub out: Var,
    pub f_c: Var,
    /// Attention weights of every layer, single-modality layers first.
    pub weights: Vec<Var>,
}

impl Mfci {
    /// `channels` is the width of each of the four inputs.
    pub fn new(init: &mut Init, name: &str, channels: usize, cfg: &MfciConfig, norm_groups: usize) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let cout = if cfg.bottleneck_channels == 0 { channels } else { cfg.bottleneck_channels };
        if cout >= 4 * channels {
            return Err(Error::Config(format!(
                "bottleneck_channels {cout} does not compress the {} concatenated channels",
                4 * channels
            )));
        }
        let modal_tokens = std::array::from_fn(|m| Tokenizer::new(init, &format!("{name}.tok{m}"), channels, cfg));
        let single = (0..cfg.l1)
            .map(|l| std::array::from_fn(|m| SelfAttention::new(init, &format!("{name}.single{l}.m{m}"), cfg)))
            .collect();
        let compression = if cfg.mfc {
            Compression::Full {
                fuse_tokens: Tokenizer::new(init, &format!("{name}.mfc.tok"), 4 * channels, cfg),
                seq_branch: Detokenizer::new(init, &format!("{name}.mfc.seq"), e, cout, cfg.patch_size),
                spatial: ResBlock::new(init, &format!("{name}.mfc.res"), 4 * channels, cout, norm_groups),
                comp_tokens: Tokenizer::new(init, &format!("{name}.mfc.comp_tok"), cout, cfg),
            }
        } else {
            Compression::Plain {
                proj: Conv3d::new(init, &format!("{name}.proj"), 4 * channels, cout, Conv3dGeometry::same(1), true),
            }
        };
        let interaction = if cfg.mfi {
            Interaction::Mfi((0..cfg.l2).map(|l| MfiLayer::new(init, &format!("{name}.mfi{l}"), cfg)).collect())
        } else {
            Interaction::Plain(
                (0..cfg.l2)
                    .map(|l| SelfAttention::new(init, &format!("{name}.sa{l}"), cfg))
                    .collect(),
            )
        };
        Ok(Self {
            cfg: cfg.clone(),
            in_channels: channels,
            out_channels: cout,
            modal_tokens,
            single,
            compression,
            interaction,
            out_norm: LayerNorm::new(init, &format!("{name}.out_norm"), e),
            out_detok: Detokenizer::new(init, &format!("{name}.out"), e, cout, cfg.patch_size),
        })
    }

    pub fn tokenize(&self, p: &Bound, inputs: [&Var; 4]) -> Result<[TokenSequence; 4]> {
        let shape = inputs[0].shape();
        if inputs.iter().any(|x| x.shape() != shape) || shape.len() != 5 || shape[1] != self.in_channels {
            return shape_err(format!(
                "expected four [B, {}, D, H, W] inputs of equal shape, got {:?}",
                self.in_channels,
                inputs.iter().map(|x| x.shape().to_vec()).collect::<Vec<_>>()
            ));
        }
        let mut out = Vec::with_capacity(4);
        for (m, (tok, x)) in self.modal_tokens.iter().zip(inputs).enumerate() {
            out.push(tok.forward(p, x, TokenSource::Modality(m))?);
        }
        out.try_into().map_err(|_| Error::Shape("four token streams".into()))
    }

    pub fn mfc_compress(&self, p: &Bound, inputs: [&Var; 4], modal: &[Var; 4], grid: [usize; 3]) -> Result<CompressedFeature> {
        let f = Var::concat(&inputs.map(|x| x.clone()), 1)?;
        match &self.compression {
            Compression::Full { fuse_tokens, seq_branch, spatial, comp_tokens } => {
                let seq = fuse_tokens.forward(p, &f, TokenSource::Fused)?;
                let f_c = seq_branch.forward(p, &seq.tokens, seq.grid)?.add(&spatial.forward(p, &f)?)?;
                let tokens = comp_tokens.forward(p, &f_c, TokenSource::Compressed)?;
                Ok(CompressedFeature { f_c, tokens })
            }
            Compression::Plain { proj } => {
                let mean = sum_values([&modal[0], &modal[1], &modal[2], &modal[3]])?.mul_scalar(0.25);
                Ok(CompressedFeature {
                    f_c: proj.forward(p, &f)?,
                    tokens: TokenSequence { tokens: mean, grid, source: TokenSource::Compressed },
                })
            }
        }
    }

    /// Inputs in modality order (T1, T1ce, T2, FLAIR).
    pub fn forward(&self, p: &Bound, inputs: [&Var; 4]) -> Result<MfciOutput> {
        let mut weights = Vec::new();
        let seqs = self.tokenize(p, inputs)?;
        let grid = seqs[0].grid;
        let mut modal: Vec<Var> = seqs.iter().map(|s| s.tokens.clone()).collect();
        for layer in &self.single {
            for (x, sa) in modal.iter_mut().zip(layer) {
                let (y, w) = sa.forward(p, x)?;
                *x = y;
                weights.push(w);
            }
        }
        let modal: [Var; 4] = modal.try_into().map_err(|_| Error::Shape("four token streams".into()))?;
        let comp = self.mfc_compress(p, inputs, &modal, grid)?;
        let mut s = comp.tokens.tokens.clone();
        match &self.interaction {
            Interaction::Mfi(layers) => {
                for layer in layers {
                    let (y, w) = layer.forward(p, &modal, &s, &self.cfg)?;
                    s = y;
                    weights.push(w);
                }
            }
            Interaction::Plain(layers) => {
                for layer in layers {
                    let (y, w) = layer.forward(p, &s)?;
                    s = y;
                    weights.push(w);
                }
            }
        }
        let back = self.out_detok.forward(p, &self.out_norm.forward(p, &s)?, grid)?;
        Ok(MfciOutput { out: comp.f_c.add(&back)?, f_c: comp.f_c, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> MfciConfig {
        MfciConfig { l1: 1, l2: 1, heads: 1, embed_dim: 4, patch_size: 2, token_grid: 2, ..Default::default() }
    }

    fn build(channels: usize, cfg: &MfciConfig) -> (ParamStore, Mfci) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mfci::new(&mut Init { store: &mut store, rng: &mut rng }, "mfci", channels, cfg, 4).unwrap();
        (store, m)
    }

    fn zero_prefix(store: &mut ParamStore, prefix: &str) {
        let ids: Vec<_> = store.with_prefix(prefix).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    fn input(shape: &[usize], seed: f64) -> Var {
        Var::constant(Tensor::from_fn(shape, |i| (i as f64 * 0.37 + seed).sin()))
    }

    #[test]
    fn token_count_and_raster_order() {
        let cfg = MfciConfig { embed_dim: 2, heads: 1, patch_size: 2, token_grid: 2, ..tiny_cfg() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tok = Tokenizer::new(&mut Init { store: &mut store, rng: &mut rng }, "t", 1, &cfg);
        // patch conv sums its window into embed channel 0, everything else off
        let mut w = Tensor::zeros(&[2, 1, 2, 2, 2]);
        w.data_mut()[..8].fill(1.0);
        store.set(tok.patch.weight, w).unwrap();
        store.set(tok.pos, Tensor::zeros(&[2, 2, 2, 2])).unwrap();
        zero_prefix(&mut store, "t.channel_avg");
        let p = store.bind();
        let x = Tensor::from_fn(&[1, 1, 4, 4, 4], |i| i as f64);
        let seq = tok.forward(&p, &Var::constant(x.clone()), TokenSource::Fused).unwrap();
        assert_eq!(seq.grid, [2, 2, 2]);
        assert_eq!(seq.tokens.shape(), &[1, 8, 2]);
        let mut n = 0;
        for gd in 0..2 {
            for gh in 0..2 {
                for gw in 0..2 {
                    let mut s = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                s += x.at(&[0, 0, 2 * gd + a, 2 * gh + b, 2 * gw + c]);
                            }
                        }
                    }
                    assert_eq!(seq.tokens.value().at(&[0, n, 0]), s);
                    n += 1;
                }
            }
        }
    }

    #[test]
    fn whole_volume_patch_is_one_token() {
        let cfg = MfciConfig { patch_size: 4, token_grid: 1, ..tiny_cfg() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tok = Tokenizer::new(&mut Init { store: &mut store, rng: &mut rng }, "t", 3, &cfg);
        let seq = tok.forward(&store.bind(), &input(&[2, 3, 4, 4, 4], 0.0), TokenSource::Fused).unwrap();
        assert_eq!(seq.tokens.shape(), &[2, 1, 4]);
        assert!(tok.forward(&store.bind(), &input(&[1, 3, 4, 4, 6], 0.0), TokenSource::Fused).is_err());
    }

    #[test]
    fn zero_parameters_tokenize_to_zero() {
        let (mut store, m) = build(2, &tiny_cfg());
        zero_prefix(&mut store, "mfci.tok0");
        let p = store.bind();
        let seq = m.modal_tokens[0].forward(&p, &Var::constant(Tensor::zeros(&[1, 2, 4, 4, 4])), TokenSource::Modality(0)).unwrap();
        assert!(seq.tokens.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detokenize_inverts_patch_layout() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Detokenizer::new(&mut Init { store: &mut store, rng: &mut rng }, "d", 8, 1, 2);
        let eye = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        store.set(d.proj.weight, eye).unwrap();
        let p = store.bind();
        // token n carries values 8n..8n+8 in raster order within its patch
        let t = Var::constant(Tensor::from_fn(&[1, 8, 8], |i| i as f64));
        let out = d.forward(&p, &t, [2, 2, 2]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let token = (z / 2) * 4 + (y / 2) * 2 + x / 2;
                    let inner = (z % 2) * 4 + (y % 2) * 2 + x % 2;
                    assert_eq!(out.value().at(&[0, 0, z, y, x]), (token * 8 + inner) as f64);
                }
            }
        }
    }

    #[test]
    fn hand_attention_example() {
        let q = Var::constant(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 0.0]).unwrap());
        let k = q.clone();
        let v = Var::constant(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 2.0]).unwrap());
        let (o, w) = attention_core(&q, &k, &v, 1).unwrap();
        let e = 1f64.exp();
        assert!((w.value().data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w.value().data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((o.value().data()[0] - (e + 2.0) / (e + 1.0)).abs() < 1e-12);
        assert!((o.value().data()[0] - 1.2689).abs() < 1e-4);
    }

    #[test]
    fn hand_projection_example() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = QkvProjection::new(&mut Init { store: &mut store, rng: &mut rng }, "p", 2, 2, 2);
        store.set(proj.q.weight, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        store.set(proj.k.weight, Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        store.set(proj.v.weight, Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, -1.0]).unwrap()).unwrap();
        let t = project_qkv(&proj, &store.bind(), &Var::constant(Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap())).unwrap();
        assert_eq!(t.q.value().data(), &[-2.0, -2.0]);
        assert_eq!(t.k.value().data(), &[-1.0, 1.0]);
        assert_eq!(t.v.value().data(), &[2.0, 1.0]);
    }

    #[test]
    fn interaction_shapes_for_several_token_counts() {
        let cfg = MfciConfig { heads: 2, embed_dim: 8, ..tiny_cfg() };
        for n in [1usize, 8, 27] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let layer = MfiLayer::new(&mut Init { store: &mut store, rng: &mut rng }, "l", &cfg);
            let p = store.bind();
            let modal: [Var; 4] = std::array::from_fn(|m| input(&[2, n, 8], m as f64));
            let s = input(&[2, n, 8], 9.0);
            let (y, w) = layer.forward(&p, &modal, &s, &cfg).unwrap();
            assert_eq!(y.shape(), &[2, n, 8]);
            assert_eq!(w.shape(), &[2, 2, n, 4 * n]);
        }
    }

    #[test]
    fn single_token_attention_returns_values() {
        let cfg = MfciConfig { heads: 1, embed_dim: 4, alpha: 1.0, beta: 0.0, ..tiny_cfg() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = InteractionHeads::new(&mut Init { store: &mut store, rng: &mut rng }, "h", &cfg);
        for prefix in ["h.mlp_q", "h.mlp_k", "h.mlp_v"] {
            zero_prefix(&mut store, prefix);
        }
        let p = store.bind();
        let modal: [QkvTriple; 4] = std::array::from_fn(|m| QkvTriple {
            q: input(&[1, 1, 4], m as f64),
            k: input(&[1, 1, 4], m as f64 + 0.5),
            v: input(&[1, 1, 4], m as f64 + 0.25),
        });
        let comp = QkvTriple { q: input(&[1, 1, 2], 7.0), k: input(&[1, 1, 2], 8.0), v: input(&[1, 1, 8], 9.0) };
        let out = interactive_attention(&heads, &p, &modal, &comp, &cfg).unwrap();
        // independent F_V: sum of values through the raise only
        let mut sum = Tensor::zeros(&[4]);
        for t in &modal {
            sum.add_assign(&t.v.value().reshape(&[4]).unwrap());
        }
        let w = store.get(heads.lin_v.weight);
        let b = store.get(heads.lin_v.bias.unwrap());
        for j in 0..8 {
            let expect: f64 = (0..4).map(|i| sum.data()[i] * w.at(&[i, j])).sum::<f64>() + b.data()[j];
            assert!((out.out.value().data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn value_sum_is_order_free_and_linear() {
        let v: Vec<Var> = (0..4).map(|m| input(&[1, 3, 4], m as f64)).collect();
        let a = sum_values([&v[0], &v[1], &v[2], &v[3]]).unwrap();
        let b = sum_values([&v[3], &v[1], &v[0], &v[2]]).unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let s = 2.5;
        let scaled: Vec<Var> = v.iter().map(|x| x.mul_scalar(s)).collect();
        let c = sum_values([&scaled[0], &scaled[1], &scaled[2], &scaled[3]]).unwrap();
        for (x, y) in c.value().data().iter().zip(a.value().data()) {
            assert!((x - s * y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shape_and_compression_ratio() {
        let (store, m) = build(4, &tiny_cfg());
        assert_eq!(m.out_channels, 4);
        let p = store.bind();
        let xs: Vec<Var> = (0..4).map(|i| input(&[1, 4, 4, 4, 4], i as f64)).collect();
        let out = m.forward(&p, [&xs[0], &xs[1], &xs[2], &xs[3]]).unwrap();
        assert_eq!(out.out.shape(), &[1, 4, 4, 4, 4]);
        assert_eq!(out.weights.len(), 4 + 1);
        for w in &out.weights {
            let d = w.value().data();
            let cols = *w.shape().last().unwrap();
            for row in d.chunks(cols) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_branches_leave_the_spatial_path() {
        let (mut store, m) = build(2, &tiny_cfg());
        for prefix in ["mfci.out.", "mfci.mfc.seq"] {
            zero_prefix(&mut store, prefix);
        }
        let p = store.bind();
        let xs: Vec<Var> = (0..4).map(|i| input(&[1, 2, 4, 4, 4], i as f64)).collect();
        let out = m.forward(&p, [&xs[0], &xs[1], &xs[2], &xs[3]]).unwrap();
        let Compression::Full { spatial, .. } = &m.compression else { unreachable!() };
        let f = Var::concat(&xs, 1).unwrap();
        let expect = spatial.forward(&p, &f).unwrap();
        for (a, b) in out.out.value().data().iter().zip(expect.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_residual_block_projects_the_concatenation() {
        let (mut store, m) = build(1, &MfciConfig { bottleneck_channels: 2, ..tiny_cfg() });
        zero_prefix(&mut store, "mfci.mfc.seq");
        zero_prefix(&mut store, "mfci.mfc.res.conv2");
        let Compression::Full { spatial, .. } = &m.compression else { unreachable!() };
        let sc = spatial.shortcut.as_ref().unwrap();
        let w = Tensor::new(vec![2, 4, 1, 1, 1], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        store.set(sc.weight, w).unwrap();
        let p = store.bind();
        let xs: Vec<Var> = (0..4).map(|i| Var::constant(Tensor::full(&[1, 1, 2, 2, 2], (i + 1) as f64))).collect();
        let modal: [Var; 4] = std::array::from_fn(|_| Var::constant(Tensor::zeros(&[1, 1, 4])));
        let c = m.mfc_compress(&p, [&xs[0], &xs[1], &xs[2], &xs[3]], &modal, [1, 1, 1]).unwrap();
        let d = c.f_c.value();
        assert!(d.narrow(1, 0, 1).unwrap().data().iter().all(|&v| v == 1.0 + 2.0 * 3.0));
        assert!(d.narrow(1, 1, 1).unwrap().data().iter().all(|&v| v == 2.0 - 4.0));
    }

    #[test]
    fn ablated_variants_run() {
        for (mfc, mfi) in [(false, true), (true, false), (false, false)] {
            let (store, m) = build(2, &MfciConfig { mfc, mfi, ..tiny_cfg() });
            let p = store.bind();
            let xs: Vec<Var> = (0..4).map(|i| input(&[1, 2, 4, 4, 4], i as f64)).collect();
            let out = m.forward(&p, [&xs[0], &xs[1], &xs[2], &xs[3]]).unwrap();
            assert_eq!(out.out.shape(), &[1, 2, 4, 4, 4]);
        }
    }

    #[test]
    fn positional_grid_is_resampled() {
        let cfg = tiny_cfg();
        let (store, m) = build(2, &cfg);
        let p = store.bind();
        let xs: Vec<Var> = (0..4).map(|i| input(&[1, 2, 8, 4, 6], i as f64)).collect();
        let out = m.forward(&p, [&xs[0], &xs[1], &xs[2], &xs[3]]).unwrap();
        assert_eq!(out.out.shape(), &[1, 2, 8, 4, 6]);
    }

    #[test]
    fn config_validation() {
        assert!(MfciConfig::default().validate().is_ok());
        assert!(MfciConfig { l1: 0, ..Default::default() }.validate().is_err());
        assert!(MfciConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(MfciConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        let d = MfciConfig::default();
        assert_eq!((d.d_k(), d.d_v()), (8, 32));
    }
}
