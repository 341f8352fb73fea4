//! Low-rank spatial attention: the block, the backbone around it and the
//! ablation variants.
//!
//! One block maps point features `H: [N, d]` to `H_next` by
//!
//! ```text
//! Hn     = Norm(H)
//! Z      = MHA(P, Hn, Hn)               compress N points to M latents
//! Z'     = latent_mix(Z)                pre-norm FFN / self-attention / FFN
//! dH     = MHA(Hn, Z', Z')              reconstruct per point
//! G      = H + dH
//! H_next = G + FFN(Norm(G))
//! ```
//!
//! so the spatial coupling factors through `M` latent tokens and costs
//! `O(N M d + M^2 d)` instead of `O(N^2 d)`.
//!
//! Parameters live in a flat [`ParamStore`]; a [`ModelLayout`] records which
//! entries play which role. Binding a model to a tape turns every stored
//! tensor into a leaf, in store order.

mod basis;
mod checkpoint;
mod flops;
mod kernel;
mod slicing;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    self, ffn_apply, init_ffn, init_mha, init_norm, linear, multi_head_attention_traced, norm, FfnParams,
    MhaParams, NormKind, NormParams,
};
use crate::tensor::Tensor;

pub use basis::{fixed_basis_mix, fourier_basis, BasisMatrix};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, save_oracle_checkpoint, Checkpoint, CheckpointKind, CheckpointManifest, TensorEntry,
};
pub use flops::{block_flops, dense_attention_flops, measure_block_flops, BlockFlops};
pub use kernel::{InducedKernel, MAX_KERNEL_POINTS};
pub use slicing::{slicing_compress, SliceAxis};

/// Which low-rank template a block instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Compress, latent FFN/self-attention/FFN, reconstruct.
    #[default]
    Full,
    /// Latent self-attention replaced by a per-latent MLP of matched size.
    NoIntraAttn,
    /// Compression keys and reconstruction queries share one projection.
    SymmetricTied,
    /// Latent processing skipped: compress then reconstruct.
    LinearNo,
    /// `Phi G Phi^T Hn` with a fixed Fourier basis and learnable `G`.
    FixedBasis,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoIntraAttn,
        Variant::SymmetricTied,
        Variant::LinearNo,
        Variant::FixedBasis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIntraAttn => "no_intra_attn",
            Variant::SymmetricTied => "symmetric_tied",
            Variant::LinearNo => "linear_no",
            Variant::FixedBasis => "fixed_basis",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown variant `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrsaConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub latent_count: usize,
    pub ffn_ratio: usize,
    pub num_freqs: usize,
    pub norm: NormKind,
    pub variant: Variant,
    pub d_in: usize,
    pub d_out: usize,
    pub d_phys: usize,
    /// Start every residual branch at zero (attention output projections,
    /// FFN second layers, the basis coupling), so each block is the identity.
    pub zero_init_residual: bool,
}

impl Default for LrsaConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            latent_count: 8,
            ffn_ratio: 2,
            num_freqs: 8,
            norm: NormKind::LayerNorm,
            variant: Variant::Full,
            d_in: 1,
            d_out: 1,
            d_phys: 1,
            zero_init_residual: false,
        }
    }
}

impl LrsaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.latent_count == 0 {
            return bad("latent_count must be at least 1".into());
        }
        if self.ffn_ratio == 0 || self.num_freqs == 0 {
            return bad("ffn_ratio and num_freqs must be at least 1".into());
        }
        if self.d_in == 0 || self.d_out == 0 || self.d_phys == 0 {
            return bad("d_in, d_out and d_phys must be at least 1".into());
        }
        if self.variant == Variant::FixedBasis && self.d_phys != 1 {
            return bad("the fixed Fourier basis is built on 1-d coordinates only".into());
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_ratio * self.width
    }

    /// Hidden width of the MLP that replaces latent self-attention, chosen so
    /// `2 d w + w + d` matches the `4 d^2` weights of the attention it replaces.
    pub fn mixer_mlp_hidden(&self) -> usize {
        let d = self.width as f64;
        (((4.0 * d * d - d) / (2.0 * d + 1.0)).round() as usize).max(1)
    }

    pub fn pe_width(&self) -> usize {
        2 * self.num_freqs * self.d_phys
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Per-latent processing: the three pre-norm residual sub-steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMixLayout {
    pub norm_in: NormParams<ParamId>,
    pub ffn_in: FfnParams<ParamId>,
    pub norm_mid: NormParams<ParamId>,
    pub mixer: LatentMixer,
    pub norm_out: NormParams<ParamId>,
    pub ffn_out: FfnParams<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentMixer {
    SelfAttention(MhaParams<ParamId>),
    /// Per-latent MLP: no exchange between latent tokens.
    Mlp(FfnParams<ParamId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMixLayout {
    /// Latent queries `P: [M, d]`.
    pub latents: ParamId,
    pub down: MhaParams<ParamId>,
    pub latent: Option<LatentMixLayout>,
    pub up: MhaParams<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GlobalMixLayout {
    Attention(AttentionMixLayout),
    /// Learnable `G: [M, M]` between fixed basis projections.
    FixedBasis { g: ParamId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    pub norm_in: NormParams<ParamId>,
    pub mix: GlobalMixLayout,
    pub norm_ffn: NormParams<ParamId>,
    pub ffn: FfnParams<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub lift: FfnParams<ParamId>,
    pub layers: Vec<LayerLayout>,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
}

/// A configured backbone with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LrsaModel {
    pub config: LrsaConfig,
    pub params: ParamStore,
    pub layout: ModelLayout,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    zero_residual: bool,
}

impl Builder<'_> {
    fn norm(&mut self, prefix: &str, kind: NormKind, d: usize) -> NormParams<ParamId> {
        let p = init_norm(kind, d);
        NormParams {
            gain: self.store.add(format!("{prefix}.gain"), p.gain),
            bias: p.bias.map(|b| self.store.add(format!("{prefix}.bias"), b)),
        }
    }

    fn ffn(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize, residual: bool) -> FfnParams<ParamId> {
        let mut p = init_ffn(&mut self.rng, d_in, hidden, d_out);
        if residual && self.zero_residual {
            p.w2 = Tensor::zeros(&[hidden, d_out]);
        }
        FfnParams {
            w1: self.store.add(format!("{prefix}.w1"), p.w1),
            b1: self.store.add(format!("{prefix}.b1"), p.b1),
            w2: self.store.add(format!("{prefix}.w2"), p.w2),
            b2: self.store.add(format!("{prefix}.b2"), p.b2),
        }
    }

    /// `tied_query` reuses an existing id for `W_Q` instead of creating one.
    fn mha(&mut self, prefix: &str, d: usize, heads: usize, tied_query: Option<ParamId>) -> MhaParams<ParamId> {
        let p = init_mha(&mut self.rng, d, heads);
        let wq = match tied_query {
            Some(id) => id,
            None => self.store.add(format!("{prefix}.wq"), p.wq),
        };
        let wo = if self.zero_residual { Tensor::zeros(&[d, d]) } else { p.wo };
        MhaParams {
            wq,
            wk: self.store.add(format!("{prefix}.wk"), p.wk),
            wv: self.store.add(format!("{prefix}.wv"), p.wv),
            wo: self.store.add(format!("{prefix}.wo"), wo),
            heads,
        }
    }
}

impl LrsaModel {
    /// Fresh parameters: weights `N(0, 1/fan_in)`, biases 0, gains 1, latent
    /// queries `N(0, 1/d)`, basis coupling `G = I`.
    pub fn new(config: LrsaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.width;
        let f = c.ffn_hidden();
        let mut store = ParamStore::default();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero_residual: c.zero_init_residual,
        };
        let lift = b.ffn("lift", c.d_in + c.pe_width(), f, d, false);
        let mut layers = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let pre = format!("layers.{l}");
            let norm_in = b.norm(&format!("{pre}.norm_in"), c.norm, d);
            let mix = if c.variant == Variant::FixedBasis {
                let g = if c.zero_init_residual {
                    Tensor::zeros(&[c.latent_count, c.latent_count])
                } else {
                    Tensor::eye(c.latent_count)
                };
                GlobalMixLayout::FixedBasis {
                    g: b.store.add(format!("{pre}.basis_g"), g),
                }
            } else {
                let p = Tensor::randn(&[c.latent_count, d], 1.0 / (d as f64).sqrt(), &mut b.rng);
                let latents = b.store.add(format!("{pre}.latent_queries"), p);
                let down = b.mha(&format!("{pre}.down"), d, c.heads, None);
                let latent = if c.variant == Variant::LinearNo {
                    None
                } else {
                    let lp = format!("{pre}.latent");
                    let norm_in = b.norm(&format!("{lp}.norm_in"), c.norm, d);
                    let ffn_in = b.ffn(&format!("{lp}.ffn_in"), d, f, d, true);
                    let norm_mid = b.norm(&format!("{lp}.norm_mid"), c.norm, d);
                    let mixer = if c.variant == Variant::NoIntraAttn {
                        let w = c.mixer_mlp_hidden();
                        LatentMixer::Mlp(b.ffn(&format!("{lp}.mlp"), d, w, d, true))
                    } else {
                        LatentMixer::SelfAttention(b.mha(&format!("{lp}.self_attn"), d, c.heads, None))
                    };
                    let norm_out = b.norm(&format!("{lp}.norm_out"), c.norm, d);
                    let ffn_out = b.ffn(&format!("{lp}.ffn_out"), d, f, d, true);
                    Some(LatentMixLayout {
                        norm_in,
                        ffn_in,
                        norm_mid,
                        mixer,
                        norm_out,
                        ffn_out,
                    })
                };
                let tied = (c.variant == Variant::SymmetricTied).then_some(down.wk);
                let up = b.mha(&format!("{pre}.up"), d, c.heads, tied);
                GlobalMixLayout::Attention(AttentionMixLayout {
                    latents,
                    down,
                    latent,
                    up,
                })
            };
            let norm_ffn = b.norm(&format!("{pre}.norm_ffn"), c.norm, d);
            let ffn = b.ffn(&format!("{pre}.ffn"), d, f, d, true);
            layers.push(LayerLayout {
                norm_in,
                mix,
                norm_ffn,
                ffn,
            });
        }
        let w = nn::init_weight(&mut b.rng, d, c.d_out);
        let readout_w = b.store.add("readout.w", w);
        let readout_b = b.store.add("readout.b", Tensor::zeros(&[c.d_out]));
        let layout = ModelLayout {
            lift,
            layers,
            readout_w,
            readout_b,
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// One differentiable leaf per stored tensor, indexed by `ParamId`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Parameters as constants (inference, analysis).
    pub fn bind_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().map(|t| tape.constant(t.clone())).collect()
    }

    /// Lift, `depth` blocks and the linear readout. `features` is
    /// `[.., N, d_in]` on the tape, `coords` the matching `[.., N, d_phys]`.
    pub fn forward(&self, tape: &mut Tape, pv: &[Var], features: Var, coords: &Tensor) -> Result<Var> {
        Ok(self.forward_traced(tape, pv, features, coords)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape, pv: &[Var], features: Var, coords: &Tensor) -> Result<ForwardTrace> {
        let c = &self.config;
        let fs = tape.shape(features).to_vec();
        let cs = coords.shape();
        if fs.len() != cs.len()
            || fs.len() < 2
            || fs[..fs.len() - 1] != cs[..cs.len() - 1]
            || fs[fs.len() - 1] != c.d_in
            || cs[cs.len() - 1] != c.d_phys
        {
            return Err(Error::dim("backbone inputs (features vs coords)", &fs, cs));
        }
        let pe = nn::positional_encoding(coords, c.num_freqs)?;
        let pe = tape.constant(pe);
        let x = tape.concat_last(&[features, pe])?;
        let lifted = ffn_apply(tape, x, &self.layout.lift.map(|id| pv[id.0]))?;
        let mut h = lifted;
        let mut blocks = Vec::with_capacity(self.layout.layers.len());
        for layer in &self.layout.layers {
            let tr = block_forward(tape, c, layer, pv, h, coords)?;
            h = tr.output;
            blocks.push(tr);
        }
        let output = linear(tape, h, pv[self.layout.readout_w.0], Some(pv[self.layout.readout_b.0]))?;
        Ok(ForwardTrace { lifted, blocks, output })
    }

    /// Inference on plain tensors.
    pub fn predict(&self, features: &Tensor, coords: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.bind_const(&mut tape);
        let f = tape.constant(features.clone());
        let out = self.forward(&mut tape, &pv, f, coords)?;
        Ok(tape.value(out).clone())
    }
}

/// Intermediate handles of one backbone evaluation.
pub struct ForwardTrace {
    pub lifted: Var,
    pub blocks: Vec<BlockTrace>,
    pub output: Var,
}

/// Intermediate handles of one block evaluation.
pub struct BlockTrace {
    pub input: Var,
    pub normed: Var,
    /// Compressed latents `Z` (attention variants).
    pub latents: Option<Var>,
    /// Latents after mixing `Z'` (equal to `Z` for `linear_no`).
    pub mixed: Option<Var>,
    pub delta: Var,
    pub output: Var,
    /// Per-head compression weights `[.., M, N]`.
    pub down_weights: Vec<Var>,
    /// Per-head reconstruction weights `[.., N, M]`.
    pub up_weights: Vec<Var>,
}

/// `Z = MHA(P, Hn, Hn)`: `M` latent tokens whatever `N` is. `hn` is the
/// block-entry normalised field.
pub fn compress(tape: &mut Tape, mix: &AttentionMixLayout, pv: &[Var], hn: Var) -> Result<(Var, Vec<Var>)> {
    let tr = multi_head_attention_traced(tape, pv[mix.latents.0], hn, &mix.down.map(|id| pv[id.0]))?;
    Ok((tr.out, tr.weights))
}

/// The three pre-norm residual sub-steps on the latent tokens.
pub fn latent_mix(tape: &mut Tape, kind: NormKind, lm: &LatentMixLayout, pv: &[Var], z: Var) -> Result<Var> {
    let bind_n = |n: &NormParams<ParamId>| n.map(|id| pv[id.0]);
    let bind_f = |f: &FfnParams<ParamId>| f.map(|id| pv[id.0]);

    let n = norm(tape, z, &bind_n(&lm.norm_in), kind)?;
    let f = ffn_apply(tape, n, &bind_f(&lm.ffn_in))?;
    let z1 = tape.add(z, f)?;

    let n = norm(tape, z1, &bind_n(&lm.norm_mid), kind)?;
    let m = match &lm.mixer {
        LatentMixer::SelfAttention(p) => nn::multi_head_attention(tape, n, n, &p.map(|id| pv[id.0]))?,
        LatentMixer::Mlp(p) => ffn_apply(tape, n, &bind_f(p))?,
    };
    let z2 = tape.add(z1, m)?;

    let n = norm(tape, z2, &bind_n(&lm.norm_out), kind)?;
    let f = ffn_apply(tape, n, &bind_f(&lm.ffn_out))?;
    tape.add(z2, f)
}

/// `dH = MHA(Hn, Z', Z')`: each point queries the mixed latents.
pub fn reconstruct(tape: &mut Tape, mix: &AttentionMixLayout, pv: &[Var], hn: Var, zp: Var) -> Result<(Var, Vec<Var>)> {
    let tr = multi_head_attention_traced(tape, hn, zp, &mix.up.map(|id| pv[id.0]))?;
    Ok((tr.out, tr.weights))
}

/// One block: global mix on the normalised field, residual, pointwise FFN
/// residual. `coords` is only read by the fixed-basis variant.
pub fn block_forward(
    tape: &mut Tape,
    config: &LrsaConfig,
    layer: &LayerLayout,
    pv: &[Var],
    h: Var,
    coords: &Tensor,
) -> Result<BlockTrace> {
    let hn = norm(tape, h, &layer.norm_in.map(|id| pv[id.0]), config.norm)?;
    let mut trace = BlockTrace {
        input: h,
        normed: hn,
        latents: None,
        mixed: None,
        delta: hn,
        output: h,
        down_weights: vec![],
        up_weights: vec![],
    };
    let delta = match &layer.mix {
        GlobalMixLayout::Attention(mix) => {
            let (z, dw) = compress(tape, mix, pv, hn)?;
            let zp = match &mix.latent {
                Some(lm) => latent_mix(tape, config.norm, lm, pv, z)?,
                None => z,
            };
            let (delta, uw) = reconstruct(tape, mix, pv, hn, zp)?;
            trace.latents = Some(z);
            trace.mixed = Some(zp);
            trace.down_weights = dw;
            trace.up_weights = uw;
            delta
        }
        GlobalMixLayout::FixedBasis { g } => {
            let phi = fourier_basis(coords, config.latent_count)?;
            basis::fixed_basis_mix_on_tape(tape, &phi, pv[g.0], hn)?
        }
    };
    let g = tape.add(h, delta)?;
    let gn = norm(tape, g, &layer.norm_ffn.map(|id| pv[id.0]), config.norm)?;
    let f = ffn_apply(tape, gn, &layer.ffn.map(|id| pv[id.0]))?;
    trace.delta = delta;
    trace.output = tape.add(g, f)?;
    Ok(trace)
}
