//! Closed-form forward FLOP counts of one block, matching what the tape
//! counter records op by op (batch of one).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{flop_cost, FlopCounter, Tape};
use crate::error::Result;
use crate::lrsa::{block_forward, LrsaConfig, Variant};
use crate::nn::NormKind;
use crate::tensor::Tensor;

use super::LrsaModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockFlops {
    /// Global spatial mixing: attention cores, or the basis products.
    pub mixing: u64,
    pub total: u64,
}

fn norm_cost(kind: NormKind, rows: u64, d: u64) -> u64 {
    let per = match kind {
        NormKind::LayerNorm => flop_cost::LAYER_NORM,
        NormKind::RmsNorm => flop_cost::RMS_NORM,
    };
    per * rows * d
}

/// Two matmuls, two bias adds and a GELU over `rows` rows.
fn ffn_cost(rows: u64, d_in: u64, hidden: u64, d_out: u64) -> u64 {
    2 * rows * d_in * hidden + rows * hidden + flop_cost::GELU * rows * hidden + 2 * rows * hidden * d_out + rows * d_out
}

/// Attention cores of `m` queries over `n` keys: scores, scaling, softmax
/// and the weighted sum, summed over heads.
fn sdpa_cost(m: u64, n: u64, d: u64, heads: u64) -> u64 {
    4 * m * n * d + (1 + flop_cost::SOFTMAX) * heads * m * n
}

/// Projections plus cores.
fn mha_cost(m: u64, n: u64, d: u64, heads: u64) -> (u64, u64) {
    let core = sdpa_cost(m, n, d, heads);
    (core, 4 * m * d * d + 4 * n * d * d + core)
}

/// FLOPs of one block on `n` points.
pub fn block_flops(cfg: &LrsaConfig, n: usize) -> BlockFlops {
    let (n, d, h, m) = (n as u64, cfg.width as u64, cfg.heads as u64, cfg.latent_count as u64);
    let f = cfg.ffn_hidden() as u64;
    let mut total = norm_cost(cfg.norm, n, d);
    let mixing;
    if cfg.variant == Variant::FixedBasis {
        mixing = 2 * m * n * d + 2 * m * m * d + 2 * n * m * d;
        total += mixing;
    } else {
        let (down_core, down) = mha_cost(m, n, d, h);
        let (up_core, up) = mha_cost(n, m, d, h);
        let mut mix = down_core + up_core;
        total += down + up;
        if cfg.variant != Variant::LinearNo {
            total += 3 * norm_cost(cfg.norm, m, d) + 2 * ffn_cost(m, d, f, d) + 3 * m * d;
            if cfg.variant == Variant::NoIntraAttn {
                let w = cfg.mixer_mlp_hidden() as u64;
                total += ffn_cost(m, d, w, d);
            } else {
                let (core, all) = mha_cost(m, m, d, h);
                mix += core;
                total += all;
            }
        }
        mixing = mix;
    }
    // Residual, pointwise FFN branch and its residual.
    total += n * d + norm_cost(cfg.norm, n, d) + ffn_cost(n, d, f, d) + n * d;
    BlockFlops { mixing, total }
}

/// Attention cores of dense `N x N` self-attention at width `d`.
pub fn dense_attention_flops(n: usize, d: usize, heads: usize) -> u64 {
    sdpa_cost(n as u64, n as u64, d as u64, heads as u64)
}

/// Runs one block of a fresh model with the given config on random input of
/// `n` points and returns the tape's counter.
pub fn measure_block_flops(cfg: &LrsaConfig, n: usize, seed: u64) -> Result<FlopCounter> {
    let mut one = cfg.clone();
    one.depth = 1;
    let model = LrsaModel::new(one, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let h = Tensor::randn(&[n, cfg.width], 1.0, &mut rng);
    let coords = Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64 / n as f64).collect())?;
    let mut tape = Tape::new();
    let pv = model.bind_const(&mut tape);
    let hv = tape.constant(h);
    let base = tape.flops();
    block_forward(&mut tape, &model.config, &model.layout.layers[0], &pv, hv, &coords)?;
    let after = tape.flops();
    Ok(FlopCounter {
        total: after.total - base.total,
        mixing: after.mixing - base.mixing,
    })
}
