//! Forward pass of the dual-branch network on a tape.

use alloc::vec::Vec;

use super::{BlockP, BnP, BoundParams, ConvP, EncoderP, FusionP, HeadP, LinearP, LnP, ModelState};
use crate::autodiff::{Mode, Tape, Var};
use crate::error::Result;
use crate::rng::DetRng;
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

/// Fused embedding (consumed by the contrastive loss) and classification
/// logits (consumed by the focal loss).
pub struct ModelOutput {
    pub fused: Var,
    pub logits: Var,
}

/// Standard sinusoidal positional encoding table `[len, dim]`.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = pos as f64 / libm::pow(10_000.0, exponent);
            let v = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
            pe.set2(pos, i, v);
        }
    }
    pe
}

fn conv(tape: &mut Tape, bound: &BoundParams, p: &ConvP, x: Var) -> Result<Var> {
    let y = tape.conv1d(x, bound.var(p.w), p.stride, p.pad)?;
    tape.bias_add_chan(y, bound.var(p.b))
}

fn batchnorm(
    tape: &mut Tape,
    bound: &BoundParams,
    p: &BnP,
    bn: &mut [crate::autodiff::BnBuffers],
    x: Var,
    mode: Mode,
) -> Result<Var> {
    tape.batchnorm1d(x, bound.var(p.gamma), bound.var(p.beta), &mut bn[p.buf], mode, BN_MOMENTUM, BN_EPS)
}

fn linear(tape: &mut Tape, bound: &BoundParams, p: &LinearP, x: Var) -> Result<Var> {
    let y = tape.matmul(x, bound.var(p.w), false)?;
    tape.add_bcast0(y, bound.var(p.b))
}

fn layernorm(tape: &mut Tape, bound: &BoundParams, p: &LnP, x: Var) -> Result<Var> {
    tape.layernorm(x, bound.var(p.gamma), bound.var(p.beta), LN_EPS)
}

fn residual_block(
    tape: &mut Tape,
    bound: &BoundParams,
    p: &BlockP,
    bn: &mut [crate::autodiff::BnBuffers],
    x: Var,
    mode: Mode,
) -> Result<Var> {
    // Conv-BN-ReLU, Conv-BN, identity add, final ReLU
    let h = conv(tape, bound, &p.conv1, x)?;
    let h = batchnorm(tape, bound, &p.bn1, bn, h, mode)?;
    let h = tape.relu(h);
    let h = conv(tape, bound, &p.conv2, h)?;
    let h = batchnorm(tape, bound, &p.bn2, bn, h, mode)?;
    let skip = match &p.proj {
        Some((pc, pb)) => {
            let s = conv(tape, bound, pc, x)?;
            batchnorm(tape, bound, pb, bn, s, mode)?
        }
        None => x,
    };
    let sum = tape.add(h, skip)?;
    Ok(tape.relu(sum))
}

/// One modality branch: `[B, C_in, L]` -> pooled `[B, embed_dim]`.
pub(crate) fn encode(
    tape: &mut Tape,
    bound: &BoundParams,
    enc: &EncoderP,
    bn: &mut [crate::autodiff::BnBuffers],
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let h = conv(tape, bound, &enc.stem_conv, x)?;
    let h = batchnorm(tape, bound, &enc.stem_bn, bn, h, mode)?;
    let h = tape.relu(h);
    let mut h = tape.maxpool1d(h, 3, 2, 1)?;
    for stage in &enc.stages {
        for block in stage {
            h = residual_block(tape, bound, block, bn, h, mode)?;
        }
    }
    tape.adaptive_avgpool1(h)
}

pub(crate) struct FusedParts {
    #[cfg_attr(not(test), allow(dead_code))]
    pub gated_e: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    pub gated_m: Var,
    pub fused: Var,
}

/// Gated cross-modal fusion: each branch's query gates the other branch's
/// value, the four feature blocks are concatenated and projected.
pub(crate) fn fuse_parts(
    tape: &mut Tape,
    bound: &BoundParams,
    p: &FusionP,
    ze: Var,
    zm: Var,
    gate_scale: usize,
    dropout: f64,
    mode: Mode,
    rng: &mut DetRng,
) -> Result<FusedParts> {
    let inv_sqrt_h = 1.0 / libm::sqrt(gate_scale as f64);

    let qe = linear(tape, bound, &p.query_e, ze)?;
    let km = linear(tape, bound, &p.key_m, zm)?;
    let vm = linear(tape, bound, &p.value_m, zm)?;
    let prod_e = tape.mul(qe, km)?;
    let scaled_e = tape.mul_scalar(prod_e, inv_sqrt_h);
    let gate_e = tape.sigmoid(scaled_e);
    let gated_e = tape.mul(gate_e, vm)?;

    let qm = linear(tape, bound, &p.query_m, zm)?;
    let ke = linear(tape, bound, &p.key_e, ze)?;
    let ve = linear(tape, bound, &p.value_e, ze)?;
    let prod_m = tape.mul(qm, ke)?;
    let scaled_m = tape.mul_scalar(prod_m, inv_sqrt_h);
    let gate_m = tape.sigmoid(scaled_m);
    let gated_m = tape.mul(gate_m, ve)?;

    let cat = tape.concat2(&[gated_e, gated_m, ze, zm])?;
    let projected = linear(tape, bound, &p.fuse, cat)?;
    let activated = tape.relu(projected);
    let dropped = tape.dropout(activated, dropout, mode, rng)?;
    let fused = layernorm(tape, bound, &p.ln, dropped)?;
    Ok(FusedParts { gated_e, gated_m, fused })
}

/// Transformer head over the fused vector read as a scalar-token sequence:
/// token projection, sinusoidal positions, one pre-norm encoder layer,
/// mean pooling, layer norm, linear classifier.
pub(crate) fn head_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    p: &HeadP,
    z: Var,
    heads: usize,
    dropout: f64,
    mode: Mode,
    rng: &mut DetRng,
) -> Result<Var> {
    let (b, l) = {
        let s = tape.value(z).shape();
        (s[0], s[1])
    };
    let d = tape.value(bound.var(p.token.w)).shape()[1];
    let dh = d / heads;

    // scalar tokens -> d-dimensional embeddings + positions
    let tokens = tape.reshape(z, &[b * l, 1])?;
    let u = linear(tape, bound, &p.token, tokens)?;
    let u = tape.reshape(u, &[b, l, d])?;
    let pe = tape.leaf(sinusoidal_pe(l, d));
    let h0 = tape.add_bcast0(u, pe)?;

    // pre-norm self-attention sublayer
    let normed = layernorm(tape, bound, &p.ln_attn, h0)?;
    let flat = tape.reshape(normed, &[b * l, d])?;
    let mut qkv = Vec::with_capacity(3);
    for lin in [&p.wq, &p.wk, &p.wv] {
        let proj = linear(tape, bound, lin, flat)?;
        let shaped = tape.reshape(proj, &[b, l, heads, dh])?;
        let swapped = tape.permute(shaped, &[0, 2, 1, 3])?;
        qkv.push(tape.reshape(swapped, &[b * heads, l, dh])?);
    }
    let attn = tape.scaled_dot_attention(qkv[0], qkv[1], qkv[2])?;
    let attn = tape.reshape(attn, &[b, heads, l, dh])?;
    let attn = tape.permute(attn, &[0, 2, 1, 3])?;
    let attn = tape.reshape(attn, &[b * l, d])?;
    let attn = linear(tape, bound, &p.wo, attn)?;
    let attn = tape.dropout(attn, dropout, mode, rng)?;
    let attn = tape.reshape(attn, &[b, l, d])?;
    let h1 = tape.add(h0, attn)?;

    // pre-norm feed-forward sublayer (GELU)
    let normed = layernorm(tape, bound, &p.ln_ff, h1)?;
    let flat = tape.reshape(normed, &[b * l, d])?;
    let ff = linear(tape, bound, &p.ff1, flat)?;
    let ff = tape.gelu(ff);
    let ff = tape.dropout(ff, dropout, mode, rng)?;
    let ff = linear(tape, bound, &p.ff2, ff)?;
    let ff = tape.dropout(ff, dropout, mode, rng)?;
    let ff = tape.reshape(ff, &[b, l, d])?;
    let h2 = tape.add(h1, ff)?;

    // pool over the sequence and classify
    let pooled = tape.mean_axis1(h2)?;
    let normed = layernorm(tape, bound, &p.ln_out, pooled)?;
    linear(tape, bound, &p.classifier, normed)
}

/// Which modality branch to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Surface,
    Intracardiac,
}

/// One encoder branch as a standalone operation.
pub fn encode_branch(
    tape: &mut Tape,
    state: &mut ModelState,
    bound: &BoundParams,
    branch: Branch,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let enc = match branch {
        Branch::Surface => state.ecg.clone(),
        Branch::Intracardiac => state.iegm.clone(),
    };
    encode(tape, bound, &enc, &mut state.bn, x, mode)
}

/// The fusion block as a standalone operation: `[B, embed] x 2 -> [B, fused]`.
pub fn fuse(
    tape: &mut Tape,
    state: &ModelState,
    bound: &BoundParams,
    ze: Var,
    zm: Var,
    mode: Mode,
    rng: &mut DetRng,
) -> Result<Var> {
    let parts = fuse_parts(
        tape,
        bound,
        &state.fusion,
        ze,
        zm,
        state.cfg.embed_dim,
        state.cfg.dropout,
        mode,
        rng,
    )?;
    Ok(parts.fused)
}

/// The classification head as a standalone operation: `[B, fused] -> [B, C]`.
pub fn head_logits(
    tape: &mut Tape,
    state: &ModelState,
    bound: &BoundParams,
    z: Var,
    mode: Mode,
    rng: &mut DetRng,
) -> Result<Var> {
    head_forward(tape, bound, &state.head, z, state.cfg.heads, state.cfg.dropout, mode, rng)
}

/// Run both encoders, fusion, and the head. `xe` is `[B, 12, L]`, `xm` is
/// `[B, 6, L]`; returns the fused `[B, fused_dim]` embedding and
/// `[B, classes]` logits.
pub fn model_forward(
    tape: &mut Tape,
    state: &mut ModelState,
    bound: &BoundParams,
    xe: Var,
    xm: Var,
    mode: Mode,
    rng: &mut DetRng,
) -> Result<ModelOutput> {
    let cfg = state.cfg.clone();
    let ze = encode(tape, bound, &state.ecg, &mut state.bn, xe, mode)?;
    let zm = encode(tape, bound, &state.iegm, &mut state.bn, xm, mode)?;
    let parts = fuse_parts(
        tape,
        bound,
        &state.fusion,
        ze,
        zm,
        cfg.embed_dim,
        cfg.dropout,
        mode,
        rng,
    )?;
    let logits = head_forward(tape, bound, &state.head, parts.fused, cfg.heads, cfg.dropout, mode, rng)?;
    Ok(ModelOutput { fused: parts.fused, logits })
}
