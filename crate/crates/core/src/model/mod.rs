//! The dual-branch classifier: per-modality 1D-ResNet encoders, gated
//! cross-modal fusion, a Transformer classification head, and focal loss.

mod forward;

pub use forward::{encode_branch, fuse, head_logits, model_forward, sinusoidal_pe, Branch, ModelOutput};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{BnBuffers, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

/// Architecture hyperparameters. [`ModelConfig::full`] is the reference
/// configuration; [`ModelConfig::toy`] divides every width by one factor for
/// desk-scale runs, keeping the structure intact.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub ecg_channels: usize,
    pub iegm_channels: usize,
    pub input_len: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    /// Per-branch embedding width; equals the last stage's channels.
    pub embed_dim: usize,
    /// Fused feature width; the head treats it as its sequence length.
    pub fused_dim: usize,
    /// Head token dimension.
    pub head_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            ecg_channels: 12,
            iegm_channels: 6,
            input_len: 977,
            stage_channels: [64, 128, 256, 256],
            blocks_per_stage: 2,
            embed_dim: 256,
            fused_dim: 512,
            head_dim: 64,
            heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            classes: 6,
        }
    }

    /// Uniformly divide every width by `factor` (sequence length follows the
    /// fused dimension).
    pub fn toy(factor: usize) -> Result<Self> {
        let full = Self::full();
        if factor == 0
            || full.stage_channels.iter().any(|c| c % factor != 0)
            || full.fused_dim % factor != 0
            || full.head_dim % factor != 0
            || full.ff_dim % factor != 0
        {
            return Err(Error::InvalidConfig(format!("toy scale factor {factor} does not divide the widths")));
        }
        let cfg = Self {
            stage_channels: [
                full.stage_channels[0] / factor,
                full.stage_channels[1] / factor,
                full.stage_channels[2] / factor,
                full.stage_channels[3] / factor,
            ],
            embed_dim: full.embed_dim / factor,
            fused_dim: full.fused_dim / factor,
            head_dim: full.head_dim / factor,
            ff_dim: full.ff_dim / factor,
            ..full
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim != self.stage_channels[3] {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must equal the last stage width {}",
                self.embed_dim, self.stage_channels[3]
            )));
        }
        if self.fused_dim != 4 * self.embed_dim / 2 {
            return Err(Error::InvalidConfig(format!(
                "fused_dim {} must be half the concatenated width {}",
                self.fused_dim,
                4 * self.embed_dim
            )));
        }
        if self.head_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim {} not divisible by {} heads",
                self.head_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.classes < 2 || self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig(alloc::string::String::from("degenerate model config")));
        }
        Ok(())
    }
}

/// Focal loss configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

/// Index of one named tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PIdx(usize);

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn add(&mut self, name: String, tensor: Tensor) -> PIdx {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        PIdx(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn get(&self, idx: PIdx) -> &Tensor {
        &self.tensors[idx.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Leaf variables for one tape, aligned with a [`ParamSet`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Adopt externally created leaves (one per parameter, in set order).
    pub fn from_slice(vars: &[Var]) -> Self {
        Self { vars: vars.to_vec() }
    }

    pub fn var(&self, idx: PIdx) -> Var {
        self.vars[idx.0]
    }

    /// Leaf for the parameter at a raw set index (see [`ParamSet::index_of`]).
    pub fn var_at(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvP {
    pub w: PIdx,
    pub b: PIdx,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BnP {
    pub gamma: PIdx,
    pub beta: PIdx,
    pub buf: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LinearP {
    pub w: PIdx,
    pub b: PIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LnP {
    pub gamma: PIdx,
    pub beta: PIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockP {
    pub conv1: ConvP,
    pub bn1: BnP,
    pub conv2: ConvP,
    pub bn2: BnP,
    pub proj: Option<(ConvP, BnP)>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderP {
    pub stem_conv: ConvP,
    pub stem_bn: BnP,
    pub stages: Vec<Vec<BlockP>>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FusionP {
    pub query_e: LinearP,
    pub key_e: LinearP,
    pub value_e: LinearP,
    pub query_m: LinearP,
    pub key_m: LinearP,
    pub value_m: LinearP,
    pub fuse: LinearP,
    pub ln: LnP,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct HeadP {
    pub token: LinearP,
    pub ln_attn: LnP,
    pub wq: LinearP,
    pub wk: LinearP,
    pub wv: LinearP,
    pub wo: LinearP,
    pub ln_ff: LnP,
    pub ff1: LinearP,
    pub ff2: LinearP,
    pub ln_out: LnP,
    pub classifier: LinearP,
}

/// Parameters, batch-norm buffers, and wiring of the whole network,
/// including the learnable class prototypes used by the contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub bn: Vec<BnBuffers>,
    pub(crate) ecg: EncoderP,
    pub(crate) iegm: EncoderP,
    pub(crate) fusion: FusionP,
    pub(crate) head: HeadP,
    pub(crate) prototypes: PIdx,
}

struct Builder {
    params: ParamSet,
    bn: Vec<BnBuffers>,
    seed: u64,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> PIdx {
        let tag = self.params.len() as u64;
        let mut r = rng::rng_for(self.seed, tag);
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::filled(shape, 1.0),
            Init::KaimingUniform { fan_in } => {
                let bound = libm::sqrt(6.0 / fan_in as f64);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng::uniform_in(&mut r, -bound, bound)).collect();
                Tensor::new(shape, data).expect("shape/data agree")
            }
            Init::UnitNormalRows => {
                let (rows, cols) = (shape[0], shape[1]);
                let mut t = Tensor::zeros(shape);
                for i in 0..rows {
                    let row = t.row_mut(i);
                    loop {
                        for v in row.iter_mut() {
                            *v = rng::standard_normal(&mut r);
                        }
                        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                        if norm > 1e-8 {
                            row.iter_mut().for_each(|v| *v /= norm);
                            break;
                        }
                    }
                }
                let _ = cols;
                t
            }
        };
        self.params.add(name, t)
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, stride: usize, pad: usize) -> ConvP {
        ConvP {
            w: self.tensor(format!("{name}.w"), &[cout, cin, k], Init::KaimingUniform { fan_in: cin * k }),
            b: self.tensor(format!("{name}.b"), &[cout], Init::Zero),
            stride,
            pad,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnP {
        let gamma = self.tensor(format!("{name}.gamma"), &[channels], Init::One);
        let beta = self.tensor(format!("{name}.beta"), &[channels], Init::Zero);
        self.bn.push(BnBuffers::new(channels));
        BnP { gamma, beta, buf: self.bn.len() - 1 }
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearP {
        LinearP {
            w: self.tensor(format!("{name}.w"), &[d_in, d_out], Init::KaimingUniform { fan_in: d_in }),
            b: self.tensor(format!("{name}.b"), &[d_out], Init::Zero),
        }
    }

    fn ln(&mut self, name: &str, d: usize) -> LnP {
        LnP {
            gamma: self.tensor(format!("{name}.gamma"), &[d], Init::One),
            beta: self.tensor(format!("{name}.beta"), &[d], Init::Zero),
        }
    }

    fn encoder(&mut self, name: &str, in_channels: usize, cfg: &ModelConfig) -> EncoderP {
        let stem_conv = self.conv(&format!("{name}.stem.conv"), cfg.stage_channels[0], in_channels, 7, 2, 3);
        let stem_bn = self.bn(&format!("{name}.stem.bn"), cfg.stage_channels[0]);
        let mut stages = Vec::with_capacity(4);
        let mut channels = cfg.stage_channels[0];
        for (si, &width) in cfg.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for bi in 0..cfg.blocks_per_stage {
                // temporal downsampling in the first block of stages 2..4
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let prefix = format!("{name}.s{si}.b{bi}");
                let conv1 = self.conv(&format!("{prefix}.conv1"), width, channels, 3, stride, 1);
                let bn1 = self.bn(&format!("{prefix}.bn1"), width);
                let conv2 = self.conv(&format!("{prefix}.conv2"), width, width, 3, 1, 1);
                let bn2 = self.bn(&format!("{prefix}.bn2"), width);
                let proj = if stride != 1 || channels != width {
                    let pc = self.conv(&format!("{prefix}.proj.conv"), width, channels, 1, stride, 0);
                    let pb = self.bn(&format!("{prefix}.proj.bn"), width);
                    Some((pc, pb))
                } else {
                    None
                };
                blocks.push(BlockP { conv1, bn1, conv2, bn2, proj });
                channels = width;
            }
            stages.push(blocks);
        }
        EncoderP { stem_conv, stem_bn, stages }
    }
}

enum Init {
    Zero,
    One,
    KaimingUniform { fan_in: usize },
    UnitNormalRows,
}

impl ModelState {
    /// Build and initialize the network: Kaiming-uniform conv/linear
    /// weights, zero biases, unit batch-norm/layer-norm affine, prototypes
    /// on the unit sphere. Deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: ParamSet::default(), bn: Vec::new(), seed };
        let ecg = b.encoder("ecg", cfg.ecg_channels, &cfg);
        let iegm = b.encoder("iegm", cfg.iegm_channels, &cfg);
        let d = cfg.embed_dim;
        let fusion = FusionP {
            query_e: b.linear("fusion.query_e", d, d),
            key_e: b.linear("fusion.key_e", d, d),
            value_e: b.linear("fusion.value_e", d, d),
            query_m: b.linear("fusion.query_m", d, d),
            key_m: b.linear("fusion.key_m", d, d),
            value_m: b.linear("fusion.value_m", d, d),
            fuse: b.linear("fusion.fuse", 4 * d, cfg.fused_dim),
            ln: b.ln("fusion.ln", cfg.fused_dim),
        };
        let hd = cfg.head_dim;
        let head = HeadP {
            token: b.linear("head.token", 1, hd),
            ln_attn: b.ln("head.ln_attn", hd),
            wq: b.linear("head.attn.wq", hd, hd),
            wk: b.linear("head.attn.wk", hd, hd),
            wv: b.linear("head.attn.wv", hd, hd),
            wo: b.linear("head.attn.wo", hd, hd),
            ln_ff: b.ln("head.ln_ff", hd),
            ff1: b.linear("head.ff1", hd, cfg.ff_dim),
            ff2: b.linear("head.ff2", cfg.ff_dim, hd),
            ln_out: b.ln("head.ln_out", hd),
            classifier: b.linear("head.classifier", hd, cfg.classes),
        };
        let prototypes = b.tensor("prototypes".into(), &[cfg.classes, cfg.fused_dim], Init::UnitNormalRows);
        Ok(Self { cfg, params: b.params, bn: b.bn, ecg, iegm, fusion, head, prototypes })
    }

    /// Load every parameter tensor as a leaf on `tape`, in parameter order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: (0..self.params.len()).map(|i| tape.leaf(self.params.tensor(i).clone())).collect() }
    }

    /// Index of the prototypes tensor within the parameter set.
    pub fn prototypes_index(&self) -> usize {
        self.prototypes.0
    }

    /// Draw fresh unit-norm rows for any prototype whose norm collapsed.
    pub fn reseed_degenerate_prototypes(&mut self, rng: &mut DetRng) {
        let protos = self.params.tensor_mut(self.prototypes.0);
        let rows = protos.shape()[0];
        for i in 0..rows {
            let row = protos.row_mut(i);
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm < 1e-8 {
                loop {
                    for v in row.iter_mut() {
                        *v = rng::standard_normal(rng);
                    }
                    let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                    if n > 1e-8 {
                        row.iter_mut().for_each(|v| *v /= n);
                        break;
                    }
                }
            }
        }
    }
}
