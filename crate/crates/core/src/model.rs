//! Byte-level decoder-only language models in two interchangeable
//! architectures:
//!
//! - `standard`: each block is causal self-attention followed by an FFN;
//! - `modular`: the FFN is replaced by generalized cross-attention into one
//!   knowledge base shared by every block.
//!
//! Both use the same embeddings, norms and LM head, so converting between
//! them with [`Model::fold_to_standard`] / [`Model::unfold_to_modular`]
//! swaps only the mixing sublayer.

use std::fmt;

use crate::attention::{cross_attention_var, self_attention_var, CrossAttnParams, CrossAttnVars, SelfAttnParams, SelfAttnVars};
use crate::error::{Error, Result};
use crate::folding::{extract_closure, fold, ffn_var, FfnVars, FoldedFFN};
use crate::knowledge::{KnowledgeBase, Threshold};
use crate::tensor::{Matrix, Rng, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Initial output bias of every threshold network.
pub const THRESHOLD_BIAS_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Standard,
    Modular,
}

impl Architecture {
    pub fn code(self) -> u8 {
        match self {
            Architecture::Standard => 0,
            Architecture::Modular => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Architecture::Standard),
            1 => Ok(Architecture::Modular),
            other => Err(Error::Format(format!("unknown architecture code {other}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Standard => "standard",
            Architecture::Modular => "modular",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Architecture::Standard),
            "modular" => Ok(Architecture::Modular),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Where layer normalisation sits relative to each sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    None,
    Pre,
    Post,
}

impl NormMode {
    pub fn code(self) -> u64 {
        match self {
            NormMode::None => 0,
            NormMode::Pre => 1,
            NormMode::Post => 2,
        }
    }

    pub fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(NormMode::None),
            1 => Ok(NormMode::Pre),
            2 => Ok(NormMode::Post),
            other => Err(Error::Format(format!("unknown norm mode code {other}"))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::None => "none",
            NormMode::Pre => "pre",
            NormMode::Post => "post",
        })
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "pre" => Ok(NormMode::Pre),
            "post" => Ok(NormMode::Post),
            other => Err(Error::Config(format!("unknown norm mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Maximum sequence length `N`.
    pub context_len: usize,
    /// Hidden width `d`.
    pub model_dim: usize,
    /// Cross-attention key width `d_k`. Self-attention heads use
    /// `model_dim / head_count`.
    pub key_dim: usize,
    pub ffn_dim: usize,
    /// Knowledge entry width `d_E`.
    pub kb_entry_dim: usize,
    /// Number of knowledge entries `|E|`.
    pub kb_size: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub architecture: Architecture,
    pub norm_mode: NormMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            context_len: 32,
            model_dim: 64,
            key_dim: 64,
            ffn_dim: 256,
            kb_entry_dim: 64,
            kb_size: 512,
            layer_count: 2,
            head_count: 4,
            architecture: Architecture::Standard,
            norm_mode: NormMode::Pre,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("model_dim", self.model_dim),
            ("layer_count", self.layer_count),
            ("head_count", self.head_count),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        let mixer_dims: &[(&str, usize)] = match self.architecture {
            Architecture::Standard => &[("ffn_dim", self.ffn_dim)],
            Architecture::Modular => &[
                ("key_dim", self.key_dim),
                ("kb_entry_dim", self.kb_entry_dim),
                ("kb_size", self.kb_size),
            ],
        };
        for &(name, v) in mixer_dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let (v, n, d, l) = (self.vocab_size, self.context_len, self.model_dim, self.layer_count);
        let norm = if self.norm_mode == NormMode::None { 0 } else { 2 * d };
        let shared = v * d + n * d + l * (4 * d * d + 2 * norm) + norm + d * v;
        shared + self.mixer_param_count()
    }

    /// Parameters in the mixing sublayers (all FFNs, or all cross-attention
    /// views plus the one shared knowledge base).
    pub fn mixer_param_count(&self) -> usize {
        let (d, l) = (self.model_dim, self.layer_count);
        match self.architecture {
            Architecture::Standard => l * (2 * d * self.ffn_dim + self.ffn_dim + d),
            Architecture::Modular => {
                let (d_k, d_e) = (self.key_dim, self.kb_entry_dim);
                let threshold_net = d_e * d_e + 2 * d_e + 1;
                self.kb_size * d_e + l * (d * d_k + d_e * d_k + d_e * d + threshold_net + d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Ffn(FoldedFFN),
    Cross(CrossAttnParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Option<LayerNormParams>,
    pub attn: SelfAttnParams,
    pub norm2: Option<LayerNormParams>,
    pub mixer: Mixer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    /// The single knowledge base read by every modular block.
    pub kb: Option<KnowledgeBase>,
    pub final_norm: Option<LayerNormParams>,
    /// `d x vocab`, not tied to the embedding.
    pub head: Matrix,
}

/// How a model's parameters are placed on a tape.
#[derive(Debug, Clone, Default)]
pub struct BindOptions {
    /// Parameters become trainable leaves. The knowledge base additionally
    /// requires `KnowledgeBase::trainable`.
    pub trainable: bool,
    /// Cross-attention outputs of these layers are multiplied by zero.
    pub mute_cross_layers: Vec<usize>,
    /// Give every layer its own copy of the knowledge base leaf, so per-layer
    /// contributions to the knowledge-base gradient can be read separately.
    pub kb_per_layer: bool,
}

#[derive(Debug, Clone, Copy)]
struct NormVars {
    gain: Var,
    bias: Var,
}

#[derive(Debug, Clone)]
enum MixerVars {
    Ffn(FfnVars),
    Cross(CrossAttnVars),
}

#[derive(Debug, Clone)]
struct BlockVars {
    norm1: Option<NormVars>,
    attn: SelfAttnVars,
    norm2: Option<NormVars>,
    mixer: MixerVars,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    kb: Option<Var>,
    kb_layers: Vec<Var>,
    final_norm: Option<NormVars>,
    head: Var,
    muted: Vec<usize>,
    /// Leaves in [`Model::params`] order.
    pub order: Vec<Var>,
}

impl ModelVars {
    /// Per-layer knowledge-base leaves (only with `kb_per_layer`).
    pub fn kb_layers(&self) -> &[Var] {
        &self.kb_layers
    }

    pub fn kb(&self) -> Option<Var> {
        self.kb
    }
}

fn push_named<'a>(out: &mut Vec<(String, &'a Matrix)>, name: String, m: &'a Matrix) {
    out.push((name, m));
}

impl Model {
    /// Fresh model with weights drawn from `config.seed`: projections and
    /// knowledge entries `Normal(0, 0.02^2)`, biases zero, norms identity.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (v, n, d) = (config.vocab_size, config.context_len, config.model_dim);
        let norms = config.norm_mode != NormMode::None;
        let norm = || norms.then(|| LayerNormParams::new(d));

        let tok_emb = Matrix::randn(v, d, INIT_STD, &mut rng);
        let pos_emb = Matrix::randn(n, d, INIT_STD, &mut rng);
        let mut blocks = Vec::with_capacity(config.layer_count);
        for _ in 0..config.layer_count {
            let attn = SelfAttnParams::init(d, config.head_count, INIT_STD, &mut rng)?;
            let mixer = match config.architecture {
                Architecture::Standard => Mixer::Ffn(FoldedFFN::init(d, config.ffn_dim, INIT_STD, &mut rng)),
                Architecture::Modular => Mixer::Cross(CrossAttnParams::init(
                    d,
                    config.key_dim,
                    config.kb_entry_dim,
                    INIT_STD,
                    THRESHOLD_BIAS_INIT,
                    &mut rng,
                )),
            };
            blocks.push(Block {
                norm1: norm(),
                attn,
                norm2: norm(),
                mixer,
            });
        }
        let kb = match config.architecture {
            Architecture::Standard => None,
            Architecture::Modular => Some(KnowledgeBase::init(
                config.kb_size,
                config.kb_entry_dim,
                INIT_STD,
                &mut rng,
            )),
        };
        let head = Matrix::randn(d, v, INIT_STD, &mut rng);
        let model = Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            kb,
            final_norm: norm(),
            head,
        };
        model.validate()?;
        Ok(model)
    }

    /// Assembles a model from parts, checking every shape against `config`.
    pub fn from_parts(
        config: ModelConfig,
        tok_emb: Matrix,
        pos_emb: Matrix,
        blocks: Vec<Block>,
        kb: Option<KnowledgeBase>,
        final_norm: Option<LayerNormParams>,
        head: Matrix,
    ) -> Result<Self> {
        let model = Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            kb,
            final_norm,
            head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (v, n, d) = (c.vocab_size, c.context_len, c.model_dim);
        let bad = |what: String| Err(Error::shape("model", what));
        if self.tok_emb.shape() != (v, d) || self.pos_emb.shape() != (n, d) || self.head.shape() != (d, v) {
            return bad("embedding or head shape".into());
        }
        if self.blocks.len() != c.layer_count {
            return bad(format!("{} blocks for {} layers", self.blocks.len(), c.layer_count));
        }
        let norms = c.norm_mode != NormMode::None;
        let norm_ok = |p: &Option<LayerNormParams>| match p {
            Some(p) => norms && p.gain.shape() == (1, d) && p.bias.shape() == (1, d),
            None => !norms,
        };
        if !norm_ok(&self.final_norm) {
            return bad("final norm".into());
        }
        match (c.architecture, &self.kb) {
            (Architecture::Standard, None) => {}
            (Architecture::Modular, Some(kb)) => {
                if kb.entry_count() != c.kb_size || kb.entry_dim() != c.kb_entry_dim {
                    return bad(format!(
                        "knowledge base {}x{} for config {}x{}",
                        kb.entry_count(),
                        kb.entry_dim(),
                        c.kb_size,
                        c.kb_entry_dim
                    ));
                }
            }
            _ => return bad("knowledge base presence does not match architecture".into()),
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if !norm_ok(&b.norm1) || !norm_ok(&b.norm2) {
                return bad(format!("block {l} norms"));
            }
            let a = &b.attn;
            if a.heads != c.head_count || a.wq.shape() != (d, d) || a.wk.shape() != (d, d) || a.wv.shape() != (d, d) || a.wo.shape() != (d, d) {
                return bad(format!("block {l} self-attention"));
            }
            match (&b.mixer, c.architecture) {
                (Mixer::Ffn(f), Architecture::Standard) => {
                    f.validate()?;
                    if f.w1.shape() != (d, c.ffn_dim) {
                        return bad(format!("block {l} ffn {:?}", f.w1.shape()));
                    }
                }
                (Mixer::Cross(p), Architecture::Modular) => {
                    let kb = self.kb.as_ref().expect("checked above");
                    p.validate(kb)?;
                    if p.model_dim() != d || p.key_dim() != c.key_dim {
                        return bad(format!("block {l} cross-attention"));
                    }
                }
                _ => return bad(format!("block {l} mixer does not match architecture")),
            }
        }
        Ok(())
    }

    /// Every parameter with its checkpoint name, in a fixed order. The
    /// knowledge base appears once, after the blocks.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        push_named(&mut out, "tok_emb".into(), &self.tok_emb);
        push_named(&mut out, "pos_emb".into(), &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            if let Some(n) = &b.norm1 {
                push_named(&mut out, format!("{p}.norm1.gain"), &n.gain);
                push_named(&mut out, format!("{p}.norm1.bias"), &n.bias);
            }
            push_named(&mut out, format!("{p}.attn.wq"), &b.attn.wq);
            push_named(&mut out, format!("{p}.attn.wk"), &b.attn.wk);
            push_named(&mut out, format!("{p}.attn.wv"), &b.attn.wv);
            push_named(&mut out, format!("{p}.attn.wo"), &b.attn.wo);
            if let Some(n) = &b.norm2 {
                push_named(&mut out, format!("{p}.norm2.gain"), &n.gain);
                push_named(&mut out, format!("{p}.norm2.bias"), &n.bias);
            }
            match &b.mixer {
                Mixer::Ffn(f) => {
                    push_named(&mut out, format!("{p}.ffn.w1"), &f.w1);
                    push_named(&mut out, format!("{p}.ffn.b1"), &f.b1);
                    push_named(&mut out, format!("{p}.ffn.w2"), &f.w2);
                    push_named(&mut out, format!("{p}.ffn.b2"), &f.b2);
                }
                Mixer::Cross(c) => {
                    push_named(&mut out, format!("{p}.cross.wq"), &c.wq);
                    push_named(&mut out, format!("{p}.cross.wk"), &c.wk);
                    push_named(&mut out, format!("{p}.cross.wv"), &c.wv);
                    match &c.threshold {
                        Threshold::Net(t) => {
                            push_named(&mut out, format!("{p}.cross.threshold.hidden"), &t.hidden);
                            push_named(&mut out, format!("{p}.cross.threshold.hidden_bias"), &t.hidden_bias);
                            push_named(&mut out, format!("{p}.cross.threshold.out"), &t.out);
                            push_named(&mut out, format!("{p}.cross.threshold.out_bias"), &t.out_bias);
                        }
                        Threshold::Table(t) => {
                            push_named(&mut out, format!("{p}.cross.threshold.table"), t);
                        }
                    }
                    push_named(&mut out, format!("{p}.cross.b2"), &c.b2);
                }
            }
        }
        if let Some(kb) = &self.kb {
            push_named(&mut out, "kb.entries".into(), kb.entries());
        }
        if let Some(n) = &self.final_norm {
            push_named(&mut out, "final_norm.gain".into(), &n.gain);
            push_named(&mut out, "final_norm.bias".into(), &n.bias);
        }
        push_named(&mut out, "head".into(), &self.head);
        out
    }

    /// Mutable parameters in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            if let Some(n) = &mut b.norm1 {
                out.push(&mut n.gain);
                out.push(&mut n.bias);
            }
            out.push(&mut b.attn.wq);
            out.push(&mut b.attn.wk);
            out.push(&mut b.attn.wv);
            out.push(&mut b.attn.wo);
            if let Some(n) = &mut b.norm2 {
                out.push(&mut n.gain);
                out.push(&mut n.bias);
            }
            match &mut b.mixer {
                Mixer::Ffn(f) => {
                    out.push(&mut f.w1);
                    out.push(&mut f.b1);
                    out.push(&mut f.w2);
                    out.push(&mut f.b2);
                }
                Mixer::Cross(c) => {
                    out.push(&mut c.wq);
                    out.push(&mut c.wk);
                    out.push(&mut c.wv);
                    match &mut c.threshold {
                        Threshold::Net(t) => {
                            out.push(&mut t.hidden);
                            out.push(&mut t.hidden_bias);
                            out.push(&mut t.out);
                            out.push(&mut t.out_bias);
                        }
                        Threshold::Table(t) => out.push(t),
                    }
                    out.push(&mut c.b2);
                }
            }
        }
        if let Some(kb) = &mut self.kb {
            out.push(kb.entries_mut());
        }
        if let Some(n) = &mut self.final_norm {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
        out.push(&mut self.head);
        out
    }

    /// Redraws every parameter so signals stay O(1) along every path:
    /// matrices `Normal(0, 1/rows)`, row vectors `Normal(0, 0.1^2)`, norm
    /// gains `1 + Normal(0, 0.1^2)`. Used for gradient checks, where the
    /// small training init leaves many gradients near the finite-difference
    /// noise floor.
    pub fn reinit_fan_in(&mut self, seed: u64) {
        let mut rng = Rng::new(seed);
        let names: Vec<String> = self.params().into_iter().map(|(n, _)| n).collect();
        for (p, name) in self.params_mut().into_iter().zip(names) {
            let (rows, cols) = p.shape();
            *p = if rows > 1 {
                Matrix::randn(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng)
            } else if name.ends_with(".gain") {
                Matrix::randn(rows, cols, 0.1, &mut rng).add(&Matrix::filled(rows, cols, 1.0)).expect("same shape")
            } else {
                Matrix::randn(rows, cols, 0.1, &mut rng)
            };
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }

    /// Places every parameter on `t`. Leaves are created in
    /// [`Model::params`] order and recorded in [`ModelVars::order`].
    pub fn bind(&self, t: &mut Tape, opts: &BindOptions) -> ModelVars {
        let train = opts.trainable;
        let mut order = Vec::new();
        let mut leaf = |t: &mut Tape, m: &Matrix, trainable: bool| {
            let v = t.leaf(m.clone(), trainable);
            order.push(v);
            v
        };
        let norm = |t: &mut Tape, n: &Option<LayerNormParams>, leaf: &mut dyn FnMut(&mut Tape, &Matrix, bool) -> Var| {
            n.as_ref().map(|n| NormVars {
                gain: leaf(t, &n.gain, train),
                bias: leaf(t, &n.bias, train),
            })
        };

        let tok_emb = leaf(t, &self.tok_emb, train);
        let pos_emb = leaf(t, &self.pos_emb, train);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let norm1 = norm(t, &b.norm1, &mut leaf);
            let attn = SelfAttnVars {
                wq: leaf(t, &b.attn.wq, train),
                wk: leaf(t, &b.attn.wk, train),
                wv: leaf(t, &b.attn.wv, train),
                wo: leaf(t, &b.attn.wo, train),
                heads: b.attn.heads,
            };
            let norm2 = norm(t, &b.norm2, &mut leaf);
            let mixer = match &b.mixer {
                Mixer::Ffn(f) => MixerVars::Ffn(FfnVars {
                    w1: leaf(t, &f.w1, train),
                    b1: leaf(t, &f.b1, train),
                    w2: leaf(t, &f.w2, train),
                    b2: leaf(t, &f.b2, train),
                }),
                Mixer::Cross(c) => {
                    let wq = leaf(t, &c.wq, train);
                    let wk = leaf(t, &c.wk, train);
                    let wv = leaf(t, &c.wv, train);
                    let threshold = match &c.threshold {
                        Threshold::Net(n) => crate::knowledge::ThresholdVars::Net {
                            hidden: leaf(t, &n.hidden, train),
                            hidden_bias: leaf(t, &n.hidden_bias, train),
                            out: leaf(t, &n.out, train),
                            out_bias: leaf(t, &n.out_bias, train),
                        },
                        Threshold::Table(tb) => crate::knowledge::ThresholdVars::Table(leaf(t, tb, train)),
                    };
                    let b2 = leaf(t, &c.b2, train);
                    MixerVars::Cross(CrossAttnVars {
                        wq,
                        wk,
                        wv,
                        threshold,
                        b2,
                    })
                }
            };
            blocks.push(BlockVars {
                norm1,
                attn,
                norm2,
                mixer,
            });
        }
        let kb_trainable = train && self.kb.as_ref().is_some_and(|kb| kb.trainable);
        let kb = self.kb.as_ref().map(|kb| leaf(t, kb.entries(), kb_trainable));
        let final_norm = norm(t, &self.final_norm, &mut leaf);
        let head = leaf(t, &self.head, train);
        drop(leaf);

        let kb_layers = match (&self.kb, opts.kb_per_layer) {
            (Some(kb), true) => (0..self.blocks.len())
                .map(|_| t.leaf(kb.entries().clone(), kb_trainable))
                .collect(),
            _ => Vec::new(),
        };
        ModelVars {
            tok_emb,
            pos_emb,
            blocks,
            kb,
            kb_layers,
            final_norm,
            head,
            muted: opts.mute_cross_layers.clone(),
            order,
        }
    }

    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Config("empty token sequence".into()));
        }
        if seq.len() > self.config.context_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                context: self.config.context_len,
            });
        }
        if let Some(&id) = seq.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for a batch of equal-length sequences, stacked row-wise
    /// (`batch * len` rows).
    pub fn forward_vars(&self, t: &mut Tape, vars: &ModelVars, batch: &[&[usize]]) -> Result<Var> {
        self.forward_inner(t, vars, batch, None)
    }

    fn forward_inner(
        &self,
        t: &mut Tape,
        vars: &ModelVars,
        batch: &[&[usize]],
        mut capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let len = batch.first().map_or(0, |s| s.len());
        for seq in batch {
            self.check_tokens(seq)?;
            if seq.len() != len {
                return Err(Error::Config("sequences in a batch must have equal length".into()));
            }
        }
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();
        let tok = t.gather_rows(vars.tok_emb, &ids)?;
        let pos = t.gather_rows(vars.pos_emb, &positions)?;
        let mut x = t.add(tok, pos)?;

        let post = self.config.norm_mode == NormMode::Post;
        let pre = self.config.norm_mode == NormMode::Pre;
        for (l, b) in vars.blocks.iter().enumerate() {
            let a_in = match (pre, b.norm1) {
                (true, Some(n)) => t.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)?,
                _ => x,
            };
            let a = self_attention_var(t, a_in, &b.attn, len, true)?;
            x = t.add(x, a)?;
            if let (true, Some(n)) = (post, b.norm1) {
                x = t.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)?;
            }

            let m_in = match (pre, b.norm2) {
                (true, Some(n)) => t.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)?,
                _ => x,
            };
            let mut m = match &b.mixer {
                MixerVars::Ffn(f) => ffn_var(t, m_in, f)?,
                MixerVars::Cross(c) => {
                    let kb = match vars.kb_layers.get(l) {
                        Some(&v) => v,
                        None => vars.kb.ok_or_else(|| Error::shape("forward", "modular block without knowledge base"))?,
                    };
                    cross_attention_var(t, m_in, kb, c)?
                }
            };
            if vars.muted.contains(&l) {
                m = t.scale(m, 0.0)?;
            }
            x = t.add(x, m)?;
            if let (true, Some(n)) = (post, b.norm2) {
                x = t.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)?;
            }
            if let Some(c) = capture.as_deref_mut() {
                c.push(x);
            }
        }
        if let Some(n) = vars.final_norm {
            x = t.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)?;
        }
        t.matmul(x, vars.head)
    }

    /// Logits (`len x vocab`) for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut t = Tape::new();
        let vars = self.bind(&mut t, &BindOptions::default());
        let out = self.forward_vars(&mut t, &vars, &[tokens])?;
        Ok(t.value(out).clone())
    }

    /// Residual stream after each block, then the logits, for one sequence.
    pub fn block_outputs(&self, tokens: &[usize]) -> Result<(Vec<Matrix>, Matrix)> {
        let mut t = Tape::new();
        let vars = self.bind(&mut t, &BindOptions::default());
        let mut hidden = Vec::new();
        let out = self.forward_inner(&mut t, &vars, &[tokens], Some(&mut hidden))?;
        let states = hidden.into_iter().map(|v| t.value(v).clone()).collect();
        Ok((states, t.value(out).clone()))
    }

    /// Mean next-token cross-entropy (nats) over positions `0..len-1`.
    pub fn loss(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Config("loss needs at least two tokens".into()));
        }
        let (loss, _) = self.batch_loss(&[tokens], None)?;
        Ok(loss)
    }

    /// Loss over windows of `len + 1` tokens: inputs are the first `len`
    /// tokens, targets the last `len`. With `opts`, also returns gradients
    /// for every parameter in [`Model::params`] order.
    pub fn batch_loss(&self, windows: &[&[usize]], opts: Option<&BindOptions>) -> Result<(f64, Option<Vec<Matrix>>)> {
        let mut t = Tape::new();
        let default = BindOptions::default();
        let vars = self.bind(&mut t, opts.unwrap_or(&default));
        let inputs: Vec<&[usize]> = windows.iter().map(|w| &w[..w.len().saturating_sub(1)]).collect();
        let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let logits = self.forward_vars(&mut t, &vars, &inputs)?;
        let loss = t.cross_entropy(logits, &targets)?;
        let value = t.value(loss).get(0, 0);
        if opts.is_none() {
            return Ok((value, None));
        }
        let mut grads = t.backward(loss)?;
        let out = vars.order.iter().map(|&v| grads.take(v)).collect();
        Ok((value, Some(out)))
    }

    /// Samples `n_tokens` continuation bytes. The context is the most recent
    /// `context_len` tokens (older prompt bytes are dropped).
    pub fn generate(&self, prompt: &[u8], n_tokens: usize, temperature: f64, seed: u64) -> Result<Vec<u8>> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if prompt.is_empty() {
            return Err(Error::Config("prompt must not be empty".into()));
        }
        let mut rng = Rng::new(seed);
        let mut tokens: Vec<usize> = prompt.iter().map(|&b| b as usize).collect();
        let mut out = Vec::with_capacity(n_tokens);
        let n = self.config.context_len;
        for _ in 0..n_tokens {
            let start = tokens.len().saturating_sub(n);
            let logits = self.forward(&tokens[start..])?;
            let last = logits.row(logits.rows() - 1);
            let next = sample(last, temperature, &mut rng);
            out.push(u8::try_from(next).map_err(|_| Error::TokenOutOfRange { id: next, vocab: 256 })?);
            tokens.push(next);
        }
        Ok(out)
    }

    /// Converts every modular block to an FFN by folding it over the (now
    /// frozen) knowledge base. The result has `ffn_dim = |E|`.
    pub fn fold_to_standard(&self) -> Result<Model> {
        if self.architecture() != Architecture::Modular {
            return Err(Error::ArchitectureMismatch {
                expected: "modular".into(),
                found: self.architecture().to_string(),
            });
        }
        let kb = self.kb.as_ref().expect("validated modular model has a knowledge base");
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let Mixer::Cross(p) = &b.mixer else { unreachable!("validated") };
            blocks.push(Block {
                mixer: Mixer::Ffn(fold(p, kb)?),
                ..b.clone()
            });
        }
        let config = ModelConfig {
            architecture: Architecture::Standard,
            ffn_dim: kb.entry_count(),
            ..self.config.clone()
        };
        Model::from_parts(
            config,
            self.tok_emb.clone(),
            self.pos_emb.clone(),
            blocks,
            None,
            self.final_norm.clone(),
            self.head.clone(),
        )
    }

    /// Converts every FFN block to cross-attention over a one-hot knowledge
    /// base of size `ffn_dim`, shared by all blocks.
    pub fn unfold_to_modular(&self) -> Result<Model> {
        if self.architecture() != Architecture::Standard {
            return Err(Error::ArchitectureMismatch {
                expected: "standard".into(),
                found: self.architecture().to_string(),
            });
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut shared: Option<KnowledgeBase> = None;
        for b in &self.blocks {
            let Mixer::Ffn(f) = &b.mixer else { unreachable!("validated") };
            let (p, kb) = extract_closure(f);
            match &shared {
                Some(s) if s != &kb => {
                    return Err(Error::shape("unfold", "blocks disagree on the knowledge base"))
                }
                Some(_) => {}
                None => shared = Some(kb),
            }
            blocks.push(Block {
                mixer: Mixer::Cross(p),
                ..b.clone()
            });
        }
        let d_ff = self.config.ffn_dim;
        let config = ModelConfig {
            architecture: Architecture::Modular,
            key_dim: d_ff,
            kb_entry_dim: d_ff,
            kb_size: d_ff,
            ..self.config.clone()
        };
        Model::from_parts(
            config,
            self.tok_emb.clone(),
            self.pos_emb.clone(),
            blocks,
            shared,
            self.final_norm.clone(),
            self.head.clone(),
        )
    }
}

/// Draws an index from `softmax(logits / temperature)`.
fn sample(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding left `u` just past the end; fall back to the last nonzero weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
