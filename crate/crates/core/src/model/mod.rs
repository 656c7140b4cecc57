//! Sequence model: frozen transformer encoder over audio features, and a
//! decoder whose blocks each host a growing set of bottleneck adapter
//! experts fused by a gated router.
//!
//! The encoder and all decoder attention weights are fixed at construction
//! and never trained. Per task, one adapter expert is appended to every
//! decoder block; training touches only the unfrozen experts, the routers,
//! and the output head. The encoder runs outside the autodiff tape and its
//! output (plus the frozen cross-attention key/value projections) is cached
//! per clip, so training steps only ever replay the decoder.

pub mod checkpoint;

use crate::audio::features::FeatureSeq;
use crate::audio::{EventKind, EventLabel};
use crate::graph::{Graph, Var};
use crate::optim::Parameter;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{softmax, NumericsError, Tensor};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const BOS_TOKEN: usize = 0;
pub const EOS_TOKEN: usize = 1;

/// Decode stops after this many emitted tokens if EOS never appears.
pub const DECODE_MAX_LEN: usize = 4;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
    #[error("unknown token {token} (vocab size {vocab})")]
    UnknownToken { token: usize, vocab: usize },
    #[error("prefix must start with BOS")]
    Prefix,
    #[error("expert for task {0} already exists")]
    DuplicateExpert(usize),
    #[error("no expert owns task {0}")]
    MissingExpert(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub bottleneck: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ffn_hidden: usize,
    pub feat_bins: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            bottleneck: 16,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ffn_hidden: 256,
            feat_bins: crate::audio::features::NUM_BINS,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    /// Small dims for gradient checks and fast tests.
    pub fn tiny(init_seed: u64) -> Self {
        ModelConfig {
            d: 16,
            heads: 2,
            bottleneck: 4,
            encoder_blocks: 1,
            decoder_blocks: 2,
            ffn_hidden: 32,
            feat_bins: crate::audio::features::NUM_BINS,
            init_seed,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.bottleneck >= self.d {
            return Err(ModelError::Config(format!(
                "bottleneck {} must be smaller than width {}",
                self.bottleneck, self.d
            )));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(ModelError::Config("need at least one block per stack".into()));
        }
        if self.ffn_hidden == 0 || self.feat_bins == 0 {
            return Err(ModelError::Config("zero-width layer".into()));
        }
        Ok(())
    }
}

/// Token table: 0 = BOS, 1 = EOS, then one token per event class in
/// first-appearance order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    entries: Vec<(EventKind, u32)>,
    index: BTreeMap<(EventKind, u32), usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.entries.len() + 2
    }

    pub fn token_for(&self, kind: EventKind, class_id: u32) -> Option<usize> {
        self.index.get(&(kind, class_id)).map(|i| i + 2)
    }

    pub fn info_for(&self, token: usize) -> Option<(EventKind, u32)> {
        token.checked_sub(2).and_then(|i| self.entries.get(i)).copied()
    }

    pub fn entries(&self) -> &[(EventKind, u32)] {
        &self.entries
    }

    fn insert(&mut self, kind: EventKind, class_id: u32) -> bool {
        if self.index.contains_key(&(kind, class_id)) {
            return false;
        }
        self.index.insert((kind, class_id), self.entries.len());
        self.entries.push((kind, class_id));
        true
    }
}

#[derive(Clone, Debug)]
pub struct AdapterExpert {
    pub owner_task: usize,
    pub w_down: Parameter,
    pub w_up: Parameter,
}

impl AdapterExpert {
    pub fn frozen(&self) -> bool {
        self.w_down.frozen
    }
}

#[derive(Clone, Debug)]
struct Attn {
    wq: Parameter,
    wk: Parameter,
    wv: Parameter,
    wo: Parameter,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: Attn,
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    self_attn: Attn,
    cross_attn: Attn,
    pub experts: Vec<AdapterExpert>,
    /// d x N_experts; one column per expert, zero-initialized on growth.
    pub router: Parameter,
}

/// Router logits and softmax weights recorded per decoder block during the
/// last forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterTrace {
    pub block_logits: Vec<Vec<f64>>,
    pub block_weights: Vec<Vec<f64>>,
}

/// Cached encoder work for one clip: final states plus the frozen
/// cross-attention key/value projections per decoder block.
#[derive(Clone, Debug)]
pub struct EncodedClip {
    pub states: Tensor,
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
}

/// Parameter-name to tape-variable map for one graph.
pub struct TapeBinding {
    vars: BTreeMap<String, Var>,
}

impl TapeBinding {
    fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Tape variable bound to a parameter name. Panics on unbound names;
    /// callers pass names from `trainable_names`.
    pub fn var_named(&self, name: &str) -> Var {
        self.var(name)
    }
}

/// Tape handles produced by one decoder forward pass.
pub struct DecoderForward {
    pub logits: Var,
    /// 1 x N_experts router logits per decoder block.
    pub router_logits: Vec<Var>,
    pub router_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MoeDecoderModel {
    cfg: ModelConfig,
    vocab: Vocab,
    in_proj_w: Parameter,
    in_proj_b: Parameter,
    enc_blocks: Vec<EncoderBlock>,
    embed: Parameter,
    dec_blocks: Vec<DecoderBlock>,
    head_w: Parameter,
    head_b: Parameter,
}

/// Residual bottleneck transform: H + ReLU(H W_down) W_up.
pub fn adapter_forward(expert: &AdapterExpert, h: &Tensor) -> Result<Tensor, NumericsError> {
    let mid = h.matmul(&expert.w_down.value)?.relu();
    h.add(&mid.matmul(&expert.w_up.value)?)
}

/// Softmax routing weights over the mean-pooled block input.
/// Returns (weights, logits).
pub fn route(router: &Tensor, block_input: &Tensor) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    let pooled = block_input.mean_rows()?;
    let logits = pooled.matmul(router)?;
    let weights = softmax(logits.row(0));
    Ok((weights, logits.row(0).to_vec()))
}

/// Convex combination of expert outputs under route() weights.
/// Returns (output, weights, logits).
pub fn moe_forward(
    block: &DecoderBlock,
    h: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>), NumericsError> {
    let (weights, logits) = route(&block.router.value, h)?;
    let mut out = Tensor::zeros(h.rows(), h.cols());
    for (expert, w) in block.experts.iter().zip(&weights) {
        out = out.add(&adapter_forward(expert, h)?.scale(*w))?;
    }
    Ok((out, weights, logits))
}

/// Sinusoidal position encoding, rows = positions.
pub fn positional_encoding(positions: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(positions, d);
    for pos in 0..positions {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(pos, 2 * i, angle.sin());
            if 2 * i + 1 < d {
                pe.set(pos, 2 * i + 1, angle.cos());
            }
        }
    }
    pe
}

/// Highest value wins; ties go to the lowest index.
pub fn greedy_pick(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m.set(r, c, MASK_NEG);
        }
    }
    m
}

fn frozen_param(name: String, rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Parameter {
    Parameter::new(name, Tensor::random_uniform(rows, cols, bound, rng), true)
}

fn attn_init(prefix: &str, d: usize, rng: &mut Rng) -> Attn {
    let bound = 1.0 / (d as f64).sqrt();
    attn_init_scaled(prefix, d, bound, bound, rng)
}

/// Decoder attention uses a wider value/output init and a narrower
/// query/key init. The decoder has no normalization layers, so the value
/// path sets the residual-stream magnitude directly; a larger stream makes
/// the head's logits move faster per optimizer step, which the short
/// per-task schedules need. Narrow query/key keeps dot products in a range
/// where softmax stays soft.
fn attn_init_scaled(prefix: &str, d: usize, qk: f64, vo: f64, rng: &mut Rng) -> Attn {
    Attn {
        wq: frozen_param(format!("{prefix}.wq"), d, d, qk, rng),
        wk: frozen_param(format!("{prefix}.wk"), d, d, qk, rng),
        wv: frozen_param(format!("{prefix}.wv"), d, d, vo, rng),
        wo: frozen_param(format!("{prefix}.wo"), d, d, vo, rng),
    }
}

/// Full-sequence multi-head attention on plain tensors (encoder only).
fn attn_tensor(h: &Tensor, attn: &Attn, heads: usize) -> Result<Tensor, NumericsError> {
    let d = h.cols();
    let hd = d / heads;
    let q = h.matmul(&attn.wq.value)?;
    let k = h.matmul(&attn.wk.value)?;
    let v = h.matmul(&attn.wv.value)?;
    let mut parts = Vec::with_capacity(heads);
    for i in 0..heads {
        let (lo, hi) = (i * hd, (i + 1) * hd);
        let scores = q
            .slice_cols(lo, hi)?
            .matmul_transb(&k.slice_cols(lo, hi)?)?
            .scale(1.0 / (hd as f64).sqrt());
        parts.push(scores.softmax_rows().matmul(&v.slice_cols(lo, hi)?)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_cols(&refs)?.matmul(&attn.wo.value)
}

enum KeyValue {
    /// Projected from the query source with the given weight vars.
    SelfProjected { wk: Var, wv: Var },
    /// Precomputed constants (frozen cross-attention over encoder states).
    Precomputed { k: Var, v: Var },
}

/// Multi-head attention on the tape. `mask` is added to the score matrix
/// before the softmax.
fn attn_tape(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wo: Var,
    kv: KeyValue,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var, NumericsError> {
    let d = g.value(x).cols();
    let hd = d / heads;
    let q = g.matmul(x, wq)?;
    let (k, v) = match kv {
        KeyValue::SelfProjected { wk, wv } => (g.matmul(x, wk)?, g.matmul(x, wv)?),
        KeyValue::Precomputed { k, v } => (k, v),
    };
    let mut parts = Vec::with_capacity(heads);
    for i in 0..heads {
        let (lo, hi) = (i * hd, (i + 1) * hd);
        let qi = g.slice_cols(q, lo, hi)?;
        let ki = g.slice_cols(k, lo, hi)?;
        let vi = g.slice_cols(v, lo, hi)?;
        let mut scores = g.matmul_transb(qi, ki)?;
        scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add_const(scores, m)?;
        }
        let att = g.softmax_rows(scores);
        parts.push(g.matmul(att, vi)?);
    }
    let cat = g.concat_cols(&parts)?;
    g.matmul(cat, wo)
}

impl MoeDecoderModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::seed_from(derive_seed(cfg.init_seed, "model-init", &[]));
        let d = cfg.d;
        let in_bound = 1.0 / (cfg.feat_bins as f64).sqrt();
        let in_proj_w = frozen_param("enc.in_proj.w".into(), cfg.feat_bins, d, in_bound, &mut rng);
        // Features sit on the log-energy floor in most bins; the bias
        // cancels the floor's projection so silent bins contribute nothing
        // and the encoder input is dominated by the active bins.
        let mut bias = Tensor::zeros(1, d);
        for j in 0..d {
            let mut col_sum = 0.0;
            for i in 0..cfg.feat_bins {
                col_sum += in_proj_w.value.get(i, j);
            }
            bias.set(0, j, crate::audio::features::LOG_FLOOR.abs() * col_sum);
        }
        let in_proj_b = Parameter::new("enc.in_proj.b", bias, true);
        let mut enc_blocks = Vec::with_capacity(cfg.encoder_blocks);
        for l in 0..cfg.encoder_blocks {
            let attn = attn_init(&format!("enc{l}.attn"), d, &mut rng);
            let wb = 1.0 / (d as f64).sqrt();
            let hb = 1.0 / (cfg.ffn_hidden as f64).sqrt();
            enc_blocks.push(EncoderBlock {
                attn,
                w1: frozen_param(format!("enc{l}.ffn.w1"), d, cfg.ffn_hidden, wb, &mut rng),
                b1: Parameter::new(format!("enc{l}.ffn.b1"), Tensor::zeros(1, cfg.ffn_hidden), true),
                w2: frozen_param(format!("enc{l}.ffn.w2"), cfg.ffn_hidden, d, hb, &mut rng),
                b2: Parameter::new(format!("enc{l}.ffn.b2"), Tensor::zeros(1, d), true),
            });
        }
        let mut dec_blocks = Vec::with_capacity(cfg.decoder_blocks);
        let qk = 0.5 / (d as f64).sqrt();
        let vo = 3.0 / (d as f64).sqrt();
        for l in 0..cfg.decoder_blocks {
            dec_blocks.push(DecoderBlock {
                self_attn: attn_init_scaled(&format!("dec{l}.self"), d, qk, vo, &mut rng),
                cross_attn: attn_init_scaled(&format!("dec{l}.cross"), d, qk, vo, &mut rng),
                experts: Vec::new(),
                router: Parameter::new(format!("dec{l}.router"), Tensor::zeros(d, 0), false),
            });
        }
        let mut model = MoeDecoderModel {
            cfg,
            vocab: Vocab::default(),
            in_proj_w,
            in_proj_b,
            enc_blocks,
            embed: Parameter::new("embed", Tensor::zeros(0, 0), true),
            dec_blocks,
            head_w: Parameter::new("head.w", Tensor::zeros(0, 0), false),
            head_b: Parameter::new("head.b", Tensor::zeros(0, 0), false),
        };
        model.rebuild_token_tables();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Embedding row for one token, derived from the init seed so the table
    /// is identical however the vocabulary grew.
    fn embed_row(&self, token: usize) -> Vec<f64> {
        let mut rng = Rng::seed_from(derive_seed(self.cfg.init_seed, "embed-row", &[token as u64]));
        (0..self.cfg.d).map(|_| rng.range(-2.0, 2.0)).collect()
    }

    // Head columns start at zero: logits carry no noise before training, so
    // the first optimizer steps already separate classes, and tokens added
    // for later tasks never perturb earlier predictions at insertion time.
    fn head_col(&self, _token: usize) -> Vec<f64> {
        vec![0.0; self.cfg.d]
    }

    /// Regrows the embedding table and output head to the current vocab.
    /// Existing head values are kept; new columns get their derived init.
    fn rebuild_token_tables(&mut self) {
        let v = self.vocab.size();
        let d = self.cfg.d;
        let mut embed = Tensor::zeros(v, d);
        for t in 0..v {
            let row = self.embed_row(t);
            for (c, val) in row.iter().enumerate() {
                embed.set(t, c, *val);
            }
        }
        let old = &self.head_w.value;
        let old_cols = old.cols();
        let mut head = Tensor::zeros(d, v);
        let mut bias = Tensor::zeros(1, v);
        for t in 0..v {
            if t < old_cols {
                for r in 0..d {
                    head.set(r, t, old.get(r, t));
                }
                bias.set(0, t, self.head_b.value.get(0, t));
            } else {
                let col = self.head_col(t);
                for (r, val) in col.iter().enumerate() {
                    head.set(r, t, *val);
                }
            }
        }
        self.embed = Parameter::new("embed", embed, true);
        self.head_w = Parameter::new("head.w", head, false);
        self.head_b = Parameter::new("head.b", bias, false);
    }

    /// Registers tokens for any classes not seen before, growing the
    /// embedding table and output head. Returns how many were added.
    pub fn ensure_label_tokens(&mut self, labels: &[EventLabel]) -> usize {
        let mut added = 0;
        for l in labels {
            if self.vocab.insert(l.kind, l.class_id) {
                added += 1;
            }
        }
        if added > 0 {
            self.rebuild_token_tables();
        }
        added
    }

    pub fn decoder_block(&self, index: usize) -> Option<&DecoderBlock> {
        self.dec_blocks.get(index)
    }

    pub fn num_experts(&self) -> usize {
        self.dec_blocks[0].experts.len()
    }

    /// Position of the expert owned by `task_id` in registry order.
    pub fn expert_index(&self, task_id: usize) -> Option<usize> {
        self.dec_blocks[0].experts.iter().position(|e| e.owner_task == task_id)
    }

    /// Appends one zero-initialized-W_up expert to every decoder block and a
    /// zero column to every router; freezes all prior experts.
    pub fn add_expert(&mut self, task_id: usize) -> Result<(), ModelError> {
        if self.expert_index(task_id).is_some() {
            return Err(ModelError::DuplicateExpert(task_id));
        }
        let (d, b) = (self.cfg.d, self.cfg.bottleneck);
        // Wider than 1/sqrt(d): the bottleneck activations set how fast W_up
        // can steer the stream, and experts must pull real weight within a
        // task's short schedule.
        let bound = 2.0 / (d as f64).sqrt();
        for (l, block) in self.dec_blocks.iter_mut().enumerate() {
            for e in &mut block.experts {
                e.w_down.frozen = true;
                e.w_up.frozen = true;
            }
            let mut rng = Rng::seed_from(derive_seed(
                self.cfg.init_seed,
                "expert-down",
                &[l as u64, task_id as u64],
            ));
            let w_down = Parameter::new(
                format!("dec{l}.expert{task_id}.down"),
                Tensor::random_uniform(d, b, bound, &mut rng),
                false,
            );
            let w_up =
                Parameter::new(format!("dec{l}.expert{task_id}.up"), Tensor::zeros(b, d), false);
            block.experts.push(AdapterExpert { owner_task: task_id, w_down, w_up });
            let old = &block.router.value;
            let n = old.cols();
            let mut grown = Tensor::zeros(d, n + 1);
            for r in 0..d {
                for c in 0..n {
                    grown.set(r, c, old.get(r, c));
                }
            }
            block.router = Parameter::new(format!("dec{l}.router"), grown, false);
        }
        Ok(())
    }

    /// (block, owner_task, frozen) rows in block-major registry order.
    pub fn expert_registry(&self) -> Vec<(usize, usize, bool)> {
        let mut rows = Vec::new();
        for (l, block) in self.dec_blocks.iter().enumerate() {
            for e in &block.experts {
                rows.push((l, e.owner_task, e.frozen()));
            }
        }
        rows
    }

    /// Runs the frozen encoder over a feature sequence and precomputes the
    /// cross-attention key/value projections for every decoder block.
    pub fn encode(&self, feats: &FeatureSeq) -> Result<EncodedClip, ModelError> {
        if feats.frames.cols() != self.cfg.feat_bins {
            return Err(ModelError::Config(format!(
                "feature bins {} do not match model {}",
                feats.frames.cols(),
                self.cfg.feat_bins
            )));
        }
        let p = feats.frames.rows();
        let mut x = feats
            .frames
            .matmul(&self.in_proj_w.value)?
            .add_bias(&self.in_proj_b.value)?
            .add(&positional_encoding(p, self.cfg.d))?;
        for block in &self.enc_blocks {
            let h = x.layer_norm_rows(LN_EPS);
            x = x.add(&attn_tensor(&h, &block.attn, self.cfg.heads)?)?;
            let h2 = x.layer_norm_rows(LN_EPS);
            let f = h2
                .matmul(&block.w1.value)?
                .add_bias(&block.b1.value)?
                .relu()
                .matmul(&block.w2.value)?
                .add_bias(&block.b2.value)?;
            x = x.add(&f)?;
        }
        let states = x.layer_norm_rows(LN_EPS);
        let mut cross_k = Vec::with_capacity(self.dec_blocks.len());
        let mut cross_v = Vec::with_capacity(self.dec_blocks.len());
        for block in &self.dec_blocks {
            cross_k.push(states.matmul(&block.cross_attn.wk.value)?);
            cross_v.push(states.matmul(&block.cross_attn.wv.value)?);
        }
        Ok(EncodedClip { states, cross_k, cross_v })
    }

    fn decoder_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, block) in self.dec_blocks.iter().enumerate() {
            for part in ["wq", "wk", "wv", "wo"] {
                names.push(format!("dec{l}.self.{part}"));
                names.push(format!("dec{l}.cross.{part}"));
            }
            for e in &block.experts {
                names.push(format!("dec{l}.expert{}.down", e.owner_task));
                names.push(format!("dec{l}.expert{}.up", e.owner_task));
            }
            names.push(format!("dec{l}.router"));
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    /// Names of the parameters the optimizer may touch, in a stable order:
    /// per block, unfrozen experts then the router; finally the head.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, block) in self.dec_blocks.iter().enumerate() {
            for e in &block.experts {
                if !e.frozen() {
                    names.push(format!("dec{l}.expert{}.down", e.owner_task));
                    names.push(format!("dec{l}.expert{}.up", e.owner_task));
                }
            }
            names.push(format!("dec{l}.router"));
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    pub fn trainable_values(&self) -> Vec<Tensor> {
        self.trainable_names()
            .iter()
            .map(|n| self.param(n).expect("trainable name resolves").value.clone())
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    /// Every parameter in the model, in a stable serialization order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = vec![&self.in_proj_w, &self.in_proj_b];
        for b in &self.enc_blocks {
            out.extend([&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo]);
            out.extend([&b.w1, &b.b1, &b.w2, &b.b2]);
        }
        out.push(&self.embed);
        for b in &self.dec_blocks {
            out.extend([&b.self_attn.wq, &b.self_attn.wk, &b.self_attn.wv, &b.self_attn.wo]);
            out.extend([&b.cross_attn.wq, &b.cross_attn.wk, &b.cross_attn.wv, &b.cross_attn.wo]);
            for e in &b.experts {
                out.push(&e.w_down);
                out.push(&e.w_up);
            }
            out.push(&b.router);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = vec![&mut self.in_proj_w, &mut self.in_proj_b];
        for b in &mut self.enc_blocks {
            out.extend([&mut b.attn.wq, &mut b.attn.wk, &mut b.attn.wv, &mut b.attn.wo]);
            out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        out.push(&mut self.embed);
        for b in &mut self.dec_blocks {
            out.extend([
                &mut b.self_attn.wq,
                &mut b.self_attn.wk,
                &mut b.self_attn.wv,
                &mut b.self_attn.wo,
            ]);
            out.extend([
                &mut b.cross_attn.wq,
                &mut b.cross_attn.wk,
                &mut b.cross_attn.wv,
                &mut b.cross_attn.wo,
            ]);
            for e in &mut b.experts {
                out.push(&mut e.w_down);
                out.push(&mut e.w_up);
            }
            out.push(&mut b.router);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Parameter> {
        let names: BTreeSet<String> = self.trainable_names().into_iter().collect();
        self.params_mut().into_iter().filter(|p| names.contains(&p.name)).collect()
    }

    /// FNV over the frozen encoder weights; training must not change it.
    pub fn encoder_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params() {
            if p.name.starts_with("enc") {
                for v in p.value.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        crate::rng::fnv1a(&bytes)
    }

    /// Binds decoder parameters into a graph: trainable ones (or the subset
    /// in `overrides`) as the given leaves, everything else as constants.
    fn bind_internal(&self, g: &mut Graph, overrides: &BTreeMap<String, Var>) -> TapeBinding {
        let trainable: BTreeSet<String> = self.trainable_names().into_iter().collect();
        let mut vars = BTreeMap::new();
        for name in self.decoder_param_names() {
            let var = if let Some(v) = overrides.get(&name) {
                *v
            } else {
                let value = self.param(&name).expect("decoder name resolves").value.clone();
                if trainable.contains(&name) && overrides.is_empty() {
                    g.leaf(value)
                } else {
                    g.constant(value)
                }
            };
            vars.insert(name, var);
        }
        TapeBinding { vars }
    }

    /// Binds every trainable parameter as a gradient-taking leaf and every
    /// frozen decoder parameter as a constant.
    pub fn bind(&self, g: &mut Graph) -> TapeBinding {
        self.bind_internal(g, &BTreeMap::new())
    }

    /// Binds with caller-supplied leaves for some trainable parameters
    /// (gradient checks); everything else becomes a constant.
    pub fn bind_with(&self, g: &mut Graph, named: &BTreeMap<String, Var>) -> TapeBinding {
        self.bind_internal(g, named)
    }

    /// Copies gradients out of the tape into the model's parameters.
    /// Parameters without a gradient in this graph are left at zero.
    pub fn apply_tape_grads(&mut self, g: &Graph, binding: &TapeBinding) {
        let names = self.trainable_names();
        for name in names {
            let var = binding.var(&name);
            let grad = g.grad(var).cloned();
            if let Some(grad) = grad {
                let p = self.param_mut(&name).expect("trainable name resolves");
                p.grad = grad;
            }
        }
    }

    /// Teacher-forced decoder pass on the tape. The prefix must start with
    /// BOS; returns per-position vocab logits and per-block router handles.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        binding: &TapeBinding,
        enc: &EncodedClip,
        prefix: &[usize],
    ) -> Result<DecoderForward, ModelError> {
        if prefix.first() != Some(&BOS_TOKEN) {
            return Err(ModelError::Prefix);
        }
        let vocab = self.vocab.size();
        for &t in prefix {
            if t >= vocab {
                return Err(ModelError::UnknownToken { token: t, vocab });
            }
        }
        if enc.cross_k.len() != self.dec_blocks.len()
            || enc.states.cols() != self.cfg.d
        {
            return Err(ModelError::Config("encoded clip does not match model".into()));
        }
        let p = prefix.len();
        let d = self.cfg.d;
        let mut emb = Tensor::zeros(p, d);
        for (r, &tok) in prefix.iter().enumerate() {
            for c in 0..d {
                emb.set(r, c, self.embed.value.get(tok, c));
            }
        }
        let emb = emb.add(&positional_encoding(p, d))?;
        let mut x = g.constant(emb);
        let mask = causal_mask(p);
        let mut router_logits = Vec::with_capacity(self.dec_blocks.len());
        let mut router_weights = Vec::with_capacity(self.dec_blocks.len());
        for (l, block) in self.dec_blocks.iter().enumerate() {
            let self_out = attn_tape(
                g,
                x,
                binding.var(&format!("dec{l}.self.wq")),
                binding.var(&format!("dec{l}.self.wo")),
                KeyValue::SelfProjected {
                    wk: binding.var(&format!("dec{l}.self.wk")),
                    wv: binding.var(&format!("dec{l}.self.wv")),
                },
                self.cfg.heads,
                Some(&mask),
            )?;
            x = g.add(x, self_out)?;
            let k = g.constant(enc.cross_k[l].clone());
            let v = g.constant(enc.cross_v[l].clone());
            let cross_out = attn_tape(
                g,
                x,
                binding.var(&format!("dec{l}.cross.wq")),
                binding.var(&format!("dec{l}.cross.wo")),
                KeyValue::Precomputed { k, v },
                self.cfg.heads,
                None,
            )?;
            x = g.add(x, cross_out)?;
            // MoE adapter layer: O(x) = sum_i alpha_i E_i(x), where each
            // E_i already carries the residual.
            let pooled = g.mean_rows(x)?;
            let logits = g.matmul(pooled, binding.var(&format!("dec{l}.router")))?;
            let alpha = g.softmax_rows(logits);
            router_logits.push(logits);
            router_weights.push(alpha);
            let mut mixed: Option<Var> = None;
            for (i, e) in block.experts.iter().enumerate() {
                let down = binding.var(&format!("dec{l}.expert{}.down", e.owner_task));
                let up = binding.var(&format!("dec{l}.expert{}.up", e.owner_task));
                let mid = g.matmul(x, down)?;
                let mid = g.relu(mid);
                let delta = g.matmul(mid, up)?;
                let expert_out = g.add(x, delta)?;
                let a_i = g.pick(alpha, 0, i)?;
                let term = g.mul_scalar(expert_out, a_i)?;
                mixed = Some(match mixed {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            x = mixed.ok_or(ModelError::Config("decoder has no experts".into()))?;
        }
        let proj = g.matmul(x, binding.var("head.w"))?;
        let logits = g.add_bias(proj, binding.var("head.b"))?;
        Ok(DecoderForward { logits, router_logits, router_weights })
    }

    /// Convenience forward: builds a throwaway graph and returns the logits
    /// plus the router trace.
    pub fn forward(
        &self,
        enc: &EncodedClip,
        prefix: &[usize],
    ) -> Result<(Tensor, RouterTrace), ModelError> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g);
        let fwd = self.forward_on(&mut g, &binding, enc, prefix)?;
        let trace = RouterTrace {
            block_logits: fwd.router_logits.iter().map(|v| g.value(*v).row(0).to_vec()).collect(),
            block_weights: fwd.router_weights.iter().map(|v| g.value(*v).row(0).to_vec()).collect(),
        };
        Ok((g.value(fwd.logits).clone(), trace))
    }

    /// Greedy decode from BOS until EOS or `max_len` tokens; returns the
    /// predicted label set. Ties break toward the lowest token index.
    pub fn decode_greedy(
        &self,
        enc: &EncodedClip,
        max_len: usize,
    ) -> Result<BTreeSet<(EventKind, u32)>, ModelError> {
        let mut prefix = vec![BOS_TOKEN];
        let mut out = BTreeSet::new();
        for _ in 0..max_len {
            let (logits, _) = self.forward(enc, &prefix)?;
            let tok = greedy_pick(logits.row(logits.rows() - 1));
            if tok == EOS_TOKEN {
                break;
            }
            prefix.push(tok);
            if let Some(info) = self.vocab.info_for(tok) {
                out.insert(info);
            }
        }
        Ok(out)
    }

    /// Gold token sequence for a clip's labels: semantic before acoustic,
    /// then EOS. Panics if a label has no token (callers register first).
    pub fn target_tokens(&self, labels: &[EventLabel]) -> Vec<usize> {
        let mut sorted: Vec<&EventLabel> = labels.iter().collect();
        sorted.sort_by_key(|l| (l.kind, l.class_id));
        let mut toks: Vec<usize> = sorted
            .iter()
            .map(|l| {
                self.vocab
                    .token_for(l.kind, l.class_id)
                    .expect("label token registered before training")
            })
            .collect();
        toks.push(EOS_TOKEN);
        toks
    }
}
