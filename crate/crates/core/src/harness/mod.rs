//! Toy pre-LayerNorm transformer assembly over the mechanism set, the
//! masked-token objective, AdamW training, and learning-rate sweeps.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{
    adamw_commit, adamw_preview, adamw_step, clip_grad_norm, AdamWHyper, AdamWPreview, AdamWState,
};
pub use train::{lr_sweep, train, RunRecord, SweepCell, SweepConfig, SweepTable, TrainConfig};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention_tape, init_attention_slots, sliding_window_tape, AttentionHyper};
use crate::autodiff::{Binder, NodeId, Objective, ParameterStore, Real, Tape};
use crate::consensus::{init_consensus_slots, self_consensus_tape, ConsensusHyper};
use crate::error::{Error, Result};
use crate::graph::build_window_path;
use crate::report::fnv1a_hash;
use crate::rng::Rng;

/// Rotary base shared by every mechanism when positions are enabled.
pub const ROPE_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechKind {
    Sa,
    Sc,
    Sw,
}

impl MechKind {
    pub fn tag(&self) -> &'static str {
        match self {
            MechKind::Sa => "sa",
            MechKind::Sc => "sc",
            MechKind::Sw => "sw",
        }
    }
}

/// Mechanism layout: a named scheme ("sa", "sc", "sw", "mix") or an explicit
/// per-layer tag list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutSpec {
    Named(String),
    Tags(Vec<MechKind>),
}

impl LayoutSpec {
    pub fn resolve(&self, layers: usize) -> Result<Vec<MechKind>> {
        match self {
            LayoutSpec::Tags(tags) => {
                if tags.len() != layers {
                    return Err(Error::Config(format!(
                        "layout lists {} layers, model has {layers}",
                        tags.len()
                    )));
                }
                Ok(tags.clone())
            }
            LayoutSpec::Named(name) => match name.as_str() {
                "sa" => Ok(vec![MechKind::Sa; layers]),
                "sc" => Ok(vec![MechKind::Sc; layers]),
                "sw" => Ok(vec![MechKind::Sw; layers]),
                // Hybrid: first half attention, remainder consensus.
                "mix" => {
                    let first = layers.div_ceil(2);
                    let mut tags = vec![MechKind::Sa; first];
                    tags.extend(vec![MechKind::Sc; layers - first]);
                    Ok(tags)
                }
                other => Err(Error::Config(format!("unknown layout {other:?}"))),
            },
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_ffn_mult() -> usize {
    4
}

fn default_eta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_seq_len: usize,
    pub layout: LayoutSpec,
    /// Consensus window-path half-width.
    pub window: usize,
    /// Low-rank factor rank of the consensus edge weights.
    pub rank: usize,
    /// Edge network hidden width.
    pub edge_hidden: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub sw_window: usize,
    pub vocab_size: usize,
    #[serde(default = "default_true")]
    pub rope: bool,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// Small default shapes: minutes-scale on CI, big enough to train.
    pub fn toy(layout: &str) -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            dim: 64,
            max_seq_len: 128,
            layout: LayoutSpec::Named(layout.to_string()),
            window: 2,
            rank: 4,
            edge_hidden: 32,
            eta: 0.1,
            sw_window: 2,
            vocab_size: 256,
            rope: true,
            ffn_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be positive and divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be >= 1".into()));
        }
        let layout = self.layout.resolve(self.layers)?;
        if layout.contains(&MechKind::Sc) {
            if self.window == 0 || self.window >= self.max_seq_len {
                return Err(Error::Config(format!(
                    "consensus window {} must satisfy 1 <= w < max_seq_len {}",
                    self.window, self.max_seq_len
                )));
            }
            if self.rank == 0 || self.edge_hidden == 0 {
                return Err(Error::Config("rank and edge_hidden must be >= 1".into()));
            }
            if !(self.eta > 0.0) {
                return Err(Error::Config("eta must be > 0".into()));
            }
            if self.rope && self.dim % 2 != 0 {
                return Err(Error::Config(
                    "rotary positions require an even model dimension".into(),
                ));
            }
        }
        if self.rope && (self.dim / self.heads) % 2 != 0 {
            return Err(Error::Config(
                "rotary positions require an even head dimension".into(),
            ));
        }
        Ok(())
    }

    /// Stable hash over the canonical JSON encoding; embedded in artifacts
    /// and checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a_hash(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    fn consensus_hyper(&self) -> ConsensusHyper {
        ConsensusHyper {
            dim: self.dim,
            heads: self.heads,
            rank: self.rank,
            edge_hidden: self.edge_hidden,
            eta: self.eta,
            rope_base: if self.rope { Some(ROPE_BASE) } else { None },
        }
    }

    fn attention_hyper(&self, window: Option<usize>) -> AttentionHyper {
        AttentionHyper {
            dim: self.dim,
            heads: self.heads,
            rope_base: if self.rope { Some(ROPE_BASE) } else { None },
            window,
        }
    }

    /// Token id used for corrupted positions; one past the real vocabulary.
    pub fn mask_id(&self) -> usize {
        self.vocab_size
    }
}

/// A built model: parameter store plus the resolved layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: Vec<MechKind>,
    pub params: ParameterStore,
}

/// Deterministically initialize a model from a config and an RNG.
pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model> {
    cfg.validate()?;
    let layout = cfg.layout.resolve(cfg.layers)?;
    let d = cfg.dim;
    let mut store = ParameterStore::new();
    let mut init_rng = rng.substream("model-init");

    let embed_rows = cfg.vocab_size + 1; // final row embeds the mask token
    let mut embed = vec![0.0; embed_rows * d];
    init_rng.fill_uniform(&mut embed, 1.0 / (d as f64).sqrt());
    store.push("embed.tok", embed)?;

    for (l, mech) in layout.iter().enumerate() {
        store.push(&format!("layer{l}.ln1.gamma"), vec![1.0; d])?;
        store.push(&format!("layer{l}.ln1.beta"), vec![0.0; d])?;
        match mech {
            MechKind::Sc => init_consensus_slots(
                &mut store,
                &format!("layer{l}.sc"),
                &cfg.consensus_hyper(),
                false,
                &mut init_rng,
            )?,
            MechKind::Sa => init_attention_slots(
                &mut store,
                &format!("layer{l}.sa"),
                &cfg.attention_hyper(None),
                &mut init_rng,
            )?,
            MechKind::Sw => init_attention_slots(
                &mut store,
                &format!("layer{l}.sw"),
                &cfg.attention_hyper(Some(cfg.sw_window)),
                &mut init_rng,
            )?,
        }
        store.push(&format!("layer{l}.ln2.gamma"), vec![1.0; d])?;
        store.push(&format!("layer{l}.ln2.beta"), vec![0.0; d])?;
        let hidden = cfg.ffn_mult * d;
        let mut w1 = vec![0.0; d * hidden];
        init_rng.fill_uniform(&mut w1, 1.0 / (d as f64).sqrt());
        store.push(&format!("layer{l}.ffn.w1"), w1)?;
        store.push(&format!("layer{l}.ffn.b1"), vec![0.0; hidden])?;
        let mut w2 = vec![0.0; hidden * d];
        init_rng.fill_uniform(&mut w2, 1.0 / (hidden as f64).sqrt());
        store.push(&format!("layer{l}.ffn.w2"), w2)?;
        store.push(&format!("layer{l}.ffn.b2"), vec![0.0; d])?;
    }
    store.push("final_ln.gamma", vec![1.0; d])?;
    store.push("final_ln.beta", vec![0.0; d])?;
    let mut w_out = vec![0.0; d * cfg.vocab_size];
    init_rng.fill_uniform(&mut w_out, 1.0 / (d as f64).sqrt());
    store.push("out.w", w_out)?;
    store.push("out.b", vec![0.0; cfg.vocab_size])?;

    Ok(Model {
        cfg: cfg.clone(),
        layout,
        params: store,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.dim()
    }

    fn layer_norm<S: Real>(
        tape: &mut Tape<S>,
        binder: &mut Binder<'_, S>,
        prefix: &str,
        d: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = binder.param(tape, &format!("{prefix}.gamma"), 1, d)?;
        let beta = binder.param(tape, &format!("{prefix}.beta"), 1, d)?;
        Ok(tape.layer_norm_rows(x, gamma, beta))
    }

    /// Hidden states after all blocks (before the final norm) for one
    /// sequence of token ids.
    pub fn sequence_hidden<S: Real>(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder<'_, S>,
        tokens: &[usize],
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let n = tokens.len();
        if n < 2 || n > cfg.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {n} outside 2..=max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        for &t in tokens {
            if t > cfg.vocab_size {
                return Err(Error::Config(format!("token id {t} out of range")));
            }
        }
        let graph = if self.layout.contains(&MechKind::Sc) {
            if cfg.window >= n {
                return Err(Error::Config(format!(
                    "consensus window {} requires sequences longer than the window",
                    cfg.window
                )));
            }
            Some(build_window_path(n, cfg.window)?)
        } else {
            None
        };

        let embed = binder.param(tape, "embed.tok", cfg.vocab_size + 1, d)?;
        let ids = Rc::new(tokens.to_vec());
        let mut x = tape.gather_rows(embed, ids);

        for (l, mech) in self.layout.iter().enumerate() {
            let normed = Self::layer_norm(tape, binder, &format!("layer{l}.ln1"), d, x)?;
            let mixed = match mech {
                MechKind::Sc => {
                    let (out, _) = self_consensus_tape(
                        tape,
                        binder,
                        &format!("layer{l}.sc"),
                        &cfg.consensus_hyper(),
                        graph.as_ref().expect("graph built for sc layouts"),
                        normed,
                    )?;
                    out
                }
                MechKind::Sa => {
                    dense_attention_tape(
                        tape,
                        binder,
                        &format!("layer{l}.sa"),
                        &cfg.attention_hyper(None),
                        normed,
                        normed,
                    )?
                    .0
                }
                MechKind::Sw => sliding_window_tape(
                    tape,
                    binder,
                    &format!("layer{l}.sw"),
                    &cfg.attention_hyper(Some(cfg.sw_window)),
                    normed,
                )?,
            };
            x = tape.add(x, mixed);

            let normed2 = Self::layer_norm(tape, binder, &format!("layer{l}.ln2"), d, x)?;
            let hidden = cfg.ffn_mult * d;
            let w1 = binder.param(tape, &format!("layer{l}.ffn.w1"), d, hidden)?;
            let b1 = binder.param(tape, &format!("layer{l}.ffn.b1"), 1, hidden)?;
            let w2 = binder.param(tape, &format!("layer{l}.ffn.w2"), hidden, d)?;
            let b2 = binder.param(tape, &format!("layer{l}.ffn.b2"), 1, d)?;
            let h1 = tape.matmul(normed2, w1);
            let h1 = tape.add_row_broadcast(h1, b1);
            let act = tape.gelu(h1);
            let h2 = tape.matmul(act, w2);
            let ffn = tape.add_row_broadcast(h2, b2);
            x = tape.add(x, ffn);
        }
        Ok(x)
    }

    /// Vocabulary logits for one sequence.
    pub fn sequence_logits<S: Real>(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder<'_, S>,
        tokens: &[usize],
    ) -> Result<NodeId> {
        let d = self.cfg.dim;
        let hidden = self.sequence_hidden(tape, binder, tokens)?;
        let normed = Self::layer_norm(tape, binder, "final_ln", d, hidden)?;
        let w = binder.param(tape, "out.w", d, self.cfg.vocab_size)?;
        let b = binder.param(tape, "out.b", 1, self.cfg.vocab_size)?;
        let logits = tape.matmul(normed, w);
        Ok(tape.add_row_broadcast(logits, b))
    }
}

/// Corrupted batch: token ids with mask substitutions, plus targets at the
/// masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub masked_positions: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn masked_count(&self) -> usize {
        self.masked_positions.iter().map(|p| p.len()).sum()
    }
}

/// Independently mask each position with probability `rate`, replacing the
/// token with the mask id. Sequences that draw no masked position are
/// resampled so every sequence contributes at least one target.
pub fn mask_corrupt(
    tokens: &[Vec<usize>],
    rate: f64,
    rng: &mut Rng,
    mask_id: usize,
) -> Result<Batch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Parameter(format!(
            "mask rate must lie in (0, 1), got {rate}"
        )));
    }
    let mut out_tokens = Vec::with_capacity(tokens.len());
    let mut masked_positions = Vec::with_capacity(tokens.len());
    let mut targets = Vec::with_capacity(tokens.len());
    for seq in tokens {
        let mut corrupted;
        let mut positions;
        let mut tgt;
        loop {
            corrupted = seq.clone();
            positions = vec![];
            tgt = vec![];
            for (i, &tok) in seq.iter().enumerate() {
                if rng.bernoulli(rate) {
                    corrupted[i] = mask_id;
                    positions.push(i);
                    tgt.push(tok);
                }
            }
            if !positions.is_empty() {
                break;
            }
        }
        out_tokens.push(corrupted);
        masked_positions.push(positions);
        targets.push(tgt);
    }
    Ok(Batch {
        tokens: out_tokens,
        masked_positions,
        targets,
    })
}

/// Draw `batch` windows of `len` tokens uniformly from a byte corpus.
pub fn sample_tokens(
    corpus: &[u8],
    batch: usize,
    len: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if corpus.len() < len {
        return Err(Error::Config(format!(
            "corpus has {} bytes, need at least {len}",
            corpus.len()
        )));
    }
    let span = corpus.len() - len + 1;
    Ok((0..batch)
        .map(|_| {
            let start = rng.below(span);
            corpus[start..start + len].iter().map(|&b| b as usize).collect()
        })
        .collect())
}

/// Masked-token cross-entropy over a batch: the mean negative log-likelihood
/// across every masked position, sequences weighted by their masked counts.
pub struct MaskedLmObjective<'a> {
    pub model: &'a Model,
    pub batch: &'a Batch,
}

impl Objective for MaskedLmObjective<'_> {
    fn loss<S: Real>(&self, tape: &mut Tape<S>, binder: &mut Binder<'_, S>) -> Result<NodeId> {
        let total = self.batch.masked_count();
        if total == 0 {
            return Err(Error::Config("batch has no masked positions".into()));
        }
        let mut acc: Option<NodeId> = None;
        for (s, seq) in self.batch.tokens.iter().enumerate() {
            let logits = self.model.sequence_logits(tape, binder, seq)?;
            let rows = Rc::new(self.batch.masked_positions[s].clone());
            let masked_logits = tape.gather_rows(logits, rows);
            let targets = Rc::new(self.batch.targets[s].clone());
            let ce = tape.cross_entropy_mean(masked_logits, targets);
            let weight = self.batch.targets[s].len() as f64 / total as f64;
            let scaled = tape.scale(ce, weight);
            acc = Some(match acc {
                None => scaled,
                Some(prev) => tape.add(prev, scaled),
            });
        }
        Ok(acc.expect("at least one sequence"))
    }
}

/// Forward loss only. A non-finite value is returned as-is for the caller
/// to record; it is not an error here.
pub fn forward_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let obj = MaskedLmObjective { model, batch };
    let mut tape: Tape<f64> = Tape::new();
    let mut binder = Binder::new(&model.params, None);
    let out = obj.loss(&mut tape, &mut binder)?;
    Ok(tape.scalar_value(out))
}
