//! Training loop and learning-rate sweep execution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, ParameterStore};
use crate::error::{Error, Result};
use crate::report::{csv_document, fmt_g, RunMeta};
use crate::rng::Rng;

use super::optim::{adamw_step, clip_grad_norm, AdamWHyper, AdamWState};
use super::{build_model, mask_corrupt, sample_tokens, LayoutSpec, MaskedLmObjective, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything a single training run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub mechanism: String,
    pub lr: f64,
    /// Batch loss before each update, one entry per step taken.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub terminal_loss: f64,
    /// First step whose loss exceeded ten times the initial loss.
    pub blowup_at_step: Option<usize>,
    /// Step at which the gradient or loss went NaN/Inf, ending the run.
    pub nonfinite_at_step: Option<usize>,
    pub final_params: ParameterStore,
}

impl RunRecord {
    /// Sweep-table divergence: a non-finite loss, or a terminal loss above
    /// the initial loss.
    pub fn diverged(&self) -> bool {
        self.nonfinite_at_step.is_some() || self.terminal_loss > self.initial_loss
    }

    pub fn diverged_at_step(&self) -> Option<usize> {
        self.nonfinite_at_step.or(self.blowup_at_step)
    }

    /// Loss curve CSV with columns (step, loss).
    pub fn loss_curve_csv(&self, meta: &RunMeta) -> String {
        let rows: Vec<Vec<String>> = self
            .losses
            .iter()
            .enumerate()
            .map(|(s, l)| vec![s.to_string(), fmt_g(*l)])
            .collect();
        csv_document(meta, &["step", "loss"], &rows)
    }
}

/// Train one model to completion. Deterministic for a fixed config: model
/// init, batch order, and masking all derive from the config seed.
pub fn train(cfg: &TrainConfig, corpus: &[u8]) -> Result<RunRecord> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut model = build_model(&cfg.model, &mut root.substream("build"))?;
    let mut data_rng = root.substream("data");
    let mut state = AdamWState::new(model.params.dim());
    let hyper = AdamWHyper {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWHyper::with_lr(cfg.lr)
    };
    let mechanism = layout_tag(&cfg.model.layout);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut blowup_at_step = None;
    let mut nonfinite_at_step = None;
    let mut initial_loss = f64::NAN;

    for step in 0..cfg.steps {
        let tokens = sample_tokens(corpus, cfg.batch_size, cfg.model.max_seq_len, &mut data_rng)?;
        let batch = mask_corrupt(&tokens, cfg.mask_rate, &mut data_rng, cfg.model.mask_id())?;
        let obj = MaskedLmObjective {
            model: &model,
            batch: &batch,
        };
        let (loss, g) = match grad(&obj, &model.params) {
            Ok(pair) => pair,
            Err(Error::NonFinite(_)) => {
                losses.push(f64::NAN);
                nonfinite_at_step = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        if step == 0 {
            initial_loss = loss;
        }
        if blowup_at_step.is_none() && loss > 10.0 * initial_loss {
            blowup_at_step = Some(step);
        }
        let clipped = clip_grad_norm(&g, cfg.clip_norm);
        adamw_step(&mut model.params, &clipped, &mut state, &hyper)?;
    }

    let terminal_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok(RunRecord {
        mechanism,
        lr: cfg.lr,
        losses,
        initial_loss,
        terminal_loss,
        blowup_at_step,
        nonfinite_at_step,
        final_params: model.params,
    })
}

fn layout_tag(layout: &LayoutSpec) -> String {
    match layout {
        LayoutSpec::Named(n) => n.clone(),
        LayoutSpec::Tags(tags) => tags
            .iter()
            .map(|t| t.tag())
            .collect::<Vec<_>>()
            .join("+"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub model: ModelConfig,
    /// Mechanism layouts to sweep, e.g. ["sa", "sc", "mix"].
    pub mechanisms: Vec<String>,
    pub lrs: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub mechanism: String,
    pub lr: f64,
    pub terminal_loss: f64,
    pub diverged: bool,
    pub diverged_at_step: Option<usize>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub warnings: Vec<String>,
}

impl SweepTable {
    pub fn non_diverged_count(&self, mechanism: &str) -> usize {
        self.cells
            .iter()
            .filter(|c| c.mechanism == mechanism && !c.diverged)
            .count()
    }

    pub fn cell(&self, mechanism: &str, lr: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.mechanism == mechanism && c.lr == lr)
    }

    /// Pinned column order (mechanism, lr, terminal_loss, diverged,
    /// diverged_at_step).
    pub fn to_csv(&self, meta: &RunMeta) -> String {
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.mechanism.clone(),
                    fmt_g(c.lr),
                    fmt_g(c.terminal_loss),
                    c.diverged.to_string(),
                    c.diverged_at_step.map_or(String::new(), |s| s.to_string()),
                ]
            })
            .collect();
        csv_document(
            meta,
            &["mechanism", "lr", "terminal_loss", "diverged", "diverged_at_step"],
            &rows,
        )
    }
}

/// Run every (mechanism, lr) cell. Duplicate learning rates are dropped with
/// a warning. Cells are independent and run on the worker pool; results are
/// merged in deterministic cell order.
pub fn lr_sweep(cfg: &SweepConfig, corpus: &[u8]) -> Result<SweepTable> {
    if cfg.lrs.is_empty() || cfg.mechanisms.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one mechanism and one learning rate".into(),
        ));
    }
    let mut warnings = vec![];
    let mut lrs: Vec<f64> = vec![];
    for &lr in &cfg.lrs {
        if lrs.contains(&lr) {
            warnings.push(format!("duplicate learning rate {lr} dropped"));
        } else {
            lrs.push(lr);
        }
    }

    let mut jobs = vec![];
    for mech in &cfg.mechanisms {
        for &lr in &lrs {
            let mut model = cfg.model.clone();
            model.layout = LayoutSpec::Named(mech.clone());
            jobs.push(TrainConfig {
                model,
                lr,
                steps: cfg.steps,
                batch_size: cfg.batch_size,
                mask_rate: cfg.mask_rate,
                weight_decay: cfg.weight_decay,
                clip_norm: cfg.clip_norm,
                seed: cfg.seed,
            });
        }
    }

    let records: Result<Vec<RunRecord>> =
        jobs.par_iter().map(|job| train(job, corpus)).collect();
    let cells = records?
        .into_iter()
        .map(|r| SweepCell {
            diverged: r.diverged(),
            diverged_at_step: r.diverged_at_step(),
            mechanism: r.mechanism,
            lr: r.lr,
            terminal_loss: r.terminal_loss,
            losses: r.losses,
        })
        .collect();
    Ok(SweepTable { cells, warnings })
}
