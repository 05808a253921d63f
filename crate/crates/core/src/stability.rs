//! Directional maximum-stable-learning-rate estimation: per-step curvature
//! along the optimizer update direction, the warmup/probe protocol, and the
//! summary statistics (median non-infinite alpha_max, percent stable steps).

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, hvp_exact, hvp_fd, Objective, ParameterStore};
use crate::error::{Error, Result};
use crate::harness::{
    adamw_commit, adamw_preview, clip_grad_norm, mask_corrupt, AdamWHyper, AdamWState,
    MaskedLmObjective, Model,
};
use crate::report::{csv_document, fmt_g, RunMeta};
use crate::rng::Rng;
use crate::tensor::{sym_eig, Matrix};

/// Pinned finite-difference step for Hessian-vector products.
pub const HVP_FD_EPS: f64 = 1e-4;

pub const PROBE_WARMUP_BATCHES: usize = 5;
pub const PROBE_WARMUP_STEPS: usize = 5;
pub const PROBE_RECORD_STEPS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HvpMode {
    Exact,
    Fd,
}

impl HvpMode {
    pub fn tag(&self) -> &'static str {
        match self {
            HvpMode::Exact => "exact",
            HvpMode::Fd => "fd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaClass {
    Zero,
    Finite,
    Infinite,
}

impl AlphaClass {
    pub fn tag(&self) -> &'static str {
        match self {
            AlphaClass::Zero => "zero",
            AlphaClass::Finite => "finite",
            AlphaClass::Infinite => "infinite",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlphaMaxRecord {
    pub step: usize,
    pub gdotu: f64,
    pub uhu: f64,
    /// In [0, inf]; infinity is representable.
    pub alpha_max: f64,
    pub classification: AlphaClass,
    /// False when the gradient or curvature came back non-finite.
    pub valid: bool,
}

/// Three-way classification of the stability threshold along a direction:
/// ascent directions pin alpha to zero, negative curvature with descent is
/// unbounded, and the remaining case is -2 <g,u> / <u,Hu>.
pub fn classify_alpha(gdotu: f64, uhu: f64) -> (f64, AlphaClass) {
    if gdotu > 0.0 {
        (0.0, AlphaClass::Zero)
    } else if uhu < 0.0 {
        (f64::INFINITY, AlphaClass::Infinite)
    } else {
        let alpha = -2.0 * gdotu / uhu;
        if alpha.is_finite() {
            (alpha, AlphaClass::Finite)
        } else {
            // Zero curvature with strict descent: unbounded to second order.
            (f64::INFINITY, AlphaClass::Infinite)
        }
    }
}

/// Evaluate the directional stability threshold of a loss at `theta` along
/// update direction `u` (the step is theta + alpha * u).
pub fn alpha_max<O: Objective>(
    obj: &O,
    theta: &ParameterStore,
    u: &[f64],
    mode: HvpMode,
    step: usize,
) -> Result<AlphaMaxRecord> {
    if u.len() != theta.dim() {
        return Err(Error::Dimension(format!(
            "direction length {} does not match parameter dimension {}",
            u.len(),
            theta.dim()
        )));
    }
    if u.iter().any(|v| !v.is_finite()) || u.iter().all(|v| *v == 0.0) {
        return Err(Error::Parameter(
            "direction must be finite and nonzero".into(),
        ));
    }
    let invalid = |step: usize| AlphaMaxRecord {
        step,
        gdotu: f64::NAN,
        uhu: f64::NAN,
        alpha_max: f64::NAN,
        classification: AlphaClass::Finite,
        valid: false,
    };
    let (g, hv) = match mode {
        HvpMode::Exact => match hvp_exact(obj, theta, u) {
            Ok((_, g, hv)) => (g, hv),
            Err(Error::NonFinite(_)) => return Ok(invalid(step)),
            Err(e) => return Err(e),
        },
        HvpMode::Fd => {
            let g = match grad(obj, theta) {
                Ok((_, g)) => g,
                Err(Error::NonFinite(_)) => return Ok(invalid(step)),
                Err(e) => return Err(e),
            };
            let hv = match hvp_fd(obj, theta, u, HVP_FD_EPS) {
                Ok(hv) => hv,
                Err(Error::NonFinite(_)) => return Ok(invalid(step)),
                Err(e) => return Err(e),
            };
            (g, hv)
        }
    };
    let gdotu: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
    let uhu: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
    if !gdotu.is_finite() || !uhu.is_finite() {
        return Ok(invalid(step));
    }
    let (alpha, class) = classify_alpha(gdotu, uhu);
    Ok(AlphaMaxRecord {
        step,
        gdotu,
        uhu,
        alpha_max: alpha,
        classification: class,
        valid: true,
    })
}

/// For the steepest-descent direction u = -grad, the threshold dominates
/// 2 / ||H||_2. Returns (alpha_max, 2 / spectral_norm) with the Hessian
/// assembled column by column through exact products.
pub fn sgd_alpha_max_bound_check<O: Objective>(
    obj: &O,
    theta: &ParameterStore,
) -> Result<(f64, f64)> {
    let (_, g) = grad(obj, theta)?;
    let u: Vec<f64> = g.iter().map(|v| -v).collect();
    let record = alpha_max(obj, theta, &u, HvpMode::Exact, 0)?;
    let p = theta.dim();
    let mut hessian = Matrix::zeros(p, p);
    for i in 0..p {
        let mut e = vec![0.0; p];
        e[i] = 1.0;
        let (_, _, col) = hvp_exact(obj, theta, &e)?;
        for (j, v) in col.iter().enumerate() {
            hessian.set(j, i, *v);
        }
    }
    let eig = sym_eig(&hessian)?;
    let spec_norm = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((record.alpha_max, 2.0 / spec_norm))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub hvp_mode: HvpMode,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn toy(lr: f64, hvp_mode: HvpMode, seed: u64) -> Self {
        ProbeConfig {
            lr,
            hvp_mode,
            batch_size: 64,
            mask_rate: 0.3,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub records: Vec<AlphaMaxRecord>,
    pub training_lr: f64,
    pub hvp_mode: HvpMode,
    /// True when the corpus ran out of fresh batches and was reshuffled.
    pub cycled_corpus: bool,
}

impl ProbeReport {
    /// Median over the non-infinite valid records; None when every valid
    /// record is infinite (printed as an em dash in reports).
    pub fn median_alpha_max(&self) -> Option<f64> {
        let mut finite: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.valid && r.classification != AlphaClass::Infinite)
            .map(|r| r.alpha_max)
            .collect();
        if finite.is_empty() {
            return None;
        }
        finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = finite.len();
        Some(if n % 2 == 1 {
            finite[n / 2]
        } else {
            0.5 * (finite[n / 2 - 1] + finite[n / 2])
        })
    }

    /// Percentage of probe steps whose threshold exceeds the training rate.
    pub fn percent_stable(&self) -> f64 {
        let stable = self
            .records
            .iter()
            .filter(|r| r.valid && r.alpha_max > self.training_lr)
            .count();
        100.0 * stable as f64 / self.records.len() as f64
    }

    /// CSV with columns (step, gdotu, uHu, alpha_max, classification).
    pub fn to_csv(&self, meta: &RunMeta) -> String {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.step.to_string(),
                    fmt_g(r.gdotu),
                    fmt_g(r.uhu),
                    fmt_g(r.alpha_max),
                    if r.valid {
                        r.classification.tag().to_string()
                    } else {
                        "invalid".to_string()
                    },
                ]
            })
            .collect();
        csv_document(
            meta,
            &["step", "gdotu", "uHu", "alpha_max", "classification"],
            &rows,
        )
    }

    /// Summary JSON. The all-infinite case reports the em dash marker used
    /// in the tables.
    pub fn summary_json(&self, meta: &RunMeta) -> String {
        let median = match self.median_alpha_max() {
            Some(v) => serde_json::json!(v),
            None => serde_json::json!("—"),
        };
        let value = serde_json::json!({
            "median_alpha_max": median,
            "percent_stable": self.percent_stable(),
            "training_lr": self.training_lr,
            "hvp_mode": self.hvp_mode.tag(),
            "config_hash": format!("{:016x}", meta.config_hash),
            "seed": meta.seed,
        });
        serde_json::to_string_pretty(&value).expect("summary serializes")
    }
}

/// Deterministic batch supply: non-overlapping corpus windows in shuffled
/// order, reshuffled (and flagged) when exhausted.
struct BatchCycler<'a> {
    corpus: &'a [u8],
    seq_len: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
    cycled: bool,
}

impl<'a> BatchCycler<'a> {
    fn new(corpus: &'a [u8], seq_len: usize, mut rng: Rng) -> Result<Self> {
        if corpus.len() < seq_len {
            return Err(Error::Config(format!(
                "corpus has {} bytes, need at least {seq_len}",
                corpus.len()
            )));
        }
        let mut order: Vec<usize> = (0..corpus.len() / seq_len).map(|k| k * seq_len).collect();
        rng.shuffle(&mut order);
        Ok(BatchCycler {
            corpus,
            seq_len,
            order,
            pos: 0,
            rng,
            cycled: false,
        })
    }

    fn next_tokens(&mut self, batch: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
                self.cycled = true;
            }
            let start = self.order[self.pos];
            self.pos += 1;
            out.push(
                self.corpus[start..start + self.seq_len]
                    .iter()
                    .map(|&b| b as usize)
                    .collect(),
            );
        }
        out
    }
}

/// Run the stability probe on a model: five batches accumulate optimizer
/// statistics without stepping (the mean gradient and mean squared gradient
/// over clipped gradients), five optimizer steps warm up further with bias
/// correction continuing from step six, then twenty-five steps each record
/// the threshold along the actual update direction, weight decay included.
/// Gradients are clipped to the training norm before use.
pub fn probe(model: &mut Model, corpus: &[u8], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config("probe lr must be > 0".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut cycler = BatchCycler::new(
        corpus,
        model.cfg.max_seq_len,
        root.substream("probe-data"),
    )?;
    let mut mask_rng = root.substream("probe-mask");
    let mask_id = model.cfg.mask_id();

    let dim = model.params.dim();
    let mut state = AdamWState::new(dim);
    let hyper = AdamWHyper {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWHyper::with_lr(cfg.lr)
    };

    let clipped_grad = |model: &Model, batch: &crate::harness::Batch| -> Result<Vec<f64>> {
        let obj = MaskedLmObjective { model, batch };
        let (_, g) = grad(&obj, &model.params)?;
        Ok(clip_grad_norm(&g, cfg.clip_norm))
    };

    // Warmup without stepping: moments become batch averages.
    for _ in 0..PROBE_WARMUP_BATCHES {
        let tokens = cycler.next_tokens(cfg.batch_size);
        let batch = mask_corrupt(&tokens, cfg.mask_rate, &mut mask_rng, mask_id)?;
        let g = clipped_grad(model, &batch)?;
        for k in 0..dim {
            state.m[k] += g[k] / PROBE_WARMUP_BATCHES as f64;
            state.v[k] += g[k] * g[k] / PROBE_WARMUP_BATCHES as f64;
        }
    }
    state.t = PROBE_WARMUP_BATCHES as u64; // bias correction continues at 6

    // Warmup steps.
    for _ in 0..PROBE_WARMUP_STEPS {
        let tokens = cycler.next_tokens(cfg.batch_size);
        let batch = mask_corrupt(&tokens, cfg.mask_rate, &mut mask_rng, mask_id)?;
        let g = clipped_grad(model, &batch)?;
        let preview = adamw_preview(model.params.flat(), &g, &state, &hyper)?;
        adamw_commit(&mut model.params, &mut state, &hyper, preview);
    }

    // Recorded steps.
    let mut records = Vec::with_capacity(PROBE_RECORD_STEPS);
    for step in 0..PROBE_RECORD_STEPS {
        let tokens = cycler.next_tokens(cfg.batch_size);
        let batch = mask_corrupt(&tokens, cfg.mask_rate, &mut mask_rng, mask_id)?;
        let obj = MaskedLmObjective {
            model: &*model,
            batch: &batch,
        };
        let (g_raw, grad_ok) = match grad(&obj, &model.params) {
            Ok((_, g)) => (g, true),
            Err(Error::NonFinite(_)) => (vec![0.0; dim], false),
            Err(e) => return Err(e),
        };
        if !grad_ok {
            records.push(AlphaMaxRecord {
                step,
                gdotu: f64::NAN,
                uhu: f64::NAN,
                alpha_max: f64::NAN,
                classification: AlphaClass::Finite,
                valid: false,
            });
            continue;
        }
        let g = clip_grad_norm(&g_raw, cfg.clip_norm);
        let preview = adamw_preview(model.params.flat(), &g, &state, &hyper)?;
        let u = preview.direction.clone();

        let gdotu: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        let uhu = match cfg.hvp_mode {
            HvpMode::Exact => match hvp_exact(&obj, &model.params, &u) {
                Ok((_, _, hv)) => Some(u.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>()),
                Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            },
            HvpMode::Fd => match hvp_fd(&obj, &model.params, &u, HVP_FD_EPS) {
                Ok(hv) => Some(u.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>()),
                Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            },
        };
        match uhu {
            Some(uhu) if uhu.is_finite() && gdotu.is_finite() => {
                let (alpha, class) = classify_alpha(gdotu, uhu);
                records.push(AlphaMaxRecord {
                    step,
                    gdotu,
                    uhu,
                    alpha_max: alpha,
                    classification: class,
                    valid: true,
                });
            }
            _ => records.push(AlphaMaxRecord {
                step,
                gdotu: f64::NAN,
                uhu: f64::NAN,
                alpha_max: f64::NAN,
                classification: AlphaClass::Finite,
                valid: false,
            }),
        }
        adamw_commit(&mut model.params, &mut state, &hyper, preview);
    }

    Ok(ProbeReport {
        records,
        training_lr: cfg.lr,
        hvp_mode: cfg.hvp_mode,
        cycled_corpus: cycler.cycled,
    })
}
