//! Command-line entry point: spectral checks, filtering demos, gradient
//! checks, training runs and sweeps, stability probes, and report emission.
//!
//! Exit codes: 0 all checks passed, 1 usage/config error, 2 i/o error,
//! 3 numerical check failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use consensus_core::attention::AttentionHyper;
use consensus_core::autodiff::{
    gradient_rel_err_by_slot, Binder, NodeId, Objective, ParameterStore, Real, Tape,
};
use consensus_core::consensus::{
    cross_consensus_tape, self_consensus_tape, BipartiteGraph, ConsensusHyper,
};
use consensus_core::error::Error;
use consensus_core::filter::{filter_iterate, non_oscillation_threshold, Signal};
use consensus_core::graph::{
    build_cycle_power, build_window_path, cycle_power_lambda1, fiedler_value, path_fiedler_bounds,
    Graph,
};
use consensus_core::harness::{
    build_model, load_checkpoint, lr_sweep, save_checkpoint, train, Checkpoint, ModelConfig,
    SweepConfig, TrainConfig,
};
use consensus_core::report::{csv_document, fmt_g, fnv1a_hash, RunMeta};
use consensus_core::rng::Rng;
use consensus_core::stability::{probe, HvpMode, ProbeConfig};
use consensus_core::tensor::Matrix;

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "consensus-lab", version, about = "Consensus mechanism laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (falls back to $CONSENSUS_LAB_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed stamped into every emitted artifact.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl OutputArgs {
    fn dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os("CONSENSUS_LAB_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out"))
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Algebraic-connectivity checks for cycle-power and window-path graphs.
    Spectral {
        /// Graph family: "cycle" or "path".
        #[arg(long)]
        family: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        w: usize,
        /// Check every (n', w') with n' <= n, w' < n'/2 instead of one pair.
        #[arg(long, default_value_t = false)]
        sweep: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Finite-difference gradient checks across every mechanism.
    Gradcheck {
        /// Negative control: perturb one gradient before comparison.
        #[arg(long, default_value_t = false, hide = true)]
        inject_bug: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Iterated low-pass filtering diagnostics on a graph family.
    Filter {
        #[arg(long)]
        family: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        w: usize,
        /// Step size as a fraction of the non-oscillation threshold.
        #[arg(long, default_value_t = 0.9)]
        eta_scale: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Train one model from a JSON config; writes a loss curve and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Learning-rate sweep from a JSON config; writes the sweep table and
    /// per-cell loss curves.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also write a terminal checkpoint per cell.
        #[arg(long, default_value_t = false)]
        save_checkpoints: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Stability probe on a checkpoint: 25 recorded steps after warmup.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model config JSON matching the checkpoint.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lr: f64,
        /// Curvature estimator: "exact" or "fd".
        #[arg(long, default_value = "exact")]
        hvp: String,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.3)]
        mask_rate: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Regenerate the theory-to-code coverage table.
    Docs {
        /// Directory holding theory-to-code.md (default: ./docs).
        #[arg(long, default_value = "docs")]
        dir: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code_for(&e));
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 2,
        Error::Parameter(_) | Error::Config(_) | Error::Format(_) | Error::Dimension(_) => 1,
        _ => 3,
    }
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> consensus_core::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> consensus_core::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> consensus_core::Result<i32> {
    match cli.command {
        Command::Spectral {
            family,
            n,
            w,
            sweep,
            output,
        } => cmd_spectral(&family, n, w, sweep, &output),
        Command::Gradcheck { inject_bug, output } => cmd_gradcheck(inject_bug, &output),
        Command::Filter {
            family,
            n,
            w,
            eta_scale,
            steps,
            output,
        } => cmd_filter(&family, n, w, eta_scale, steps, &output),
        Command::Train {
            config,
            corpus,
            output,
        } => cmd_train(&config, &corpus, &output),
        Command::Sweep {
            config,
            corpus,
            save_checkpoints,
            output,
        } => cmd_sweep(&config, &corpus, save_checkpoints, &output),
        Command::Probe {
            checkpoint,
            config,
            corpus,
            lr,
            hvp,
            batch_size,
            mask_rate,
            output,
        } => cmd_probe(
            &checkpoint,
            &config,
            &corpus,
            lr,
            &hvp,
            batch_size,
            mask_rate,
            &output,
        ),
        Command::Docs { dir } => {
            let rendered = consensus_core::docs::generate_traceability_table();
            let path = write_artifact(&dir, "theory-to-code.md", &rendered)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}

fn build_family(family: &str, n: usize, w: usize) -> consensus_core::Result<Graph> {
    match family {
        "cycle" => build_cycle_power(n, w),
        "path" => build_window_path(n, w),
        other => Err(Error::Parameter(format!(
            "unknown family {other:?}; expected \"cycle\" or \"path\""
        ))),
    }
}

fn spectral_row(family: &str, n: usize, w: usize) -> consensus_core::Result<(Vec<String>, bool)> {
    let tol = 1e-9;
    match family {
        "cycle" => {
            let closed = cycle_power_lambda1(n, w)?;
            let brute = fiedler_value(&build_cycle_power(n, w)?)?;
            let ok = (closed - brute).abs() <= tol;
            Ok((
                vec![
                    family.into(),
                    n.to_string(),
                    w.to_string(),
                    fmt_g(closed),
                    fmt_g(brute),
                    String::new(),
                    String::new(),
                    ok.to_string(),
                ],
                ok,
            ))
        }
        "path" => {
            let bounds = path_fiedler_bounds(n, w)?;
            let brute = fiedler_value(&build_window_path(n, w)?)?;
            let ok = bounds.lower - tol <= brute && brute <= bounds.upper + tol;
            Ok((
                vec![
                    family.into(),
                    n.to_string(),
                    w.to_string(),
                    String::new(),
                    fmt_g(brute),
                    fmt_g(bounds.lower),
                    fmt_g(bounds.upper),
                    ok.to_string(),
                ],
                ok,
            ))
        }
        other => Err(Error::Parameter(format!("unknown family {other:?}"))),
    }
}

fn cmd_spectral(
    family: &str,
    n: usize,
    w: usize,
    sweep: bool,
    output: &OutputArgs,
) -> consensus_core::Result<i32> {
    let mut rows = vec![];
    let mut all_ok = true;
    if sweep {
        for nn in 3..=n {
            for ww in 1..nn {
                if 2 * ww >= nn {
                    break;
                }
                let (row, ok) = spectral_row(family, nn, ww)?;
                all_ok &= ok;
                rows.push(row);
            }
        }
        if rows.is_empty() {
            return Err(Error::Parameter(format!(
                "sweep up to n={n} produced no valid (n, w) pairs"
            )));
        }
    } else {
        let (row, ok) = spectral_row(family, n, w)?;
        all_ok &= ok;
        rows.push(row);
    }
    let meta = RunMeta {
        config_hash: fnv1a_hash(format!("spectral:{family}:{n}:{w}:{sweep}").as_bytes()),
        seed: output.seed,
    };
    let csv = csv_document(
        &meta,
        &[
            "family",
            "n",
            "w",
            "lambda1_closed_form",
            "fiedler_bruteforce",
            "lower_bound",
            "upper_bound",
            "within_bounds",
        ],
        &rows,
    );
    let path = write_artifact(&output.dir(), "spectral.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(if all_ok { 0 } else { 3 })
}

fn cmd_filter(
    family: &str,
    n: usize,
    w: usize,
    eta_scale: f64,
    steps: usize,
    output: &OutputArgs,
) -> consensus_core::Result<i32> {
    if !(eta_scale > 0.0) {
        return Err(Error::Parameter("eta-scale must be > 0".into()));
    }
    let graph = build_family(family, n, w)?;
    let mut rng = Rng::new(output.seed).substream("filter-signal");
    let vals: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let signal = Signal::scalar(&vals);
    let eta = eta_scale * non_oscillation_threshold(&graph)?;
    let report = filter_iterate(&graph, &signal, eta, steps)?;
    let meta = RunMeta {
        config_hash: fnv1a_hash(
            format!("filter:{family}:{n}:{w}:{eta_scale}:{steps}").as_bytes(),
        ),
        seed: output.seed,
    };
    let csv = format!("{}{}", meta.comment_header(), report.to_csv());
    let path = write_artifact(&output.dir(), "filter.csv", &csv)?;
    println!(
        "wrote {} (oscillatory: {}, rate bound {})",
        path.display(),
        report.oscillatory,
        fmt_g(report.rate_bound)
    );
    Ok(0)
}

/// Weighted-output scalar loss over a mechanism forward, for gradient checks.
struct MechanismLoss {
    kind: &'static str,
    y: Matrix,
    c: Option<Matrix>,
    heads: usize,
}

impl MechanismLoss {
    fn consensus_hyper(&self) -> ConsensusHyper {
        ConsensusHyper {
            dim: self.y.cols(),
            heads: self.heads,
            rank: 2,
            edge_hidden: 4,
            eta: 0.1,
            rope_base: Some(100.0),
        }
    }

    fn attention_hyper(&self, window: Option<usize>) -> AttentionHyper {
        AttentionHyper {
            dim: self.y.cols(),
            heads: self.heads,
            rope_base: Some(100.0),
            window,
        }
    }
}

impl Objective for MechanismLoss {
    fn loss<S: Real>(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder<'_, S>,
    ) -> consensus_core::Result<NodeId> {
        let n = self.y.rows();
        let y = tape.constant(n, self.y.cols(), self.y.data());
        let graph = build_window_path(n, 2)?;
        let out = match self.kind {
            "self_consensus" | "multi_head_self_consensus" => {
                self_consensus_tape(tape, binder, "m", &self.consensus_hyper(), &graph, y)?.0
            }
            "cross_consensus" | "multi_head_cross_consensus" => {
                let c = self.c.as_ref().expect("cross variants carry context");
                let c_node = tape.constant(c.rows(), c.cols(), c.data());
                let bip = BipartiteGraph::windowed(n, 1);
                cross_consensus_tape(tape, binder, "m", &self.consensus_hyper(), &bip, y, c_node)?.0
            }
            "self_attention" => {
                consensus_core::attention::dense_attention_tape(
                    tape,
                    binder,
                    "m",
                    &self.attention_hyper(None),
                    y,
                    y,
                )?
                .0
            }
            "sliding_window" => consensus_core::attention::sliding_window_tape(
                tape,
                binder,
                "m",
                &self.attention_hyper(Some(2)),
                y,
            )?,
            "cross_attention" => {
                let c = self.c.as_ref().expect("cross variants carry context");
                let c_node = tape.constant(c.rows(), c.cols(), c.data());
                consensus_core::attention::dense_attention_tape(
                    tape,
                    binder,
                    "m",
                    &self.attention_hyper(None),
                    y,
                    c_node,
                )?
                .0
            }
            other => return Err(Error::Config(format!("unknown mechanism {other}"))),
        };
        let (r, c) = tape.shape(out);
        let mut probe_rng = Rng::new(99).substream(self.kind);
        let mut weights = vec![0.0; r * c];
        probe_rng.fill_uniform(&mut weights, 1.0);
        let probe = tape.constant(r, c, &weights);
        Ok(tape.dot(out, probe))
    }
}

fn gradcheck_store(kind: &'static str, heads: usize, seed: u64) -> (MechanismLoss, ParameterStore) {
    let mut rng = Rng::new(seed).substream(kind);
    let d = 8;
    let n = 5;
    let fill = |r: usize, c: usize, rng: &mut Rng| {
        let mut m = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                m.set(i, j, rng.uniform(-1.0, 1.0));
            }
        }
        m
    };
    let y = fill(n, d, &mut rng);
    let cross = kind.contains("cross");
    let c = if cross { Some(fill(n, d, &mut rng)) } else { None };
    let obj = MechanismLoss { kind, y, c, heads };
    let mut store = ParameterStore::new();
    if kind.contains("consensus") {
        consensus_core::consensus::init_consensus_slots(
            &mut store,
            "m",
            &obj.consensus_hyper(),
            cross,
            &mut rng,
        )
        .expect("slot init");
    } else {
        let window = if kind == "sliding_window" { Some(2) } else { None };
        consensus_core::attention::init_attention_slots(
            &mut store,
            "m",
            &obj.attention_hyper(window),
            &mut rng,
        )
        .expect("slot init");
    }
    (obj, store)
}

fn cmd_gradcheck(inject_bug: bool, output: &OutputArgs) -> consensus_core::Result<i32> {
    let cases: [(&'static str, usize); 7] = [
        ("self_consensus", 1),
        ("multi_head_self_consensus", 2),
        ("cross_consensus", 1),
        ("multi_head_cross_consensus", 2),
        ("self_attention", 2),
        ("sliding_window", 2),
        ("cross_attention", 2),
    ];
    let mut rows = vec![];
    let mut failures = 0usize;
    for (i, (kind, heads)) in cases.iter().enumerate() {
        let (obj, store) = gradcheck_store(kind, *heads, output.seed);
        let mut by_slot = gradient_rel_err_by_slot(&obj, &store)?;
        if inject_bug && i == 0 {
            // Negative control: report a poisoned error on the first block.
            if let Some(first) = by_slot.first_mut() {
                first.1 += 1.0;
            }
        }
        for (slot, err) in by_slot {
            if err > GRADCHECK_TOLERANCE {
                failures += 1;
            }
            rows.push(vec![kind.to_string(), slot, fmt_g(err)]);
        }
    }
    let meta = RunMeta {
        config_hash: fnv1a_hash(format!("gradcheck:{inject_bug}").as_bytes()),
        seed: output.seed,
    };
    let csv = csv_document(&meta, &["mechanism", "parameter_block", "max_rel_err"], &rows);
    let path = write_artifact(&output.dir(), "gradcheck.csv", &csv)?;
    println!(
        "wrote {} ({} blocks, {} over tolerance {GRADCHECK_TOLERANCE:e})",
        path.display(),
        rows.len(),
        failures
    );
    Ok(if failures == 0 { 0 } else { 3 })
}

fn cmd_train(
    config: &Path,
    corpus_path: &Path,
    output: &OutputArgs,
) -> consensus_core::Result<i32> {
    let mut cfg: TrainConfig = read_json_config(config)?;
    cfg.seed = output.seed;
    let corpus = std::fs::read(corpus_path)?;
    let record = train(&cfg, &corpus)?;
    let meta = RunMeta {
        config_hash: cfg.model.hash(),
        seed: cfg.seed,
    };
    let dir = output.dir();
    let curve = record.loss_curve_csv(&meta);
    let curve_path = write_artifact(&dir, "loss_curve.csv", &curve)?;
    let ckpt = Checkpoint::from_store(
        cfg.model.hash(),
        record.losses.len() as u64,
        &record.final_params,
    );
    std::fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    println!(
        "wrote {} and {} (terminal loss {}, diverged: {})",
        curve_path.display(),
        ckpt_path.display(),
        fmt_g(record.terminal_loss),
        record.diverged()
    );
    Ok(0)
}

fn cmd_sweep(
    config: &Path,
    corpus_path: &Path,
    save_checkpoints: bool,
    output: &OutputArgs,
) -> consensus_core::Result<i32> {
    let mut cfg: SweepConfig = read_json_config(config)?;
    cfg.seed = output.seed;
    let corpus = std::fs::read(corpus_path)?;
    let table = lr_sweep(&cfg, &corpus)?;
    let meta = RunMeta {
        config_hash: fnv1a_hash(
            serde_json::to_string(&cfg)
                .map_err(|e| Error::Config(e.to_string()))?
                .as_bytes(),
        ),
        seed: cfg.seed,
    };
    let dir = output.dir();
    let path = write_artifact(&dir, "sweep.csv", &table.to_csv(&meta))?;
    for warning in &table.warnings {
        eprintln!("warning: {warning}");
    }
    for cell in &table.cells {
        let rows: Vec<Vec<String>> = cell
            .losses
            .iter()
            .enumerate()
            .map(|(s, l)| vec![s.to_string(), fmt_g(*l)])
            .collect();
        let curve = csv_document(&meta, &["step", "loss"], &rows);
        write_artifact(
            &dir,
            &format!("loss_{}_{}.csv", cell.mechanism, fmt_g(cell.lr)),
            &curve,
        )?;
    }
    if save_checkpoints {
        for cell in &table.cells {
            let mut train_cfg = TrainConfig {
                model: cfg.model.clone(),
                lr: cell.lr,
                steps: cfg.steps,
                batch_size: cfg.batch_size,
                mask_rate: cfg.mask_rate,
                weight_decay: cfg.weight_decay,
                clip_norm: cfg.clip_norm,
                seed: cfg.seed,
            };
            train_cfg.model.layout =
                consensus_core::harness::LayoutSpec::Named(cell.mechanism.clone());
            let record = train(&train_cfg, &corpus)?;
            let ckpt = Checkpoint::from_store(
                train_cfg.model.hash(),
                record.losses.len() as u64,
                &record.final_params,
            );
            save_checkpoint(
                &dir.join(format!("ckpt_{}_{}.ckpt", cell.mechanism, fmt_g(cell.lr))),
                &ckpt,
            )?;
        }
    }
    println!("wrote {} ({} cells)", path.display(), table.cells.len());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    checkpoint: &Path,
    config: &Path,
    corpus_path: &Path,
    lr: f64,
    hvp: &str,
    batch_size: usize,
    mask_rate: f64,
    output: &OutputArgs,
) -> consensus_core::Result<i32> {
    let model_cfg: ModelConfig = read_json_config(config)?;
    let hvp_mode = match hvp {
        "exact" => HvpMode::Exact,
        "fd" => HvpMode::Fd,
        other => {
            return Err(Error::Parameter(format!(
                "unknown hvp mode {other:?}; expected \"exact\" or \"fd\""
            )))
        }
    };
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.config_hash != model_cfg.hash() {
        return Err(Error::Config(format!(
            "checkpoint config hash {:016x} does not match config {:016x}",
            ckpt.config_hash,
            model_cfg.hash()
        )));
    }
    let mut model = build_model(&model_cfg, &mut Rng::new(output.seed))?;
    ckpt.apply_to(&mut model.params)?;
    let corpus = std::fs::read(corpus_path)?;
    let pcfg = ProbeConfig {
        lr,
        hvp_mode,
        batch_size,
        mask_rate,
        weight_decay: 1e-2,
        clip_norm: 1.0,
        seed: output.seed,
    };
    let report = probe(&mut model, &corpus, &pcfg)?;
    let meta = RunMeta {
        config_hash: model_cfg.hash(),
        seed: output.seed,
    };
    let dir = output.dir();
    let csv_path = write_artifact(&dir, "probe.csv", &report.to_csv(&meta))?;
    let json_path = write_artifact(&dir, "summary.json", &report.summary_json(&meta))?;
    println!(
        "wrote {} and {} (percent stable {})",
        csv_path.display(),
        json_path.display(),
        fmt_g(report.percent_stable())
    );
    Ok(0)
}

