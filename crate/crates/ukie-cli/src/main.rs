//! Experiment runner: `train`, `eval`, `sweep`, `simulate`, `report`.
//!
//! Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 missing artifact.

use clap::{Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use ukie_core::channel::ChannelConfig;
use ukie_core::config::{load_config, ExperimentConfig, SweepKind};
use ukie_core::data::{load_dataset, LabeledDataset, Split};
use ukie_core::error::UkieError;
use ukie_core::eval::{
    build_memory_from_dataset, evaluate_link, sweep_bottleneck, sweep_coefficients,
    sweep_invariant_split, write_report_csv, CoefficientCell, EvalRow, TraceRow, EVAL_CSV_HEADER,
    TRACE_CSV_HEADER,
};
use ukie_core::memory::run_network_sim;
use ukie_core::models::{load_checkpoint, ModelSet};
use ukie_core::plot::{write_line_chart, Series};
use ukie_core::rng::derive_seed;
use ukie_core::training::{train, CSV_HEADER};

#[derive(Parser)]
#[command(name = "ukie", about = "knowledge-aided semantic communication link simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Budget {
    /// Tiny settings for fast plumbing checks.
    Smoke,
    /// The configured settings (default).
    Desk,
    /// The configured settings with dataset limits removed.
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics + checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Budget::Desk)]
        budget: Budget,
    },
    /// Evaluate a checkpoint over the configured SNR grid.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an ablation sweep (bottleneck, invariant split or coefficients).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Budget::Desk)]
        budget: Budget,
        /// Overrides [sweep].kind from the config.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Run the multi-user sparse knowledge-update protocol simulation.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/simulate")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate the CSVs of an output directory and regenerate plots.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    ukie_core::tune_allocator();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, out, seed, budget } => cmd_train(&config, &out, seed, budget),
        Cmd::Eval { config, checkpoint, out, seed } => cmd_eval(&config, &checkpoint, &out, seed),
        Cmd::Sweep { config, out, seed, budget, kind } => {
            cmd_sweep(&config, &out, seed, budget, kind.as_deref())
        }
        Cmd::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Cmd::Report { out } => cmd_report(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &UkieError) -> u8 {
    match e {
        UkieError::Config(_) | UkieError::Shape(_) => 2,
        UkieError::Numeric(_) => 3,
        UkieError::Ingestion { .. }
        | UkieError::MissingArtifact(_)
        | UkieError::ColdStart(_)
        | UkieError::Io(_) => 4,
    }
}

type Result<T> = std::result::Result<T, UkieError>;

fn load_effective_config(
    path: &Path,
    seed: Option<u64>,
    budget: Option<Budget>,
) -> Result<ExperimentConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    match budget {
        Some(Budget::Smoke) => {
            cfg.train.rounds = 1;
            cfg.train.gen_iters = cfg.train.gen_iters.min(8);
            cfg.train.mid_iters = cfg.train.mid_iters.min(8);
            cfg.train.probe_size = cfg.train.probe_size.min(128);
            cfg.dataset.train_limit = Some(cfg.dataset.train_limit.unwrap_or(512).min(512));
            cfg.dataset.test_limit = Some(cfg.dataset.test_limit.unwrap_or(256).min(256));
            cfg.sweep.budget.train_samples = cfg.sweep.budget.train_samples.min(512);
            cfg.sweep.budget.test_samples = cfg.sweep.budget.test_samples.min(256);
            cfg.sweep.budget.rounds = 1;
            cfg.sweep.budget.gen_iters = cfg.sweep.budget.gen_iters.min(8);
            cfg.sweep.budget.mid_iters = cfg.sweep.budget.mid_iters.min(8);
        }
        Some(Budget::Full) => {
            cfg.dataset.train_limit = None;
            cfg.dataset.test_limit = None;
        }
        Some(Budget::Desk) | None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let root = cfg.dataset.resolved_root();
    let synth = cfg.dataset.synthetic.clone();
    let mut train_ds = load_dataset(&cfg.dataset.name, Split::Train, &root, synth.as_ref())?;
    let mut test_ds = load_dataset(&cfg.dataset.name, Split::Test, &root, synth.as_ref())?;
    if let Some(n) = cfg.dataset.train_limit {
        train_ds = train_ds.take(n);
    }
    if let Some(n) = cfg.dataset.test_limit {
        test_ds = test_ds.take(n);
    }
    Ok((train_ds, test_ds))
}

fn build_model(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<ModelSet> {
    let (c, h, w) = ds.shape();
    let m = cfg.channel_config().num_symbols(c * h * w)?;
    ModelSet::build(
        cfg.model.arch_config(),
        cfg.model.layout()?,
        (c, h, w),
        ds.num_classes,
        m,
        cfg.seed(),
    )
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_run_preamble(out: &Path, cfg: &ExperimentConfig, extra: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved_config.toml"), cfg.to_toml())?;
    let mut m = String::new();
    let _ = writeln!(m, "config_hash={:016x}", cfg.hash());
    let _ = writeln!(m, "seed={}", cfg.seed());
    let _ = writeln!(m, "git={}", git_describe());
    let _ = writeln!(
        m,
        "created_unix={}",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    );
    for (k, v) in extra {
        let _ = writeln!(m, "{k}={v}");
    }
    std::fs::write(out.join("manifest.txt"), m)?;
    Ok(())
}

fn budget_note(cfg: &ExperimentConfig) -> String {
    format!(
        "dataset={} train_limit={:?} test_limit={:?} seed={}\n{}",
        cfg.dataset.name,
        cfg.dataset.train_limit,
        cfg.dataset.test_limit,
        cfg.seed(),
        cfg.sweep.budget.describe()
    )
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, budget: Budget) -> Result<()> {
    let started = std::time::Instant::now();
    let cfg = load_effective_config(config, seed, Some(budget))?;
    let (train_ds, test_ds) = load_splits(&cfg)?;
    let mut model = build_model(&cfg, &train_ds)?;
    let tcfg = cfg.train_config();
    write_run_preamble(out, &cfg, &[("command", "train".into())])?;
    let outcome = train(&mut model, &train_ds, &test_ds, &tcfg, Some(out))?;

    let mut csv = String::new();
    let _ = writeln!(csv, "{CSV_HEADER}");
    for row in &outcome.metrics {
        let _ = writeln!(csv, "{}", row.to_csv());
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    // record elapsed time in the manifest, not the metric log
    let mut manifest = std::fs::read_to_string(out.join("manifest.txt"))?;
    let _ = writeln!(manifest, "wall_time_s={:.1}", started.elapsed().as_secs_f64());
    std::fs::write(out.join("manifest.txt"), manifest)?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "train done: {} rounds, {} generator / {} discriminator steps, probe psnr {:.2} dB, probe acc {:.4}",
            tcfg.rounds, outcome.gen_steps, outcome.mid_steps, last.probe_psnr, last.probe_acc
        );
    }
    println!("metrics: {}", out.join("metrics.csv").display());
    println!("checkpoint: {}", out.join("checkpoint").display());
    Ok(())
}

fn check_checkpoint_matches(cfg: &ExperimentConfig, model: &ModelSet, ds: &LabeledDataset) -> Result<()> {
    let layout = cfg.model.layout()?;
    if model.layout != layout {
        return Err(UkieError::Config(format!(
            "checkpoint layout ({} total / {} invariant) does not match config ({} / {})",
            model.layout.total_channels,
            model.layout.invariant_channels,
            layout.total_channels,
            layout.invariant_channels
        )));
    }
    let (c, h, w) = ds.shape();
    if model.input_shape != (c, h, w) {
        return Err(UkieError::Config(format!(
            "checkpoint input shape {:?} does not match dataset {:?}",
            model.input_shape,
            (c, h, w)
        )));
    }
    let m = cfg.channel_config().num_symbols(c * h * w)?;
    if model.m_symbols != m {
        return Err(UkieError::Config(format!(
            "checkpoint was built for {} channel symbols, config asks for {m}",
            model.m_symbols
        )));
    }
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_effective_config(config, seed, None)?;
    let (train_ds, test_ds) = load_splits(&cfg)?;
    let (model, step) = load_checkpoint(checkpoint)?;
    check_checkpoint_matches(&cfg, &model, &test_ds)?;
    write_run_preamble(
        out,
        &cfg,
        &[("command", "eval".into()), ("checkpoint_step", step.to_string())],
    )?;

    let memory = build_memory_from_dataset(&model, &train_ds, cfg.eval.memory_samples)?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for (i, &snr) in cfg.eval.snr_grid.iter().enumerate() {
        let ch = ChannelConfig {
            kind: cfg.channel.kind,
            snr_db: snr,
            seed: derive_seed(cfg.seed(), "eval-snr", i as u64),
            compression_ratio: cfg.channel.compression_ratio,
        };
        let mut trace: Option<Vec<TraceRow>> = cfg.eval.trace.then(Vec::new);
        let row = evaluate_link(&model, &memory, &test_ds, &ch, trace.as_mut())?;
        if let Some(tr) = trace {
            let mut t = String::new();
            let _ = writeln!(t, "{TRACE_CSV_HEADER}");
            for r in &tr {
                let _ = writeln!(t, "{}", r.to_csv());
            }
            std::fs::write(out.join(format!("channel_trace_snr{snr:.0}.csv")), t)?;
        }
        println!(
            "eval snr {snr:>5.1} dB ({}): psnr {:.2} dB, acc {:.4}",
            row.channel_kind, row.psnr_db, row.accuracy
        );
        rows.push(row);
    }
    write_report_csv(&out.join("report.csv"), &budget_note(&cfg), &rows)?;
    plot_vs_snr(out, &rows)?;
    println!("report: {}", out.join("report.csv").display());
    Ok(())
}

fn plot_vs_snr(out: &Path, rows: &[EvalRow]) -> Result<()> {
    let acc: Vec<(f64, f64)> = rows.iter().map(|r| (r.snr_db, r.accuracy)).collect();
    let psnr: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.psnr_db.is_finite())
        .map(|r| (r.snr_db, r.psnr_db))
        .collect();
    let kind = rows.first().map(|r| r.channel_kind.clone()).unwrap_or_default();
    write_line_chart(
        &out.join("accuracy_vs_snr.svg"),
        "test accuracy vs SNR",
        "snr_db",
        "accuracy",
        &[Series { label: kind.clone(), points: acc }],
    )?;
    write_line_chart(
        &out.join("psnr_vs_snr.svg"),
        "reconstruction PSNR vs SNR",
        "snr_db",
        "psnr_db",
        &[Series { label: kind, points: psnr }],
    )?;
    Ok(())
}

fn plot_vs_ratio(out: &Path, rows: &[EvalRow], xlabel: &str) -> Result<()> {
    let acc: Vec<(f64, f64)> = rows.iter().map(|r| (r.compression_ratio, r.accuracy)).collect();
    let psnr: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.psnr_db.is_finite())
        .map(|r| (r.compression_ratio, r.psnr_db))
        .collect();
    write_line_chart(
        &out.join("accuracy_vs_ratio.svg"),
        "test accuracy vs compression ratio",
        xlabel,
        "accuracy",
        &[Series { label: "accuracy".into(), points: acc }],
    )?;
    write_line_chart(
        &out.join("psnr_vs_ratio.svg"),
        "reconstruction PSNR vs compression ratio",
        xlabel,
        "psnr_db",
        &[Series { label: "psnr".into(), points: psnr }],
    )?;
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    budget: Budget,
    kind_flag: Option<&str>,
) -> Result<()> {
    let cfg = load_effective_config(config, seed, Some(budget))?;
    let kind = match kind_flag {
        None => cfg.sweep.kind,
        Some("bottleneck") => SweepKind::Bottleneck,
        Some("invariant_split") => SweepKind::InvariantSplit,
        Some("coefficients") => SweepKind::Coefficients,
        Some(other) => {
            return Err(UkieError::Config(format!(
                "unknown sweep kind '{other}' (bottleneck|invariant_split|coefficients)"
            )))
        }
    };
    let (train_ds, test_ds) = load_splits(&cfg)?;
    write_run_preamble(out, &cfg, &[("command", format!("sweep:{kind:?}"))])?;
    let arch = cfg.model.arch_config();
    let tcfg = cfg.train_config();
    let channel = cfg.channel_config();
    let rows = match kind {
        SweepKind::Bottleneck => sweep_bottleneck(
            &cfg.sweep.values,
            arch,
            &train_ds,
            &test_ds,
            &cfg.sweep.budget,
            &tcfg,
            &channel,
            cfg.seed(),
        )?,
        SweepKind::InvariantSplit => sweep_invariant_split(
            cfg.sweep.c_total,
            &cfg.sweep.values,
            arch,
            &train_ds,
            &test_ds,
            &cfg.sweep.budget,
            &tcfg,
            &channel,
            cfg.seed(),
        )?,
        SweepKind::Coefficients => {
            let base = cfg.weights.unwrap_or_default();
            let mut grid = Vec::new();
            for &g in &cfg.sweep.alpha_gtc {
                grid.push(CoefficientCell {
                    alpha_gtc: g,
                    alpha_iv: base.alpha_iv,
                    alpha_v: base.alpha_v,
                    alpha_rec: base.alpha_rec,
                });
            }
            for &iv in &cfg.sweep.alpha_iv {
                grid.push(CoefficientCell {
                    alpha_gtc: base.alpha_gtc,
                    alpha_iv: iv,
                    alpha_v: base.alpha_v,
                    alpha_rec: base.alpha_rec,
                });
            }
            sweep_coefficients(
                &grid,
                arch,
                cfg.model.layout()?,
                &train_ds,
                &test_ds,
                &cfg.sweep.budget,
                &tcfg,
                &channel,
                cfg.seed(),
            )?
        }
    };
    for r in &rows {
        println!(
            "sweep cell ratio {:>8.3}: psnr {:.2} dB, acc {:.4}",
            r.compression_ratio, r.psnr_db, r.accuracy
        );
    }
    write_report_csv(&out.join("report.csv"), &budget_note(&cfg), &rows)?;
    plot_vs_ratio(out, &rows, "source_dims / variant_dims")?;
    println!("report: {}", out.join("report.csv").display());
    Ok(())
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_effective_config(config, seed, None)?;
    write_run_preamble(out, &cfg, &[("command", "simulate".into())])?;
    let res = run_network_sim(&cfg.protocol, cfg.seed())?;

    let mut events = String::new();
    let _ = writeln!(events, "step,user,event,delta_norm,cumulative_scalars");
    for e in &res.events {
        let _ = writeln!(
            events,
            "{},{},{},{:.6},{}",
            e.step,
            e.user,
            e.event.as_str(),
            e.delta_norm,
            e.cumulative_scalars
        );
    }
    std::fs::write(out.join("protocol_events.csv"), events)?;

    let mut div = String::new();
    let _ = writeln!(div, "step,max_pairwise_distance");
    for (i, d) in res.divergence.iter().enumerate() {
        let _ = writeln!(div, "{},{:.6}", i + 1, d);
    }
    std::fs::write(out.join("divergence.csv"), div)?;

    for u in 0..cfg.protocol.users {
        println!(
            "user {u}: {} broadcasts, {} suppressed, {} scalars transmitted",
            res.ledger.broadcasts_sent[u],
            res.ledger.broadcasts_suppressed[u],
            res.ledger.scalars_transmitted[u]
        );
    }
    println!("events: {}", out.join("protocol_events.csv").display());
    Ok(())
}

fn cmd_report(out: &Path) -> Result<()> {
    let entries: Vec<PathBuf> = std::fs::read_dir(out)
        .map_err(|_| UkieError::MissingArtifact(format!("{} is not a readable directory", out.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .filter(|p| p.file_name().map(|n| n != "summary.csv").unwrap_or(true))
        .collect();
    let mut files = entries;
    files.sort();
    if files.is_empty() {
        return Err(UkieError::MissingArtifact(format!(
            "no CSV artifacts under {}",
            out.display()
        )));
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "file,rows,best_psnr_db,best_accuracy");
    let mut total_rows = 0usize;
    for f in &files {
        let text = std::fs::read_to_string(f)?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().unwrap_or("");
        let rows: Vec<&str> = lines.collect();
        total_rows += rows.len();
        let (mut best_psnr, mut best_acc) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        if header == EVAL_CSV_HEADER {
            for r in &rows {
                let cols: Vec<&str> = r.split(',').collect();
                if cols.len() >= 6 {
                    if let Ok(p) = cols[3].parse::<f64>() {
                        best_psnr = best_psnr.max(p);
                    }
                    if let Ok(a) = cols[5].parse::<f64>() {
                        best_acc = best_acc.max(a);
                    }
                }
            }
            // regenerate charts for evaluation reports
            let parsed: Vec<EvalRow> = rows
                .iter()
                .filter_map(|r| {
                    let c: Vec<&str> = r.split(',').collect();
                    Some(EvalRow {
                        compression_ratio: c.first()?.parse().ok()?,
                        snr_db: c.get(1)?.parse().ok()?,
                        channel_kind: c.get(2)?.to_string(),
                        psnr_db: c.get(3)?.parse().ok()?,
                        mse: c.get(4)?.parse().ok()?,
                        accuracy: c.get(5)?.parse().ok()?,
                        var_z: c.get(6)?.parse().ok()?,
                        var_zv: c.get(7)?.parse().ok()?,
                        mi_estimate: c.get(8)?.parse().ok()?,
                        comm_cost: c.get(9)?.parse().ok()?,
                    })
                })
                .collect();
            if parsed.len() > 1 {
                let distinct_snr = parsed
                    .iter()
                    .map(|r| r.snr_db.to_bits())
                    .collect::<std::collections::BTreeSet<_>>()
                    .len();
                if distinct_snr > 1 {
                    plot_vs_snr(out, &parsed)?;
                } else {
                    plot_vs_ratio(out, &parsed, "compression ratio")?;
                }
            }
        }
        let name = f.file_name().unwrap().to_string_lossy();
        let fmt = |v: f64| if v.is_finite() { format!("{v:.4}") } else { String::from("") };
        let _ = writeln!(summary, "{},{},{},{}", name, rows.len(), fmt(best_psnr), fmt(best_acc));
    }
    std::fs::write(out.join("summary.csv"), summary)?;
    println!("summarized {} csv files ({total_rows} rows) into {}", files.len(), out.join("summary.csv").display());
    Ok(())
}
