//! Config-driven front end: single trainings, the full ablation grid,
//! robust evaluation of checkpoints, gradient self-checks, and dataset
//! generation. Exit codes: 0 success, 1 validation, 2 runtime,
//! 3 check-failure.

use advmix_core::config::{ConfigError, ExperimentConfig};
use advmix_core::data::{self, Dataset};
use advmix_core::gradcheck;
use advmix_core::nn::{load_checkpoint, save_checkpoint};
use advmix_core::report::{self, CellStat, ReportTable, ROW_LABELS};
use advmix_core::train::{self, RunMetrics, TrainConfig, TrainSession};
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Parser)]
#[command(name = "advmix", version, about = "Adversarially optimized mixup training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one scheme and evaluate it against the configured attacks.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list; overrides train.seed.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Run the full 7-row ablation grid across seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Parallel grid cells.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a saved checkpoint against the configured attacks.
    AttackEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference self-check of every op and attack chain.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Self-test hook: corrupt the named op's analytic gradient.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Generate the configured dataset as CSV (and IDX for images).
    Datagen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Validation(String),
    Runtime(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Check(m) => write!(f, "check failure: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<train::TrainError> for CliError {
    fn from(e: train::TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Ablate {
            config,
            out,
            seed,
            threads,
        } => cmd_ablate(&config, &out, seed, threads),
        Command::AttackEval {
            config,
            checkpoint,
            out,
        } => cmd_attack_eval(&config, &checkpoint, out.as_deref()),
        Command::Gradcheck {
            seed,
            out,
            inject_fault,
        } => cmd_gradcheck(seed, out.as_deref(), inject_fault.as_deref()),
        Command::Datagen { config, out } => cmd_datagen(&config, &out),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.code());
        }
    }
}

fn seeds_for(cfg: &ExperimentConfig, flag: Option<Vec<u64>>) -> Vec<u64> {
    flag.unwrap_or_else(|| vec![cfg.train.seed])
}

/// One complete run: train, evaluate, write artifacts into `dir`.
fn run_one(
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    dir: &Path,
) -> Result<(TrainSession, RunMetrics), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved-config.toml"), cfg.resolved_toml(train_cfg.seed))?;
    let (mut session, mut metrics) = train::train(train_cfg, train_ds)?;
    if !cfg.eval.attacks.is_empty() {
        let (pristine, robust) =
            session.evaluate(test_ds, &cfg.eval.attacks, cfg.eval.batch_size, cfg.eval.seed)?;
        metrics.pristine_acc = Some(pristine);
        metrics.robust_acc = robust;
    }
    let mut jsonl = Vec::new();
    metrics
        .write_jsonl(&mut jsonl)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("metrics.jsonl"), jsonl)?;
    std::fs::write(dir.join("curves.csv"), report::curves_csv(&metrics))?;
    save_checkpoint(&dir.join("model.ckpt"), &session.graph, &session.model)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if train_ds.example_shape == [2] {
        let csv = report::decision_boundary_csv(&mut session, (-2.5, 3.5), (-2.5, 3.5), 64);
        std::fs::write(dir.join("boundary.csv"), csv)?;
    }
    Ok((session, metrics))
}

fn cmd_train(config: &Path, out: &Path, seed: Option<Vec<u64>>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config)?;
    let (train_ds, test_ds) = cfg.dataset.build()?;
    for s in seeds_for(&cfg, seed) {
        let dir = out.join(format!("seed_{s}"));
        let tc = cfg.to_train_config(s);
        let (_, metrics) = run_one(&cfg, &tc, &train_ds, &test_ds, &dir)?;
        let last = metrics.epochs.last();
        println!(
            "seed {s}: train_loss {:.4}, train_acc {:.4}, pristine {:?}",
            last.map_or(f64::NAN, |e| e.train_loss),
            last.map_or(f64::NAN, |e| e.train_acc),
            metrics.pristine_acc,
        );
    }
    Ok(())
}

fn cmd_ablate(
    config: &Path,
    out: &Path,
    seed: Option<Vec<u64>>,
    threads: usize,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config)?;
    let (train_ds, test_ds) = cfg.dataset.build()?;
    let seeds = seeds_for(&cfg, seed);
    std::fs::create_dir_all(out)?;

    struct Cell {
        row: usize,
        label: &'static str,
        seed: u64,
    }
    let cells: Vec<Cell> = ROW_LABELS
        .iter()
        .enumerate()
        .flat_map(|(row, &label)| seeds.iter().map(move |&seed| Cell { row, label, seed }))
        .collect();

    // (row, column) -> per-seed values; None marks a failed cell.
    type CellResult = (usize, u64, Option<(f64, BTreeMap<String, f64>)>);
    let queue: Mutex<Vec<Cell>> = Mutex::new(cells);
    let results: Mutex<Vec<CellResult>> = Mutex::new(Vec::new());

    let work = |queue: &Mutex<Vec<Cell>>, results: &Mutex<Vec<CellResult>>| loop {
        let Some(cell) = queue.lock().unwrap().pop() else {
            return;
        };
        let (scheme, ablations) = report::row_config(cell.label).unwrap();
        let mut tc = cfg.to_train_config(cell.seed);
        tc.scheme = scheme;
        tc.ablations = ablations;
        let outcome = (|| -> Result<(f64, BTreeMap<String, f64>), CliError> {
            let (mut session, _) = train::train(&tc, &train_ds)?;
            let (pristine, robust) =
                session.evaluate(&test_ds, &cfg.eval.attacks, cfg.eval.batch_size, cfg.eval.seed)?;
            Ok((pristine, robust))
        })();
        match outcome {
            Ok(v) => results.lock().unwrap().push((cell.row, cell.seed, Some(v))),
            Err(e) => {
                eprintln!("cell {} seed {} failed: {e}", cell.label, cell.seed);
                results.lock().unwrap().push((cell.row, cell.seed, None));
            }
        }
    };

    if threads <= 1 {
        work(&queue, &results);
    } else {
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| work(&queue, &results));
            }
        });
    }

    let attacker_names: Vec<String> = cfg.eval.attacks.iter().map(|a| a.name.clone()).collect();
    let mut table = ReportTable::new(&attacker_names);
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(row, seed, _)| (*row, *seed));
    for (row, &label) in ROW_LABELS.iter().enumerate() {
        let row_results: Vec<&CellResult> = results.iter().filter(|(r, _, _)| *r == row).collect();
        let mut cells: BTreeMap<String, Option<CellStat>> = BTreeMap::new();
        let any_failed = row_results.iter().any(|(_, _, v)| v.is_none());
        for col in std::iter::once("pristine").chain(attacker_names.iter().map(|s| s.as_str())) {
            if any_failed || row_results.is_empty() {
                cells.insert(col.to_string(), None);
                continue;
            }
            let values: Vec<f64> = row_results
                .iter()
                .filter_map(|(_, _, v)| v.as_ref())
                .map(|(pristine, robust)| {
                    if col == "pristine" {
                        *pristine
                    } else {
                        robust.get(col).copied().unwrap_or(f64::NAN)
                    }
                })
                .collect();
            cells.insert(col.to_string(), Some(CellStat::from_values(values)));
        }
        table.push_row(label, cells);
    }

    std::fs::write(out.join("report.csv"), table.to_csv())?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&table.to_json()).expect("json"),
    )?;
    std::fs::write(out.join("resolved-config.toml"), cfg.resolved_toml(cfg.train.seed))?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_attack_eval(config: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config)?;
    let (train_ds, test_ds) = cfg.dataset.build()?;
    let mut graph = advmix_core::tensor::Graph::new();
    let model = load_checkpoint(checkpoint, &mut graph).map_err(|e| CliError::Runtime(e.to_string()))?;
    let stats = if cfg.train.normalize && train_ds.is_image() {
        Some(data::compute_channel_stats(&train_ds).map_err(|e| CliError::Runtime(e.to_string()))?)
    } else {
        None
    };
    let mut session = TrainSession {
        graph,
        model,
        stats,
        declared_range: test_ds.declared_range,
    };
    let (pristine, robust) =
        session.evaluate(&test_ds, &cfg.eval.attacks, cfg.eval.batch_size, cfg.eval.seed)?;
    let json = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "pristine_acc": pristine,
        "robust_acc": robust,
    });
    let text = serde_json::to_string_pretty(&json).expect("json");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, out: Option<&Path>, fault: Option<&str>) -> Result<(), CliError> {
    let report = gradcheck::run_with_fault(seed, fault);
    for c in &report.checks {
        println!(
            "{:<14} instances {:>3}  max rel err {:.3e}  (tol {:.0e})  {}",
            c.op,
            c.instances,
            c.max_rel_err,
            c.tolerance,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report).expect("json"),
        )?;
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
        Err(CliError::Check(format!(
            "gradient check failed for: {}",
            names.join(", ")
        )))
    }
}

fn cmd_datagen(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::from_path(config)?;
    let (train_ds, test_ds) = cfg.dataset.build()?;
    std::fs::create_dir_all(out)?;
    for (name, ds) in [("train", &train_ds), ("test", &test_ds)] {
        let mut csv = Vec::new();
        data::to_csv(ds, &mut csv).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(out.join(format!("{name}.csv")), csv)?;
        if ds.is_image() {
            data::save_idx(
                ds,
                &out.join(format!("{name}-images-idx3-ubyte")),
                &out.join(format!("{name}-labels-idx1-ubyte")),
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    println!(
        "wrote {} train / {} test examples to {}",
        train_ds.len(),
        test_ds.len(),
        out.display()
    );
    Ok(())
}
