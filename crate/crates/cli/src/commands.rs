use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use specdec_lab::bench::{run_bench, run_decomposition, BenchConfig};
use specdec_lab::checkpoint::{save_backbone, save_head, save_target};
use specdec_lab::engine::{run_simulation, SimConfig};
use specdec_lab::models::TargetConfig;
use specdec_lab::perfmodel::{
    bundled_reference_rows, crosscheck, level_curve_grid, load_reference_rows, min_acceptance_ratio, nu_grid,
    CROSSCHECK_TOLERANCE, REFERENCE_KAPPA,
};
use specdec_lab::training::{
    freq_stats_for, learning_rate_at, read_dataset_jsonl, run_toy_training_with, select_truncated_vocab, target_for,
    write_dataset_jsonl, FreqSource, ToyTrainConfig,
};
use specdec_lab::DecodeTemperature;

use crate::output::{io_err, real, write_json, CsvOut};
use crate::{config_dir, load_config, CliError, Done, GlobalArgs, Progress};

fn done(seed: u64) -> Result<Done, CliError> {
    Ok(Done {
        seed,
        failed_check: None,
    })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Train on this JSON-lines dataset instead of sampling one.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// Also write the training data as `dataset.jsonl`.
    #[arg(long)]
    save_dataset: bool,
}

#[derive(Serialize)]
struct TrainSummary {
    head: String,
    steps: usize,
    examples: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    truncated_vocab_size: Option<usize>,
    coverage: Option<f64>,
}

pub fn train(g: &GlobalArgs, a: &TrainArgs, progress: &Progress) -> Result<Done, CliError> {
    let mut cfg: ToyTrainConfig = load_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    let dataset = match &a.dataset {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
            let target = target_for(&cfg)?;
            Some(read_dataset_jsonl(BufReader::new(file), Some(&target))?)
        }
        None => None,
    };
    progress.say(format!("training {:?} head for {} steps", cfg.head, cfg.train.steps));
    let result = run_toy_training_with(&cfg, dataset)?;
    let drafter = &result.outcome.drafter;
    save_target(&result.target).write(&g.out.join("target.json"))?;
    save_backbone(&drafter.backbone).write(&g.out.join("backbone.json"))?;
    save_head(&drafter.head).write(&g.out.join("head.json"))?;

    let mut csv = CsvOut::create(&g.out.join("loss_curve.csv"), &["step", "loss", "learning_rate"])?;
    let train_cfg = cfg.train;
    for (step, loss) in result.outcome.loss_curve.iter().enumerate() {
        csv.row(&[step.to_string(), real(*loss), real(learning_rate_at(&train_cfg, step))])?;
    }
    csv.finish()?;

    if let Some(keep) = &result.keep {
        let ids: Vec<u32> = keep.iter().map(|t| t.0).collect();
        write_json(&g.out.join("vocab.json"), &ids)?;
    }
    if a.save_dataset {
        let path = g.out.join("dataset.jsonl");
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_dataset_jsonl(&mut w, &result.dataset, result.keep.as_deref())?;
        std::io::Write::flush(&mut w).map_err(|e| io_err(&path, e))?;
    }
    let curve = &result.outcome.loss_curve;
    write_json(
        &g.out.join("train.json"),
        &TrainSummary {
            head: drafter.head.kind().to_string(),
            steps: cfg.train.steps,
            examples: result.dataset.len(),
            initial_loss: curve.first().copied(),
            final_loss: curve.last().copied(),
            truncated_vocab_size: result.keep.as_ref().map(Vec::len),
            coverage: result.coverage,
        },
    )?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        progress.say(format!("loss {first:.4} -> {last:.4}"));
    }
    done(cfg.seed)
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Overrides `rounds`.
    #[arg(long)]
    rounds: Option<u64>,
    /// Overrides the draft length `n`.
    #[arg(long)]
    n: Option<usize>,
}

pub fn simulate(g: &GlobalArgs, a: &SimulateArgs, progress: &Progress) -> Result<Done, CliError> {
    let mut cfg: SimConfig = load_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(rounds) = a.rounds {
        cfg.rounds = rounds;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if cfg.rounds == 0 {
        return Err(CliError::Config("rounds must be at least 1".into()));
    }
    progress.say(format!("simulating {} rounds with n = {}", cfg.rounds, cfg.n));
    let report = run_simulation(&cfg, &config_dir(g))?;
    write_json(&g.out.join("report.json"), &report)?;
    let mut csv = CsvOut::create(
        &g.out.join("positions.csv"),
        &[
            "method",
            "position",
            "reached",
            "accepted",
            "acceptance_rate",
            "mean_alpha",
            "mean_coverage",
            "argmax_outside_support",
            "accepted_argmax_outside_support",
        ],
    )?;
    for p in &report.positions {
        csv.row(&[
            report.method.clone(),
            p.position.to_string(),
            p.reached.to_string(),
            p.accepted.to_string(),
            real(p.acceptance_rate),
            real(p.mean_alpha),
            real(p.mean_coverage),
            p.argmax_outside_support.to_string(),
            p.accepted_argmax_outside_support.to_string(),
        ])?;
    }
    csv.finish()?;
    progress.say(format!("{}: tau = {:.4}", report.method, report.tau));
    done(cfg.seed)
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Overrides `reps`.
    #[arg(long)]
    reps: Option<usize>,
}

pub fn bench(g: &GlobalArgs, a: &BenchArgs, progress: &Progress) -> Result<Done, CliError> {
    let mut cfg: BenchConfig = load_config(g.config.as_deref())?;
    if let Some(reps) = a.reps {
        cfg.reps = reps;
    }
    let seed = g.seed.unwrap_or(0);
    cfg.validate()?;
    let rows = run_bench(&cfg, seed, |r| {
        progress.say(format!(
            "{} V={} d={} size={} batch={}: median {:.3e} s, nu {:.3}",
            r.kind, r.v, r.d, r.r_or_vtr_or_k, r.batch, r.median_s, r.nu
        ))
    })?;
    let mut csv = CsvOut::create(
        &g.out.join("bench.csv"),
        &[
            "kind",
            "v",
            "d",
            "r_or_vtr_or_k",
            "batch",
            "reps",
            "median_s",
            "p10_s",
            "p90_s",
            "flops",
            "nu",
        ],
    )?;
    for r in &rows {
        csv.row(&[
            r.kind.to_string(),
            r.v.to_string(),
            r.d.to_string(),
            r.r_or_vtr_or_k.to_string(),
            r.batch.to_string(),
            r.reps.to_string(),
            real(r.median_s),
            real(r.p10_s),
            real(r.p90_s),
            r.flops.to_string(),
            real(r.nu),
        ])?;
    }
    csv.finish()?;

    let parts = run_decomposition(&cfg, seed)?;
    if !parts.is_empty() {
        let mut csv = CsvOut::create(
            &g.out.join("decomposition.csv"),
            &[
                "kind",
                "v",
                "d",
                "r_or_vtr_or_k",
                "n",
                "reps",
                "t_overhead",
                "t_verify",
                "t_backbone",
                "t_head",
                "t_draft",
                "total",
                "kappa",
            ],
        )?;
        for r in &parts {
            progress.say(format!(
                "{} draft of {}: backbone {:.3e} s, head {:.3e} s, verify {:.3e} s",
                r.kind, r.n, r.t_backbone, r.t_head, r.t_verify
            ));
            csv.row(&[
                r.kind.to_string(),
                r.v.to_string(),
                r.d.to_string(),
                r.r_or_vtr_or_k.to_string(),
                r.n.to_string(),
                r.reps.to_string(),
                real(r.t_overhead),
                real(r.t_verify),
                real(r.t_backbone),
                real(r.t_head),
                real(r.t_draft),
                real(r.total),
                real(r.kappa),
            ])?;
        }
        csv.finish()?;
    }
    done(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PerfmodelConfig {
    kappa: f64,
    /// Speedup levels drawn as curves in the (ν, ρ_τ) plane.
    levels: Vec<f64>,
    nu_points: usize,
    /// Reference table CSV; the bundled table when absent.
    reference: Option<PathBuf>,
    crosscheck_kappa: f64,
    tolerance: f64,
}

impl Default for PerfmodelConfig {
    fn default() -> Self {
        Self {
            kappa: REFERENCE_KAPPA,
            levels: vec![0.9, 1.0, 1.1, 1.2, 1.3],
            nu_points: 100,
            reference: None,
            crosscheck_kappa: REFERENCE_KAPPA,
            tolerance: CROSSCHECK_TOLERANCE,
        }
    }
}

#[derive(Debug, Args)]
pub struct PerfmodelArgs {
    /// κ for the plane and threshold outputs.
    #[arg(long)]
    kappa: Option<f64>,
    /// Compare the model against the reference table.
    #[arg(long)]
    crosscheck: bool,
    /// Reference table CSV (method,config,measured_speedup,rho_tau,nu).
    #[arg(long, value_name = "PATH")]
    reference: Option<PathBuf>,
}

#[derive(Serialize)]
struct PerfmodelSummary {
    kappa: f64,
    levels: Vec<f64>,
    nu_points: usize,
    crosscheck: Option<specdec_lab::perfmodel::CrosscheckReport>,
}

pub fn perfmodel(g: &GlobalArgs, a: &PerfmodelArgs, progress: &Progress) -> Result<Done, CliError> {
    let mut cfg: PerfmodelConfig = load_config(g.config.as_deref())?;
    if let Some(k) = a.kappa {
        cfg.kappa = k;
    }
    if let Some(r) = &a.reference {
        cfg.reference = Some(r.clone());
    }
    if cfg.nu_points == 0 {
        return Err(CliError::Config("nu_points must be positive".into()));
    }
    let nus = nu_grid(cfg.nu_points);
    let plane = level_curve_grid(cfg.kappa, &cfg.levels, &nus)?;
    let mut csv = CsvOut::create(&g.out.join("plane.csv"), &["kappa", "level", "nu", "rho_tau"])?;
    for p in &plane {
        csv.row(&[real(cfg.kappa), real(p.level), real(p.nu), real(p.rho_tau)])?;
    }
    csv.finish()?;
    let mut csv = CsvOut::create(&g.out.join("threshold.csv"), &["kappa", "nu", "threshold"])?;
    for &nu in &nus {
        csv.row(&[real(cfg.kappa), real(nu), real(min_acceptance_ratio(nu, cfg.kappa)?)])?;
    }
    csv.finish()?;

    let mut failed_check = None;
    let report = if a.crosscheck {
        let rows = match &cfg.reference {
            Some(path) => {
                let path = if path.is_absolute() || a.reference.is_some() {
                    path.clone()
                } else {
                    config_dir(g).join(path)
                };
                load_reference_rows(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => bundled_reference_rows(),
        };
        let report = crosscheck(&rows, cfg.crosscheck_kappa, cfg.tolerance)?;
        let mut csv = CsvOut::create(
            &g.out.join("crosscheck.csv"),
            &[
                "method",
                "config",
                "nu",
                "rho_tau",
                "kappa",
                "predicted_speedup",
                "measured_speedup",
                "delta",
                "pass",
            ],
        )?;
        for r in &report.rows {
            csv.row(&[
                r.method.clone(),
                r.config.clone(),
                real(r.nu),
                real(r.rho_tau),
                real(r.kappa),
                real(r.predicted_speedup),
                real(r.measured_speedup),
                real(r.delta),
                r.pass.to_string(),
            ])?;
            progress.say(format!(
                "{:<5} {} {}: predicted {:.3}, measured {:.3}",
                if r.pass { "pass" } else { "FAIL" },
                r.method,
                r.config,
                r.predicted_speedup,
                r.measured_speedup
            ));
        }
        csv.finish()?;
        let failing = report.rows.iter().filter(|r| !r.pass).count();
        if failing > 0 {
            failed_check = Some(format!(
                "{failing} of {} reference rows outside ±{}",
                report.rows.len(),
                report.tolerance
            ));
        }
        Some(report)
    } else {
        None
    };
    write_json(
        &g.out.join("perfmodel.json"),
        &PerfmodelSummary {
            kappa: cfg.kappa,
            levels: cfg.levels.clone(),
            nu_points: cfg.nu_points,
            crosscheck: report,
        },
    )?;
    Ok(Done {
        seed: g.seed.unwrap_or(0),
        failed_check,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FreqConfig {
    seed: u64,
    target: TargetConfig,
    tokens: usize,
    source: FreqSource,
    temperature: DecodeTemperature,
    sizes: Vec<usize>,
}

impl Default for FreqConfig {
    fn default() -> Self {
        let toy = ToyTrainConfig::default();
        Self {
            seed: 0,
            target: toy.target,
            tokens: toy.freq_tokens,
            source: FreqSource::Target,
            temperature: DecodeTemperature::UNIT,
            sizes: vec![],
        }
    }
}

#[derive(Debug, Args)]
pub struct FreqstatsArgs {
    /// Truncated vocabulary sizes to select, e.g. `64,128`.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Overrides the corpus length `tokens`.
    #[arg(long)]
    tokens: Option<usize>,
}

#[derive(Serialize)]
struct SizeCoverage {
    size: usize,
    coverage: f64,
}

#[derive(Serialize)]
struct FreqReport {
    vocab_size: usize,
    source: FreqSource,
    total: u64,
    counts: Vec<u64>,
    sizes: Vec<SizeCoverage>,
}

pub fn freqstats(g: &GlobalArgs, a: &FreqstatsArgs, progress: &Progress) -> Result<Done, CliError> {
    let mut cfg: FreqConfig = load_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(sizes) = &a.sizes {
        cfg.sizes = sizes.clone();
    }
    if let Some(t) = a.tokens {
        cfg.tokens = t;
    }
    let v = cfg.target.vocab_size;
    if let Some(bad) = cfg.sizes.iter().find(|&&s| s == 0 || s > v) {
        return Err(CliError::Config(format!("size {bad} outside 1..={v}")));
    }
    let toy = ToyTrainConfig {
        seed: cfg.seed,
        target: cfg.target,
        freq_tokens: cfg.tokens,
        temperature: cfg.temperature,
        ..ToyTrainConfig::default()
    };
    let target = target_for(&toy)?;
    progress.say(format!(
        "sampling {} tokens from the {:?} corpus",
        cfg.tokens, cfg.source
    ));
    let stats = freq_stats_for(&toy, &target, cfg.source)?;
    let mut sizes = Vec::new();
    for &size in &cfg.sizes {
        let vocab = select_truncated_vocab(&stats, size)?;
        let ids: Vec<u32> = vocab.iter().map(|t| t.0).collect();
        write_json(&g.out.join(format!("vocab_{size}.json")), &ids)?;
        sizes.push(SizeCoverage {
            size,
            coverage: stats.coverage(size),
        });
    }
    write_json(
        &g.out.join("freqstats.json"),
        &FreqReport {
            vocab_size: v,
            source: cfg.source,
            total: stats.total,
            counts: stats.counts.clone(),
            sizes,
        },
    )?;
    done(cfg.seed)
}
