//! Single-run subcommands: corpus generation, training, diagnostics,
//! verification and plot rendering.

use std::path::{Path, PathBuf};

use bottleneck_core::corpus::{assumption_stats, build_counts, heldout_counts, AssumptionStats, ContextTable, Corpus, CountMatrix};
use bottleneck_core::diagnostics::{
    coefficient_profile, compression_report, gradient_rank_curve, kernel_projection, model_logit_gradient,
    update_efficiency, CoefficientProfile, CompressionReport, EfficiencyCurve, RankCurve,
};
use bottleneck_core::matrix_lm::{
    read_checkpoint, top1_accuracy, train, write_checkpoint, ModelParams, Trajectory, TrainingSet,
};
use bottleneck_core::theory::{
    verify_gibbs, verify_rank_bounds, verify_rank_lower_bound, verify_sgd_rank, verify_top1, verify_update_residual,
    VerificationResult,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{check_fraction, check_nonempty, DiagnoseConfig, GenCorpusConfig, ReportConfig, TrainRunConfig, VerifyConfig};
use crate::error::CliError;
use crate::output::OutputDir;
use crate::plot::{line_plot, PlotSpec, Series};

/// Training counts, their context table and optional held-out counts.
pub struct PreparedData {
    pub corpus: Corpus,
    pub table: ContextTable,
    pub counts: CountMatrix,
    pub validation: Option<CountMatrix>,
    /// Held-out positions whose context never occurs in training.
    pub dropped: usize,
}

pub fn prepare_data(corpus: Corpus, max_context_len: usize, validation_fraction: f64) -> Result<PreparedData, CliError> {
    check_fraction("validation_fraction", validation_fraction)?;
    let (corpus, held) = if validation_fraction > 0.0 {
        let (a, b) = corpus.split_tail(validation_fraction);
        (a, Some(b))
    } else {
        (corpus, None)
    };
    let (table, counts) = build_counts(&corpus, max_context_len)?;
    let (validation, dropped) = match held {
        Some(h) => {
            let (v, d) = heldout_counts(&h, &table)?;
            (Some(v), d)
        }
        None => (None, 0),
    };
    Ok(PreparedData {
        corpus,
        table,
        counts,
        validation,
        dropped,
    })
}

pub fn trajectory_plot(traj: &Trajectory, title: &str, log_y: bool) -> String {
    let mut series = vec![Series::new(
        "train",
        traj.points.iter().map(|p| (p.step as f64, p.train_loss)).collect(),
    )];
    let val: Vec<(f64, f64)> = traj
        .points
        .iter()
        .filter_map(|p| p.val_loss.map(|v| (p.step as f64, v)))
        .collect();
    if !val.is_empty() {
        series.push(Series::new("validation", val));
    }
    line_plot(
        &PlotSpec {
            title: title.into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            log_x: false,
            log_y,
        },
        &series,
    )
}

pub struct GenCorpusOutcome {
    pub corpus: Corpus,
    pub stats: AssumptionStats,
    pub corpus_path: PathBuf,
}

pub fn run_gen_corpus(cfg: &GenCorpusConfig) -> Result<GenCorpusOutcome, CliError> {
    let corpus = cfg.corpus.load()?;
    let out = OutputDir::create(&cfg.out_dir, "gen-corpus", cfg, Some(corpus.seed()))?;
    let mut text = Vec::new();
    corpus.write_text(&mut text).map_err(|e| CliError::io(out.path(), e))?;
    let corpus_path = out.write("corpus.txt", text)?;
    let (table, counts) = build_counts(&corpus, cfg.max_context_len)?;
    let stats = assumption_stats(&corpus, &table, &counts, &cfg.prefix_sizes);
    let mut csv = String::from("stat,key,value\n");
    for (a, b, c) in stats.csv_rows() {
        csv.push_str(&format!("{a},{b},{c}\n"));
    }
    out.write("assumption_stats.csv", csv)?;
    out.write_json(
        "summary.json",
        &json!({
            "sequences": corpus.num_sequences(),
            "tokens": corpus.total_tokens(),
            "contexts": table.len(),
            "entropy_floor": counts.entropy_floor(),
            "unique_context_count": stats.unique_context_count,
            "unique_next_token_count": stats.unique_next_token_count,
        }),
    )?;
    Ok(GenCorpusOutcome {
        corpus,
        stats,
        corpus_path,
    })
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub trajectory: Trajectory,
    pub entropy_floor: f64,
    pub checkpoint: PathBuf,
}

pub fn run_train(cfg: &TrainRunConfig) -> Result<TrainOutcome, CliError> {
    let data = prepare_data(cfg.corpus.load()?, cfg.max_context_len, cfg.validation_fraction)?;
    let out = OutputDir::create(&cfg.out_dir, "train", cfg, Some(cfg.train.seed))?;
    let params = ModelParams::init(
        data.table.len(),
        data.corpus.vocab_size(),
        cfg.hidden_dim,
        cfg.head_rank,
        cfg.train.init_scale,
        cfg.train.seed,
    )?;
    let set = TrainingSet {
        counts: &data.counts,
        sequences: Some((&data.corpus, &data.table)),
        validation: data.validation.as_ref(),
    };
    let (params, trajectory) = train(&set, &cfg.train, params)?;

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &params).map_err(|e| CliError::io(out.path(), e))?;
    let checkpoint = out.write("checkpoint.bin", bytes)?;
    out.write("trajectory.csv", trajectory.to_csv())?;
    out.write("loss.svg", trajectory_plot(&trajectory, "training loss", false))?;
    let last = trajectory.final_point().expect("at least one point");
    let top1 = top1_accuracy(&data.counts, &params)?;
    out.write_json(
        "summary.json",
        &json!({
            "contexts": data.table.len(),
            "tokens": data.counts.total(),
            "entropy_floor": data.counts.entropy_floor(),
            "final_train_loss": last.train_loss,
            "final_val_loss": last.val_loss,
            "heldout_positions_dropped": data.dropped,
            "top1_weighted": top1.weighted,
            "top1_unweighted": top1.unweighted,
        }),
    )?;
    Ok(TrainOutcome {
        params,
        trajectory,
        entropy_floor: data.counts.entropy_floor(),
        checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseOutcome {
    pub rank_curve: RankCurve,
    pub compression: CompressionReport,
    pub profile: CoefficientProfile,
    pub efficiency: EfficiencyCurve,
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_checkpoint(std::io::BufReader::new(f))?)
}

/// The diagnostics battery on one model and its training counts.
pub fn diagnose_model(
    counts: &CountMatrix,
    params: &ModelParams,
    token_counts: &[usize],
    fractions: &[f64],
    seed: u64,
) -> Result<DiagnoseOutcome, CliError> {
    let rank_curve = gradient_rank_curve(counts, params, token_counts, seed)?;
    let g = model_logit_gradient(counts, params)?;
    let compression = compression_report(&g, &params.head)?;
    // the part of G that reaches the parameters below the head
    let visible = g.sub(&kernel_projection(&g, &params.head)?)?;
    let profile = coefficient_profile(&g, &visible)?;
    let efficiency = update_efficiency(counts, params, fractions)?;
    Ok(DiagnoseOutcome {
        rank_curve,
        compression,
        profile,
        efficiency,
    })
}

pub fn run_diagnose(cfg: &DiagnoseConfig) -> Result<DiagnoseOutcome, CliError> {
    check_nonempty("token_counts", &cfg.token_counts)?;
    check_nonempty("fractions", &cfg.fractions)?;
    let params = load_checkpoint(&cfg.checkpoint)?;
    let data = prepare_data(cfg.corpus.load()?, cfg.max_context_len, cfg.validation_fraction)?;
    if params.contexts() != data.table.len() || params.vocab_size() != data.corpus.vocab_size() {
        return Err(CliError::Config(format!(
            "checkpoint has C = {}, V = {} but the corpus gives C = {}, V = {}",
            params.contexts(),
            params.vocab_size(),
            data.table.len(),
            data.corpus.vocab_size()
        )));
    }
    let outcome = diagnose_model(&data.counts, &params, &cfg.token_counts, &cfg.fractions, cfg.seed)?;
    let out = OutputDir::create(&cfg.out_dir, "diagnose", cfg, Some(cfg.seed))?;
    write_diagnostics(&out, &outcome, false)?;
    Ok(outcome)
}

fn rank_plot(curve: &RankCurve) -> String {
    let pts = |f: fn(&bottleneck_core::diagnostics::RankPoint) -> usize| {
        curve.points.iter().map(|p| (p.token_count as f64, f(p) as f64)).collect()
    };
    line_plot(
        &PlotSpec {
            title: "empirical rank of per-token logit gradients".into(),
            x_label: "tokens".into(),
            y_label: "rank".into(),
            log_x: true,
            log_y: false,
        },
        &[Series::new("rank", pts(|p| p.rank)), Series::new("min(tokens, V)", pts(|p| p.max_rank))],
    )
}

fn efficiency_plot(curve: &EfficiencyCurve, log_y: bool) -> String {
    // loss decreases are plotted as positive magnitudes
    let pts = |ys: &[f64]| curve.fractions.iter().zip(ys).map(|(&a, &d)| (a, -d)).collect();
    line_plot(
        &PlotSpec {
            title: "loss decrease per logit step".into(),
            x_label: "step / ||L||".into(),
            y_label: "-(loss change)".into(),
            log_x: true,
            log_y,
        },
        &[
            Series::new("logit gradient", pts(&curve.loss_delta_logit_dir)),
            Series::new("hidden-state direction", pts(&curve.loss_delta_hidden_dir)),
        ],
    )
}

fn profile_plot(p: &CoefficientProfile) -> String {
    let pts = |ys: &[f64]| ys.iter().enumerate().map(|(k, &y)| ((k + 1) as f64, y)).collect();
    line_plot(
        &PlotSpec {
            title: "sorted gradient coefficients".into(),
            x_label: "position".into(),
            y_label: "mean coefficient".into(),
            log_x: true,
            log_y: false,
        },
        &[Series::new("full", pts(&p.full_mean)), Series::new("visible", pts(&p.proj_mean))],
    )
}

pub fn write_diagnostics(out: &OutputDir, d: &DiagnoseOutcome, log_y: bool) -> Result<(), CliError> {
    out.write("rank_curve.csv", d.rank_curve.to_csv())?;
    out.write("compression.csv", d.compression.to_csv())?;
    out.write("compression_rows.csv", d.compression.per_row_csv())?;
    out.write("coefficient_profile.csv", d.profile.to_csv())?;
    out.write("efficiency.csv", d.efficiency.to_csv())?;
    out.write("rank_curve.svg", rank_plot(&d.rank_curve))?;
    out.write("efficiency.svg", efficiency_plot(&d.efficiency, log_y))?;
    out.write("coefficient_profile.svg", profile_plot(&d.profile))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub results: Vec<VerificationResult>,
    /// Settings that make a check vacuous.
    pub flags: Vec<String>,
}

impl VerifyOutcome {
    pub fn violations(&self) -> usize {
        self.results.iter().map(|r| r.violations).sum()
    }
}

/// Rank tolerances above this make the rank checks meaningless for
/// entries of order one.
const DEGENERATE_RANK_TOL: f64 = 1e-2;

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyOutcome, CliError> {
    let out = OutputDir::create(&cfg.out_dir, "verify", cfg, Some(cfg.seed))?;
    let s = cfg.seed;
    let mut flags = Vec::new();
    if cfg.rank_bounds.tol > DEGENERATE_RANK_TOL {
        flags.push(format!(
            "rank_bounds.tol = {} exceeds {DEGENERATE_RANK_TOL}: every rank reads as 0 and the check is vacuous",
            cfg.rank_bounds.tol
        ));
    }
    let sgd = &cfg.sgd_rank;
    let corpora = (0..sgd.corpora as u64)
        .map(|i| {
            bottleneck_core::corpus::gen_zipf_bigram(
                sgd.vocab_size,
                sgd.exponent,
                sgd.num_seqs,
                sgd.seq_len,
                s.wrapping_add(1000 + i),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let results = vec![
        verify_gibbs(cfg.gibbs.trials, cfg.gibbs.dims, s)?,
        verify_rank_bounds(cfg.rank_bounds.trials, cfg.rank_bounds.dims, cfg.rank_bounds.tol, s.wrapping_add(1))?,
        verify_top1(cfg.top1.trials, cfg.top1.dims, cfg.top1.epsilon, s.wrapping_add(2))?,
        verify_rank_lower_bound(
            cfg.rank_lower_bound.instances,
            cfg.rank_lower_bound.max_contexts,
            cfg.rank_lower_bound.max_vocab,
            s.wrapping_add(3),
        )?,
        verify_update_residual(cfg.update_residual.instances, cfg.update_residual.max_vocab, s.wrapping_add(4))?,
        verify_sgd_rank(&corpora, &sgd.check, s.wrapping_add(5))?,
    ];
    for r in &results {
        out.write(&format!("{}.json", r.proposition), r.summary_json() + "\n")?;
        out.write(&format!("{}.csv", r.proposition), r.details_csv())?;
    }
    let summaries: Vec<serde_json::Value> = results
        .iter()
        .map(|r| serde_json::from_str(&r.summary_json()).expect("summary is JSON"))
        .collect();
    out.write_json(
        "summary.json",
        &json!({"results": summaries, "flags": flags, "violations": results.iter().map(|r| r.violations).sum::<usize>()}),
    )?;
    Ok(VerifyOutcome { results, flags })
}

/// Header and numeric rows; unparsable cells are `None`.
type Table = (Vec<String>, Vec<Vec<Option<f64>>>);

fn parse_csv(text: &str) -> Option<Table> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next()?.split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse::<f64>().ok()).collect())
        .collect();
    Some((header, rows))
}

fn column_series(rows: &[Vec<Option<f64>>], x: usize, y: usize, name: &str, negate: bool) -> Series {
    let sign = if negate { -1.0 } else { 1.0 };
    Series::new(
        name,
        rows.iter()
            .filter_map(|r| Some((*r.get(x)?.as_ref()?, sign * *r.get(y)?.as_ref()?)))
            .collect(),
    )
}

/// Plot for a CSV with a known header.
fn plot_for(header: &[String], rows: &[Vec<Option<f64>>], log_y: bool) -> Option<String> {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let spec = |title: &str, x: &str, y: &str, log_x: bool| PlotSpec {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        log_x,
        log_y,
    };
    match h.as_slice() {
        ["step", "train_loss", "val_loss", "top1_acc"] => Some(line_plot(
            &spec("loss", "step", "loss", false),
            &[column_series(rows, 0, 1, "train", false), column_series(rows, 0, 2, "validation", false)],
        )),
        ["token_count", "rank", "max_rank"] => Some(line_plot(
            &spec("gradient rank", "tokens", "rank", true),
            &[column_series(rows, 0, 1, "rank", false), column_series(rows, 0, 2, "min(tokens, V)", false)],
        )),
        ["alpha", "delta_logit", "delta_hidden"] => Some(line_plot(
            &spec("loss decrease per logit step", "step / ||L||", "-(loss change)", true),
            &[
                column_series(rows, 0, 1, "logit gradient", true),
                column_series(rows, 0, 2, "hidden-state direction", true),
            ],
        )),
        ["position", "full_mean", "full_std", "proj_mean", "proj_std"] => Some(line_plot(
            &spec("sorted gradient coefficients", "position", "mean coefficient", true),
            &[column_series(rows, 0, 1, "full", false), column_series(rows, 0, 3, "visible", false)],
        )),
        _ => None,
    }
}

fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_csvs(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Renders an SVG next to every CSV with a known header. Returns the plots
/// written.
pub fn run_report(cfg: &ReportConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut csvs = Vec::new();
    collect_csvs(&cfg.input_dir, &mut csvs)?;
    let mut written = Vec::new();
    for csv in csvs {
        let text = std::fs::read_to_string(&csv).map_err(|e| CliError::io(&csv, e))?;
        let Some((header, rows)) = parse_csv(&text) else { continue };
        let Some(svg) = plot_for(&header, &rows, cfg.log_scale) else { continue };
        let dir = csv.parent().expect("file has a parent");
        let name = csv.file_stem().expect("file has a stem").to_string_lossy();
        let out = OutputDir::create(dir, "report", cfg, None)?;
        written.push(out.write(&format!("{name}.report.svg"), svg)?);
    }
    Ok(written)
}
