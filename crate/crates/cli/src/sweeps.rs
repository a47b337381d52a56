//! Grid experiments: vocabulary size against learning rate on SpamLang, and
//! head rank on a shared Zipf corpus.

use bottleneck_core::corpus::{build_counts, gen_spamlang};
use bottleneck_core::matrix_lm::{top1_accuracy, train, ModelParams, TrainConfig, Trajectory, TrainingSet};
use serde::Serialize;
use serde_json::json;

use crate::config::{check_nonempty, BottleneckSweepConfig, SpamlangSweepConfig};
use crate::error::CliError;
use crate::experiments::{prepare_data, trajectory_plot};
use crate::output::OutputDir;
use crate::plot::{line_plot, PlotSpec, Series};
use crate::stats::spearman;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Diverged,
}

/// Everything a SpamLang cell depends on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpamlangCellConfig {
    pub vocab_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub num_seqs: usize,
    pub seq_len: usize,
    pub max_context_len: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpamlangCell {
    pub vocab_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub entropy_floor: f64,
    /// `final_loss − entropy_floor`
    pub excess_loss: Option<f64>,
    pub top1: Option<f64>,
    pub status: CellStatus,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

/// Lowest loss over learning rates for one `(V, seed)`. The floor does not
/// depend on the learning rate, so both columns pick the same cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestCell {
    pub vocab_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub final_loss: f64,
    pub excess_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpamlangSweepOutcome {
    pub cells: Vec<SpamlangCell>,
    pub best: Vec<BestCell>,
    /// Mean over seeds of the best excess loss, per vocabulary size.
    pub mean_best: Vec<(usize, f64)>,
    /// Spearman correlation between `V` and best excess loss, all seeds pooled.
    pub spearman: Option<f64>,
    pub nondecreasing: bool,
    /// Same three on the raw final loss.
    pub mean_best_final: Vec<(usize, f64)>,
    pub spearman_final: Option<f64>,
    pub nondecreasing_final: bool,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn run_spamlang_cell(cfg: &SpamlangCellConfig) -> Result<SpamlangCell, CliError> {
    let corpus = gen_spamlang(cfg.vocab_size, cfg.num_seqs, cfg.seq_len, cfg.seed)?;
    let (table, counts) = build_counts(&corpus, cfg.max_context_len)?;
    let params = ModelParams::init(
        table.len(),
        cfg.vocab_size,
        cfg.hidden_dim,
        None,
        cfg.train.init_scale,
        cfg.seed,
    )?;
    let initial_loss = bottleneck_core::matrix_lm::loss(&counts, &params)?;
    let floor = counts.entropy_floor();
    let mut train_cfg = cfg.train.clone();
    train_cfg.lr = cfg.lr;
    train_cfg.seed = cfg.seed;
    let set = TrainingSet {
        counts: &counts,
        sequences: Some((&corpus, &table)),
        validation: None,
    };
    Ok(match train(&set, &train_cfg, params) {
        Ok((params, trajectory)) => {
            let last = trajectory.final_point().expect("at least one point").train_loss;
            SpamlangCell {
                vocab_size: cfg.vocab_size,
                lr: cfg.lr,
                seed: cfg.seed,
                initial_loss,
                final_loss: Some(last),
                entropy_floor: floor,
                excess_loss: Some(last - floor),
                top1: Some(top1_accuracy(&counts, &params)?.weighted),
                status: CellStatus::Ok,
                trajectory,
            }
        }
        Err(bottleneck_core::matrix_lm::TrainError::NonFinite { .. }) => SpamlangCell {
            vocab_size: cfg.vocab_size,
            lr: cfg.lr,
            seed: cfg.seed,
            initial_loss,
            final_loss: None,
            entropy_floor: floor,
            excess_loss: None,
            top1: None,
            status: CellStatus::Diverged,
            trajectory: Trajectory::default(),
        },
        Err(e) => return Err(e.into()),
    })
}

/// Seed-mean per `V`, pooled Spearman against `V`, and whether the means
/// never drop as `V` grows.
fn vocab_trend(vocab_sizes: &[usize], best: &[BestCell], metric: impl Fn(&BestCell) -> f64) -> (Vec<(usize, f64)>, Option<f64>, bool) {
    let means: Vec<(usize, f64)> = vocab_sizes
        .iter()
        .filter_map(|&v| {
            let xs: Vec<f64> = best.iter().filter(|b| b.vocab_size == v).map(&metric).collect();
            (!xs.is_empty()).then(|| (v, xs.iter().sum::<f64>() / xs.len() as f64))
        })
        .collect();
    let mut sorted = means.clone();
    sorted.sort_by_key(|&(v, _)| v);
    let nondecreasing = sorted.windows(2).all(|w| w[0].1 <= w[1].1);
    let rho = spearman(
        &best.iter().map(|b| b.vocab_size as f64).collect::<Vec<_>>(),
        &best.iter().map(&metric).collect::<Vec<_>>(),
    );
    (means, rho, nondecreasing)
}

pub fn run_spamlang_sweep(cfg: &SpamlangSweepConfig) -> Result<SpamlangSweepOutcome, CliError> {
    check_nonempty("vocab_sizes", &cfg.vocab_sizes)?;
    check_nonempty("lrs", &cfg.lrs)?;
    check_nonempty("seeds", &cfg.seeds)?;
    cfg.train.validate()?;
    let out = OutputDir::create(&cfg.out_dir, "spamlang-sweep", cfg, None)?;

    let mut cells = Vec::new();
    for &vocab_size in &cfg.vocab_sizes {
        for &lr in &cfg.lrs {
            for &seed in &cfg.seeds {
                let cell_cfg = SpamlangCellConfig {
                    vocab_size,
                    lr,
                    seed,
                    hidden_dim: cfg.hidden_dim,
                    num_seqs: cfg.num_seqs,
                    seq_len: cfg.seq_len,
                    max_context_len: cfg.max_context_len,
                    train: cfg.train.clone(),
                };
                let cell = run_spamlang_cell(&cell_cfg)?;
                let dir = out.subdir(&format!("cells/v{vocab_size}_lr{lr}_seed{seed}"), &cell_cfg, Some(seed))?;
                dir.write("trajectory.csv", cell.trajectory.to_csv())?;
                cells.push(cell);
            }
        }
    }

    let mut csv = String::from("vocab_size,lr,seed,initial_loss,final_loss,entropy_floor,excess_loss,top1_acc,status\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.vocab_size,
            c.lr,
            c.seed,
            c.initial_loss,
            fmt_opt(c.final_loss),
            c.entropy_floor,
            fmt_opt(c.excess_loss),
            fmt_opt(c.top1),
            if c.status == CellStatus::Ok { "ok" } else { "diverged" }
        ));
    }
    out.write("final_loss.csv", csv)?;

    // V × lr grid of seed-mean excess loss; a diverged seed marks the cell
    let mut table = format!(
        "vocab_size,{}\n",
        cfg.lrs.iter().map(|lr| format!("lr_{lr}")).collect::<Vec<_>>().join(",")
    );
    for &v in &cfg.vocab_sizes {
        let row: Vec<String> = cfg
            .lrs
            .iter()
            .map(|&lr| {
                let xs: Vec<Option<f64>> = cells
                    .iter()
                    .filter(|c| c.vocab_size == v && c.lr == lr)
                    .map(|c| c.excess_loss)
                    .collect();
                if xs.iter().any(Option::is_none) {
                    "diverged".to_string()
                } else {
                    (xs.iter().flatten().sum::<f64>() / xs.len() as f64).to_string()
                }
            })
            .collect();
        table.push_str(&format!("{v},{}\n", row.join(",")));
    }
    out.write("loss_table.csv", table)?;

    let mut best = Vec::new();
    for &v in &cfg.vocab_sizes {
        for &seed in &cfg.seeds {
            let pick = cells
                .iter()
                .filter(|c| c.vocab_size == v && c.seed == seed)
                .filter_map(|c| Some((c.lr, c.final_loss?, c.excess_loss?)))
                .min_by(|a, b| a.2.total_cmp(&b.2));
            if let Some((lr, final_loss, excess_loss)) = pick {
                best.push(BestCell {
                    vocab_size: v,
                    seed,
                    lr,
                    final_loss,
                    excess_loss,
                });
            }
        }
    }
    let mut csv = String::from("vocab_size,seed,best_lr,final_loss,excess_loss\n");
    for b in &best {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            b.vocab_size, b.seed, b.lr, b.final_loss, b.excess_loss
        ));
    }
    out.write("best_lr.csv", csv)?;

    let (mean_best, rho, nondecreasing) = vocab_trend(&cfg.vocab_sizes, &best, |b| b.excess_loss);
    let (mean_best_final, rho_final, nondecreasing_final) = vocab_trend(&cfg.vocab_sizes, &best, |b| b.final_loss);

    let series: Vec<Series> = cfg
        .seeds
        .iter()
        .map(|&s| {
            Series::new(
                format!("seed {s}"),
                best.iter()
                    .filter(|b| b.seed == s)
                    .map(|b| (b.vocab_size as f64, b.excess_loss))
                    .collect(),
            )
        })
        .collect();
    out.write(
        "excess_loss_vs_vocab.svg",
        line_plot(
            &PlotSpec {
                title: format!("best-lr excess loss, D = {}", cfg.hidden_dim),
                x_label: "V".into(),
                y_label: "final loss - entropy floor".into(),
                log_x: true,
                log_y: false,
            },
            &series,
        ),
    )?;
    let first_seed = cfg.seeds[0];
    let traj_series: Vec<Series> = best
        .iter()
        .filter(|b| b.seed == first_seed)
        .filter_map(|b| {
            let c = cells
                .iter()
                .find(|c| c.vocab_size == b.vocab_size && c.seed == b.seed && c.lr == b.lr)?;
            Some(Series::new(
                format!("V = {}", b.vocab_size),
                c.trajectory
                    .points
                    .iter()
                    .map(|p| (p.step as f64, p.train_loss - c.entropy_floor))
                    .collect(),
            ))
        })
        .collect();
    out.write(
        "best_trajectories.svg",
        line_plot(
            &PlotSpec {
                title: format!("excess loss at the best lr, seed {first_seed}"),
                x_label: "step".into(),
                y_label: "loss - entropy floor".into(),
                log_x: false,
                log_y: true,
            },
            &traj_series,
        ),
    )?;

    let outcome = SpamlangSweepOutcome {
        cells,
        best,
        mean_best,
        spearman: rho,
        nondecreasing,
        mean_best_final,
        spearman_final: rho_final,
        nondecreasing_final,
    };
    out.write_json(
        "summary.json",
        &json!({
            "mean_best_excess_loss": outcome.mean_best,
            "spearman_vocab_vs_loss": outcome.spearman,
            "nondecreasing_in_vocab": outcome.nondecreasing,
            "mean_best_final_loss": outcome.mean_best_final,
            "spearman_vocab_vs_final_loss": outcome.spearman_final,
            "final_loss_nondecreasing_in_vocab": outcome.nondecreasing_final,
            "diverged_cells": outcome.cells.iter().filter(|c| c.status == CellStatus::Diverged).count(),
        }),
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BottleneckCell {
    /// `None` for the full-head baseline.
    pub rank: Option<usize>,
    pub seed: u64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub status: CellStatus,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BottleneckSweepOutcome {
    pub cells: Vec<BottleneckCell>,
    /// Spearman correlation of head rank against final validation loss,
    /// factored cells of all seeds pooled.
    pub spearman: Option<f64>,
    pub spearman_per_seed: Vec<(u64, Option<f64>)>,
    /// Tokens the smallest rank needs to reach its final validation loss,
    /// divided by the tokens the largest rank needs to reach the same loss;
    /// mean over seeds where both are defined.
    pub token_budget_ratio: Option<f64>,
    pub tokens_per_step: u64,
}

pub fn run_bottleneck_sweep(cfg: &BottleneckSweepConfig) -> Result<BottleneckSweepOutcome, CliError> {
    check_nonempty("ranks", &cfg.ranks)?;
    check_nonempty("seeds", &cfg.seeds)?;
    if cfg.ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Config("ranks must be strictly ascending".into()));
    }
    if cfg.ranks.iter().any(|&r| r == 0 || r > cfg.hidden_dim) {
        return Err(CliError::Config(format!("ranks must lie in 1..={}", cfg.hidden_dim)));
    }
    if !matches!(cfg.train.batching, bottleneck_core::matrix_lm::Batching::Full) {
        return Err(CliError::Config("the head-rank sweep trains full batch".into()));
    }
    cfg.train.validate()?;
    let data = prepare_data(cfg.corpus.load()?, cfg.max_context_len, cfg.validation_fraction)?;
    let out = OutputDir::create(&cfg.out_dir, "bottleneck-sweep", cfg, None)?;
    let set = TrainingSet {
        counts: &data.counts,
        sequences: None,
        validation: data.validation.as_ref(),
    };
    let c = data.table.len();
    let v = data.corpus.vocab_size();

    let mut heads: Vec<Option<usize>> = cfg.ranks.iter().map(|&r| Some(r)).collect();
    if cfg.include_full_head {
        heads.push(None);
    }
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &rank in &heads {
            let params = ModelParams::init(c, v, cfg.hidden_dim, rank, cfg.train.init_scale, seed)?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            let cell = match train(&set, &train_cfg, params) {
                Ok((_, trajectory)) => {
                    let last = trajectory.final_point().expect("at least one point");
                    BottleneckCell {
                        rank,
                        seed,
                        final_train_loss: Some(last.train_loss),
                        final_val_loss: last.val_loss,
                        status: CellStatus::Ok,
                        trajectory,
                    }
                }
                Err(bottleneck_core::matrix_lm::TrainError::NonFinite { .. }) => BottleneckCell {
                    rank,
                    seed,
                    final_train_loss: None,
                    final_val_loss: None,
                    status: CellStatus::Diverged,
                    trajectory: Trajectory::default(),
                },
                Err(e) => return Err(e.into()),
            };
            let name = match rank {
                Some(r) => format!("cells/r{r}_seed{seed}"),
                None => format!("cells/full_seed{seed}"),
            };
            let cell_cfg = json!({"rank": rank, "seed": seed, "hidden_dim": cfg.hidden_dim, "train": train_cfg, "corpus": cfg.corpus});
            let dir = out.subdir(&name, &cell_cfg, Some(seed))?;
            dir.write("trajectory.csv", cell.trajectory.to_csv())?;
            cells.push(cell);
        }
    }

    let mut csv = String::from("head,rank,seed,final_train_loss,final_val_loss,baseline,status\n");
    for cell in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            if cell.rank.is_some() { "factored" } else { "full" },
            cell.rank.unwrap_or(cfg.hidden_dim),
            cell.seed,
            fmt_opt(cell.final_train_loss),
            fmt_opt(cell.final_val_loss),
            cell.rank.is_none(),
            if cell.status == CellStatus::Ok { "ok" } else { "diverged" }
        ));
    }
    out.write("final_loss.csv", csv)?;

    let factored_ok = |seed: Option<u64>| -> (Vec<f64>, Vec<f64>) {
        cells
            .iter()
            .filter(|c| c.rank.is_some() && seed.is_none_or(|s| s == c.seed))
            .filter_map(|c| Some((c.rank? as f64, c.final_val_loss?)))
            .unzip()
    };
    let (r_all, l_all) = factored_ok(None);
    let rho = spearman(&r_all, &l_all);
    let per_seed: Vec<(u64, Option<f64>)> = cfg
        .seeds
        .iter()
        .map(|&s| {
            let (r, l) = factored_ok(Some(s));
            (s, spearman(&r, &l))
        })
        .collect();

    let tokens_per_step = data.counts.total();
    let (lo, hi) = (cfg.ranks[0], *cfg.ranks.last().expect("nonempty"));
    let ratios: Vec<f64> = cfg
        .seeds
        .iter()
        .filter_map(|&s| {
            let find = |r: usize| cells.iter().find(|c| c.rank == Some(r) && c.seed == s && c.status == CellStatus::Ok);
            let (small, large) = (find(lo)?, find(hi)?);
            let target = small.final_val_loss?;
            let steps_small = small.trajectory.first_step_reaching(target)?;
            let steps_large = large.trajectory.first_step_reaching(target)?;
            (steps_large > 0).then(|| steps_small as f64 / steps_large as f64)
        })
        .collect();
    let token_budget_ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);

    let first_seed = cfg.seeds[0];
    let series: Vec<Series> = cells
        .iter()
        .filter(|c| c.seed == first_seed)
        .map(|c| {
            Series::new(
                match c.rank {
                    Some(r) => format!("r = {r}"),
                    None => "full".into(),
                },
                c.trajectory
                    .points
                    .iter()
                    .filter_map(|p| Some((p.step as f64, p.val_loss?)))
                    .collect(),
            )
        })
        .collect();
    out.write(
        "validation_loss.svg",
        line_plot(
            &PlotSpec {
                title: format!("validation loss by head rank, seed {first_seed}"),
                x_label: "step".into(),
                y_label: "validation loss".into(),
                log_x: false,
                log_y: false,
            },
            &series,
        ),
    )?;
    if let Some(c) = cells.iter().find(|c| c.seed == first_seed && c.rank == Some(lo)) {
        out.write("smallest_rank_loss.svg", trajectory_plot(&c.trajectory, &format!("r = {lo}"), false))?;
    }

    let outcome = BottleneckSweepOutcome {
        cells,
        spearman: rho,
        spearman_per_seed: per_seed,
        token_budget_ratio,
        tokens_per_step,
    };
    out.write_json(
        "summary.json",
        &json!({
            "spearman_rank_vs_val_loss": outcome.spearman,
            "spearman_per_seed": outcome.spearman_per_seed,
            "token_budget_ratio_smallest_vs_largest_rank": outcome.token_budget_ratio,
            "tokens_per_step": outcome.tokens_per_step,
            "contexts": c,
            "heldout_positions_dropped": data.dropped,
        }),
    )?;
    Ok(outcome)
}
