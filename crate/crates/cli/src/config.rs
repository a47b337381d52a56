//! Experiment configuration: JSON files layered over defaults, with
//! `--dotted.key value` overrides.

use std::path::{Path, PathBuf};

use bottleneck_core::corpus::{gen_spamlang, gen_zipf_bigram, Corpus};
use bottleneck_core::matrix_lm::{Batching, OptimizerKind, Schedule, TrainConfig};
use bottleneck_core::theory::{InstanceDims, SgdRankConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    Spamlang {
        vocab_size: usize,
        num_seqs: usize,
        seq_len: usize,
        seed: u64,
    },
    ZipfBigram {
        vocab_size: usize,
        exponent: f64,
        num_seqs: usize,
        seq_len: usize,
        seed: u64,
    },
    /// A corpus in the `#vocab V` text format.
    File { path: PathBuf },
}

impl CorpusSpec {
    pub fn load(&self) -> Result<Corpus, CliError> {
        Ok(match self {
            CorpusSpec::Spamlang {
                vocab_size,
                num_seqs,
                seq_len,
                seed,
            } => gen_spamlang(*vocab_size, *num_seqs, *seq_len, *seed)?,
            CorpusSpec::ZipfBigram {
                vocab_size,
                exponent,
                num_seqs,
                seq_len,
                seed,
            } => gen_zipf_bigram(*vocab_size, *exponent, *num_seqs, *seq_len, *seed)?,
            CorpusSpec::File { path } => {
                let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
                Corpus::read_text(std::io::BufReader::new(f))?
            }
        })
    }
}

fn default_zipf(vocab_size: usize) -> CorpusSpec {
    CorpusSpec::ZipfBigram {
        vocab_size,
        exponent: 1.1,
        num_seqs: 200,
        seq_len: 32,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCorpusConfig {
    pub corpus: CorpusSpec,
    /// Context truncation used for the statistics.
    pub max_context_len: usize,
    /// Corpus prefix sizes, in tokens, for the growth series.
    pub prefix_sizes: Vec<usize>,
    pub out_dir: PathBuf,
}

impl Default for GenCorpusConfig {
    fn default() -> Self {
        GenCorpusConfig {
            corpus: default_zipf(64),
            max_context_len: 2,
            prefix_sizes: vec![100, 300, 1000, 3000, 6400],
            out_dir: "out/gen-corpus".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub corpus: CorpusSpec,
    pub max_context_len: usize,
    pub hidden_dim: usize,
    /// Rank of a factored head `A·B`; `null` for a full head.
    pub head_rank: Option<usize>,
    /// Tail fraction of sequences held out for validation; 0 disables it.
    pub validation_fraction: f64,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            corpus: default_zipf(64),
            max_context_len: 1,
            hidden_dim: 8,
            head_rank: None,
            validation_fraction: 0.0,
            train: TrainConfig::default(),
            out_dir: "out/train".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub checkpoint: PathBuf,
    /// Must rebuild the counts the checkpoint was trained on.
    pub corpus: CorpusSpec,
    pub max_context_len: usize,
    pub validation_fraction: f64,
    pub token_counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            checkpoint: "out/train/checkpoint.bin".into(),
            corpus: default_zipf(64),
            max_context_len: 1,
            validation_fraction: 0.0,
            token_counts: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048],
            fractions: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1],
            seed: 0,
            out_dir: "out/diagnose".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialsConfig {
    pub trials: usize,
    pub dims: InstanceDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankBoundsConfig {
    pub trials: usize,
    pub dims: InstanceDims,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Top1Config {
    pub trials: usize,
    pub dims: InstanceDims,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub instances: usize,
    pub max_contexts: usize,
    pub max_vocab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    pub instances: usize,
    pub max_vocab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdVerifyConfig {
    pub corpora: usize,
    pub vocab_size: usize,
    pub exponent: f64,
    pub num_seqs: usize,
    pub seq_len: usize,
    pub check: SgdRankConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub gibbs: TrialsConfig,
    pub rank_bounds: RankBoundsConfig,
    pub top1: Top1Config,
    pub rank_lower_bound: PlantedConfig,
    pub update_residual: ResidualConfig,
    pub sgd_rank: SgdVerifyConfig,
    pub out_dir: PathBuf,
}

impl Default for TrialsConfig {
    fn default() -> Self {
        TrialsConfig {
            trials: 1000,
            dims: InstanceDims {
                max_contexts: 10,
                max_vocab: 12,
                max_hidden: 4,
            },
        }
    }
}

impl Default for RankBoundsConfig {
    fn default() -> Self {
        RankBoundsConfig {
            trials: 500,
            dims: InstanceDims {
                max_contexts: 24,
                max_vocab: 20,
                max_hidden: 6,
            },
            tol: 1e-6,
        }
    }
}

impl Default for Top1Config {
    fn default() -> Self {
        Top1Config {
            trials: 40,
            dims: InstanceDims {
                max_contexts: 64,
                max_vocab: 256,
                max_hidden: 2,
            },
            epsilon: 1e-3,
        }
    }
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            instances: 200,
            max_contexts: 64,
            max_vocab: 32,
        }
    }
}

impl Default for SgdVerifyConfig {
    fn default() -> Self {
        SgdVerifyConfig {
            corpora: 50,
            vocab_size: 32,
            exponent: 1.1,
            num_seqs: 40,
            seq_len: 24,
            check: SgdRankConfig::default(),
        }
    }
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            gibbs: TrialsConfig::default(),
            rank_bounds: RankBoundsConfig::default(),
            top1: Top1Config::default(),
            rank_lower_bound: PlantedConfig::default(),
            update_residual: ResidualConfig {
                instances: 100,
                max_vocab: 16,
            },
            sgd_rank: SgdVerifyConfig::default(),
            out_dir: "out/verify".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpamlangSweepConfig {
    pub vocab_sizes: Vec<usize>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub hidden_dim: usize,
    pub num_seqs: usize,
    pub seq_len: usize,
    pub max_context_len: usize,
    /// `lr` and `seed` are set per cell.
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for SpamlangSweepConfig {
    fn default() -> Self {
        SpamlangSweepConfig {
            vocab_sizes: vec![16, 64, 256, 1024],
            lrs: vec![1e-3, 3e-3, 1e-2, 3e-2],
            seeds: vec![0, 1, 2],
            hidden_dim: 8,
            num_seqs: 256,
            // the empty first context costs ln V / seq_len; 64 keeps V = 16 under 0.05
            seq_len: 64,
            max_context_len: 1,
            train: TrainConfig {
                steps: 2000,
                eval_every: 100,
                ..TrainConfig::default()
            },
            out_dir: "out/spamlang-sweep".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckSweepConfig {
    pub corpus: CorpusSpec,
    pub validation_fraction: f64,
    pub max_context_len: usize,
    pub hidden_dim: usize,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Also train a full `V×D` head per seed as the baseline row.
    pub include_full_head: bool,
    /// `seed` is set per cell.
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for BottleneckSweepConfig {
    fn default() -> Self {
        BottleneckSweepConfig {
            corpus: CorpusSpec::ZipfBigram {
                vocab_size: 512,
                exponent: 1.1,
                num_seqs: 2000,
                seq_len: 128,
                seed: 0,
            },
            validation_fraction: 0.1,
            max_context_len: 1,
            hidden_dim: 32,
            ranks: vec![2, 4, 8, 16, 32],
            seeds: vec![0, 1, 2],
            include_full_head: true,
            train: TrainConfig {
                steps: 1000,
                lr: 1e-2,
                optimizer: OptimizerKind::adam(),
                schedule: Schedule::Cosine { warmup_steps: 50 },
                batching: Batching::Full,
                eval_every: 50,
                ..TrainConfig::default()
            },
            out_dir: "out/bottleneck-sweep".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Directory scanned recursively for known CSV files.
    pub input_dir: PathBuf,
    pub log_scale: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            input_dir: "out".into(),
            log_scale: false,
        }
    }
}

/// Layers `patch` over `base`. Objects merge key by key unless their `kind`
/// tags differ, in which case the patch replaces the base object.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let kind_changed = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Value of a command-line override: JSON if it parses, else a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses `--a.b value` and `--a.b=value` pairs into `(path, value)`.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("expected --key, got `{arg}`")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Config(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Config(format!("bad override key `{key}`")));
        }
        out.push((key, parse_value(&raw)));
    }
    Ok(out)
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one part")
}

/// Defaults, then the config file, then overrides, then typed parsing.
pub fn resolve<T>(file: Option<&Path>, overrides: &[String]) -> Result<T, CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, patch);
    }
    for (key, v) in parse_overrides(overrides)? {
        set_path(&mut value, &key, v)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

pub fn check_nonempty<T>(name: &str, xs: &[T]) -> Result<(), CliError> {
    if xs.is_empty() {
        return Err(CliError::Config(format!("grid `{name}` is empty")));
    }
    Ok(())
}

pub fn check_fraction(name: &str, x: f64) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&x) {
        return Err(CliError::Config(format!("{name} must lie in [0, 1), got {x}")));
    }
    Ok(())
}
