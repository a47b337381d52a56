use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{forward, param_gradients, top1_from_probs, HeadGradients, HeadWeights, ModelError, ModelParams};
use crate::corpus::{batch_counts, ContextTable, Corpus, CorpusError, CountMatrix};
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step} (max |logit| = {max_abs_logit})")]
    NonFinite { step: usize, loss: f64, max_abs_logit: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    PlainGd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup then cosine decay to zero at the last step.
    Cosine { warmup_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Batching {
    Full,
    /// Sequences sampled without replacement within each epoch.
    Sgd { sequences_per_batch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub batching: Batching,
    pub seed: u64,
    pub init_scale: f64,
    pub eval_every: usize,
    pub update_hidden: bool,
    pub update_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-2,
            optimizer: OptimizerKind::adam(),
            schedule: Schedule::Constant,
            batching: Batching::Full,
            seed: 0,
            init_scale: 1.0,
            eval_every: 50,
            update_hidden: true,
            update_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be positive".into()));
        }
        if let Schedule::Cosine { warmup_steps } = self.schedule {
            if warmup_steps > self.steps {
                return Err(TrainError::Config(format!(
                    "warmup_steps {warmup_steps} exceeds steps {}",
                    self.steps
                )));
            }
        }
        if let Batching::Sgd { sequences_per_batch: 0 } = self.batching {
            return Err(TrainError::Config("sequences_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate used for update number `step` (0-based).
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    match config.schedule {
        Schedule::Constant => config.lr,
        Schedule::Cosine { warmup_steps } => {
            if step < warmup_steps {
                config.lr * (step + 1) as f64 / warmup_steps as f64
            } else {
                let span = (config.steps - warmup_steps).max(1) as f64;
                let progress = (step - warmup_steps) as f64 / span;
                0.5 * config.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub top1_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn final_point(&self) -> Option<&TrajectoryPoint> {
        self.points.last()
    }

    /// `step,train_loss,val_loss,top1_acc`; a missing validation loss is an
    /// empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss,top1_acc\n");
        for p in &self.points {
            let val = p.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", p.step, p.train_loss, val, p.top1_acc));
        }
        out
    }

    /// First recorded step whose validation (else training) loss is at most
    /// `target`.
    pub fn first_step_reaching(&self, target: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.val_loss.unwrap_or(p.train_loss) <= target)
            .map(|p| p.step)
    }
}

/// Counts to fit plus, for SGD, the sequences they came from.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub counts: &'a CountMatrix,
    pub sequences: Option<(&'a Corpus, &'a ContextTable)>,
    pub validation: Option<&'a CountMatrix>,
}

impl<'a> TrainingSet<'a> {
    pub fn full(counts: &'a CountMatrix) -> Self {
        Self {
            counts,
            sequences: None,
            validation: None,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Per-tensor optimizer state: slot 0 is `H`, then the head tensors.
struct Optimizer {
    kind: OptimizerKind,
    t: i32,
    slots: Vec<Moments>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let mut slots = vec![Moments::new(params.h.as_slice().len())];
        match &params.head {
            HeadWeights::Full { w } => slots.push(Moments::new(w.as_slice().len())),
            HeadWeights::Factored { a, b } => {
                slots.push(Moments::new(a.as_slice().len()));
                slots.push(Moments::new(b.as_slice().len()));
            }
        }
        Self { kind, t: 0, slots }
    }

    fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates `param[offset..offset+grad.len()]` from `grad`.
    fn apply(&mut self, slot: usize, param: &mut [f64], offset: usize, grad: &[f64], lr: f64) {
        let p = &mut param[offset..offset + grad.len()];
        match self.kind {
            OptimizerKind::PlainGd => {
                for (x, &g) in p.iter_mut().zip(grad) {
                    *x -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                let st = &mut self.slots[slot];
                let m = &mut st.m[offset..offset + grad.len()];
                let v = &mut st.v[offset..offset + grad.len()];
                for k in 0..grad.len() {
                    let g = grad[k];
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                    let m_hat = m[k] / bc1;
                    let v_hat = v[k] / bc2;
                    p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }

    /// Row-sparse update of `H`: only the listed rows move.
    fn apply_rows(&mut self, h: &mut Matrix, rows: &[usize], grad: &Matrix, lr: f64) {
        let d = h.cols();
        for (k, &r) in rows.iter().enumerate() {
            self.apply(0, h.as_mut_slice(), r * d, grad.row(k), lr);
        }
    }
}

fn check_finite(step: usize, loss: f64, max_abs_logit: f64) -> Result<(), TrainError> {
    if loss.is_finite() && max_abs_logit.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            step,
            loss,
            max_abs_logit,
        })
    }
}

/// Epoch-wise shuffled batches of sequence indices.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    size: usize,
}

impl BatchSampler {
    fn new(num_sequences: usize, size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0001),
            order: (0..num_sequences).collect(),
            cursor: num_sequences,
            size,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Runs `config.steps` optimizer updates starting from `params`.
///
/// The trajectory holds the full-data loss before updates
/// `0, eval_every, 2·eval_every, …` and after the last update. In SGD mode
/// only the rows of `H` present in the batch are touched.
pub fn train(
    set: &TrainingSet<'_>,
    config: &TrainConfig,
    mut params: ModelParams,
) -> Result<(ModelParams, Trajectory), TrainError> {
    config.validate()?;
    let mut opt = Optimizer::new(config.optimizer, &params);
    let mut sampler = match config.batching {
        Batching::Full => None,
        Batching::Sgd { sequences_per_batch } => {
            let (corpus, _) = set
                .sequences
                .ok_or_else(|| TrainError::Config("SGD batching needs the source corpus".into()))?;
            Some(BatchSampler::new(corpus.num_sequences(), sequences_per_batch, config.seed))
        }
    };
    let mut trajectory = Trajectory::default();

    let record = |params: &ModelParams, step: usize, trajectory: &mut Trajectory| -> Result<(), TrainError> {
        let fwd = forward(set.counts, params)?;
        check_finite(step, fwd.loss, fwd.max_abs_logit)?;
        let val_loss = match set.validation {
            Some(v) => Some(forward(v, params)?.loss),
            None => None,
        };
        trajectory.points.push(TrajectoryPoint {
            step,
            train_loss: fwd.loss,
            val_loss,
            top1_acc: top1_from_probs(set.counts, &fwd.probs).weighted,
        });
        Ok(())
    };

    for step in 0..config.steps {
        if step % config.eval_every == 0 {
            record(&params, step, &mut trajectory)?;
        }
        let batch = match (&mut sampler, set.sequences) {
            (Some(s), Some((corpus, table))) => Some(batch_counts(corpus, table, &s.next_batch())?),
            _ => None,
        };
        let counts = batch.as_ref().unwrap_or(set.counts);
        let grads = param_gradients(counts, &params)?;
        check_finite(step, grads.loss, 0.0)?;

        let lr = lr_at(config, step);
        opt.tick();
        if config.update_hidden {
            opt.apply_rows(&mut params.h, counts.context_ids(), &grads.h, lr);
        }
        if config.update_head {
            match (&mut params.head, &grads.head) {
                (HeadWeights::Full { w }, HeadGradients::Full { w: gw }) => {
                    opt.apply(1, w.as_mut_slice(), 0, gw.as_slice(), lr)
                }
                (HeadWeights::Factored { a, b }, HeadGradients::Factored { a: ga, b: gb }) => {
                    opt.apply(1, a.as_mut_slice(), 0, ga.as_slice(), lr);
                    opt.apply(2, b.as_mut_slice(), 0, gb.as_slice(), lr);
                }
                _ => unreachable!("gradient variant follows the head variant"),
            }
        }
    }
    if trajectory.points.last().is_none_or(|p| p.step != config.steps) {
        record(&params, config.steps, &mut trajectory)?;
    }
    Ok((params, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_counts, gen_spamlang, gen_zipf_bigram};
    use crate::matrix_lm::{logit_gradient, logits, loss};
    use crate::linalg::softmax_rows;

    fn gd(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            lr,
            optimizer: OptimizerKind::PlainGd,
            eval_every: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let c = gen_spamlang(4, 10, 4, 0).unwrap();
        let (_, n) = build_counts(&c, 1).unwrap();
        let p0 = ModelParams::init(n.rows(), 4, 2, None, 1.0, 1).unwrap();
        for opt in [OptimizerKind::PlainGd, OptimizerKind::adam()] {
            let cfg = TrainConfig {
                lr: 0.0,
                optimizer: opt,
                ..gd(30, 0.0)
            };
            let (p, traj) = train(&TrainingSet::full(&n), &cfg, p0.clone()).unwrap();
            assert_eq!(p, p0);
            let first = traj.points[0].train_loss;
            assert!(traj.points.iter().all(|q| q.train_loss == first));
        }
    }

    #[test]
    fn one_gd_step_on_head_matches_update_rule() {
        let c = gen_zipf_bigram(6, 1.0, 10, 5, 2).unwrap();
        let (_, n) = build_counts(&c, 1).unwrap();
        let p0 = ModelParams::init(n.rows(), 6, 3, None, 1.0, 4).unwrap();
        let eta = 0.3;
        let cfg = TrainConfig {
            update_hidden: false,
            ..gd(1, eta)
        };
        let (p1, _) = train(&TrainingSet::full(&n), &cfg, p0.clone()).unwrap();
        // W ← W − η·(P − Ñ)ᵀ diag(ω) H
        let g = logit_gradient(&n, &softmax_rows(&logits(&p0))).unwrap();
        let mut expected = p0.head.effective();
        expected.add_scaled(-eta, &g.t_matmul(&p0.h).unwrap()).unwrap();
        let diff = p1.head.effective().sub(&expected).unwrap();
        assert!(diff.max_abs() < 1e-12);
        assert_eq!(p1.h, p0.h);
    }

    #[test]
    fn gd_reaches_entropy_floor() {
        // two contexts, three tokens, D = V; a positive target so the floor
        // is attained at finite logits
        let n = CountMatrix::from_counts(3, vec![3, 1, 1, 1, 1, 2], vec![0, 1]).unwrap();
        let p0 = ModelParams::init(2, 3, 3, None, 1.0, 7).unwrap();
        let cfg = gd(5000, 2.0);
        let (p, traj) = train(&TrainingSet::full(&n), &cfg, p0).unwrap();
        let final_loss = loss(&n, &p).unwrap();
        assert!(final_loss - n.entropy_floor() < 1e-6, "{final_loss} vs {}", n.entropy_floor());
        assert_eq!(traj.final_point().unwrap().step, 5000);
        assert!(traj.points.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn whole_corpus_sgd_reproduces_full_batch() {
        let c = gen_zipf_bigram(8, 1.2, 12, 6, 3).unwrap();
        let (table, n) = build_counts(&c, 2).unwrap();
        let p0 = ModelParams::init(n.rows(), 8, 3, None, 1.0, 1).unwrap();
        let full = TrainConfig {
            optimizer: OptimizerKind::adam(),
            ..gd(40, 0.05)
        };
        let sgd = TrainConfig {
            batching: Batching::Sgd {
                sequences_per_batch: 12,
            },
            ..full.clone()
        };
        let set = TrainingSet {
            counts: &n,
            sequences: Some((&c, &table)),
            validation: None,
        };
        let (pa, ta) = train(&set, &full, p0.clone()).unwrap();
        let (pb, tb) = train(&set, &sgd, p0).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ta, tb);
    }

    #[test]
    fn sgd_leaves_unseen_rows_untouched() {
        let c = gen_spamlang(6, 12, 4, 5).unwrap();
        let (table, n) = build_counts(&c, 16).unwrap();
        let p0 = ModelParams::init(n.rows(), 6, 2, None, 1.0, 2).unwrap();
        let cfg = TrainConfig {
            batching: Batching::Sgd { sequences_per_batch: 1 },
            ..gd(1, 0.5)
        };
        let set = TrainingSet {
            counts: &n,
            sequences: Some((&c, &table)),
            validation: None,
        };
        let (p1, _) = train(&set, &cfg, p0.clone()).unwrap();
        let changed: Vec<usize> = (0..n.rows()).filter(|&i| p1.h.row(i) != p0.h.row(i)).collect();
        // one sequence of length 4 touches the empty context and 3 prefixes
        assert!(!changed.is_empty() && changed.len() <= 4);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let c = gen_zipf_bigram(10, 1.0, 20, 6, 8).unwrap();
        let (table, n) = build_counts(&c, 2).unwrap();
        let set = TrainingSet {
            counts: &n,
            sequences: Some((&c, &table)),
            validation: None,
        };
        let cfg = TrainConfig {
            batching: Batching::Sgd { sequences_per_batch: 5 },
            schedule: Schedule::Cosine { warmup_steps: 5 },
            ..TrainConfig::default()
        };
        let cfg = TrainConfig { steps: 60, ..cfg };
        let p0 = ModelParams::init(n.rows(), 10, 3, Some(2), 1.0, 3).unwrap();
        let a = train(&set, &cfg, p0.clone()).unwrap();
        let b = train(&set, &cfg, p0).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_csv(), b.1.to_csv());
    }

    #[test]
    fn divergence_is_reported() {
        let n = CountMatrix::from_counts(3, vec![3, 1, 0, 1, 1, 2], vec![0, 1]).unwrap();
        let p0 = ModelParams::init(2, 3, 2, None, 1.0, 7).unwrap();
        let err = train(&TrainingSet::full(&n), &gd(200, 1e300), p0).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            schedule: Schedule::Cosine { warmup_steps: 10 },
            steps: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        let cfg = TrainConfig {
            schedule: Schedule::Cosine { warmup_steps: 4 },
            steps: 10,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 0.25);
        assert_eq!(lr_at(&cfg, 4), 1.0);
        assert!(lr_at(&cfg, 9) < 0.1);
    }

    #[test]
    fn sgd_needs_corpus() {
        let n = CountMatrix::from_counts(3, vec![3, 1, 0], vec![0]).unwrap();
        let p0 = ModelParams::init(1, 3, 2, None, 1.0, 7).unwrap();
        let cfg = TrainConfig {
            batching: Batching::Sgd { sequences_per_batch: 2 },
            ..gd(2, 0.1)
        };
        assert!(matches!(
            train(&TrainingSet::full(&n), &cfg, p0),
            Err(TrainError::Config(_))
        ));
    }
}
