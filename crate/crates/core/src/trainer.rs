//! Training loop: per-epoch triplet resampling, mini-batch SGD with
//! momentum, the imitation schedule, model selection and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{sample_triplets, sample_triplets_excluding, Catalog, PairSet, Triplet};
use crate::distill::{distill_backward, distill_forward, AttentionParams, ScoreDistribution};
use crate::error::{Error, Result};
use crate::eval::{auc, score_triplets, StudentScorer};
use crate::params::Parameters;
use crate::rules::RuleSet;
use crate::student::{accumulate_student_backward, bpr_loss, student_forward, EncoderParams, StudentConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Rule distillation through the attentive teacher.
    Akd,
    /// Pairwise ranking loss only.
    Dbpr,
}

/// Which epoch's parameters [`train`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    BestValid,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_reg: f64,
    pub c: f64,
    pub rho_max: f64,
    pub rho_alpha: f64,
    pub seed: u64,
    pub negatives: usize,
    pub hidden_sizes: Vec<usize>,
    pub attention_hidden: usize,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Akd,
            epochs: 40,
            batch_size: 128,
            learning_rate: 0.05,
            momentum: 0.9,
            lambda_reg: 1e-3,
            c: 4.0,
            rho_max: 1.0,
            rho_alpha: 0.95,
            seed: 0,
            negatives: 3,
            hidden_sizes: vec![32],
            attention_hidden: 16,
            selection: Selection::BestValid,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::RejectedInput(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("C must be positive");
        }
        if !(0.0..=1.0).contains(&self.rho_max) {
            return bad("rho-max must lie in [0, 1]");
        }
        if !(self.rho_alpha > 0.0 && self.rho_alpha < 1.0) {
            return bad("rho-alpha must lie in (0, 1)");
        }
        if self.negatives == 0 {
            return bad("negatives per pair must be at least 1");
        }
        if self.attention_hidden == 0 {
            return bad("attention hidden size must be positive");
        }
        self.student().validate()
    }

    pub fn student(&self) -> StudentConfig {
        StudentConfig {
            hidden_sizes: self.hidden_sizes.clone(),
            lambda_reg: self.lambda_reg,
        }
    }

    /// The same run optimizing only the ranking loss.
    pub fn as_dbpr(&self) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Dbpr,
            ..self.clone()
        }
    }
}

/// `rho_max * (1 - rho_alpha^epoch)`, with `epoch` counted from zero.
pub fn rho_at(epoch: usize, rho_max: f64, rho_alpha: f64) -> f64 {
    let exp = i32::try_from(epoch).unwrap_or(i32::MAX);
    rho_max * (1.0 - rho_alpha.powi(exp))
}

/// One momentum step. Weight decay is applied to tensors flagged `decay`.
pub fn sgd_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    lr: f64,
    momentum: f64,
    lambda_reg: f64,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(velocity) {
        return Err(Error::Internal("parameter, gradient and velocity shapes differ".into()));
    }
    let grads = grads.tensors();
    for ((p, g), v) in params.tensors_mut().into_iter().zip(grads).zip(velocity.tensors_mut()) {
        let decay = if p.decay { lambda_reg } else { 0.0 };
        for ((w, &gw), vw) in p.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
            *vw = momentum * *vw + (gw + decay * *w);
            *w -= lr * *vw;
        }
    }
    Ok(())
}

/// Metrics for one finished epoch; `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_auc: f64,
    pub valid_auc: Option<f64>,
    pub rho: f64,
}

impl EpochRecord {
    /// Tab-separated `epoch loss train_auc valid_auc rho`; a missing
    /// validation AUC prints as `nan`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.6}",
            self.epoch,
            self.train_loss,
            self.train_auc,
            self.valid_auc.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}")),
            self.rho
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: EncoderParams,
    pub attention: AttentionParams,
    pub config: TrainConfig,
    /// Completed epochs when the parameters were taken.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub student_velocity: EncoderParams,
    pub attention_velocity: AttentionParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut params = records(&self.student);
        params.extend(records(&self.attention));
        let mut velocity = records(&self.student_velocity);
        velocity.extend(records(&self.attention_velocity));
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            dims: Dims {
                input_dim: self.student.input_dim(),
                hidden_sizes: self.student.hidden_sizes(),
                feature_dim: self.attention.feature_dim(),
                num_rules: self.attention.num_rules(),
                attention_hidden: self.attention.hidden(),
            },
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            params,
            velocity,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse(source, e.line(), e.to_string()))?;
        let found = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Schema("checkpoint has no version field".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Migration {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| Error::Schema(format!("{source}: {e}")))?;
        let d = &file.dims;
        let mut student = EncoderParams::zeros(d.input_dim, &d.hidden_sizes);
        let mut attention = AttentionParams::zeros(d.feature_dim, d.num_rules, d.attention_hidden);
        let mut student_velocity = student.clone();
        let mut attention_velocity = attention.clone();
        let mut params = file.params.iter();
        fill(&mut student, &mut params)?;
        fill(&mut attention, &mut params)?;
        if params.next().is_some() {
            return Err(Error::Schema("checkpoint has unexpected extra tensors".into()));
        }
        let mut velocity = file.velocity.iter();
        fill(&mut student_velocity, &mut velocity)?;
        fill(&mut attention_velocity, &mut velocity)?;
        if velocity.next().is_some() {
            return Err(Error::Schema("checkpoint has unexpected extra velocity tensors".into()));
        }
        Ok(Checkpoint {
            student,
            attention,
            config: file.config,
            epoch: file.epoch,
            history: file.history,
            student_velocity,
            attention_velocity,
        })
    }
}

fn records<P: Parameters>(p: &P) -> Vec<TensorRecord> {
    p.tensors()
        .into_iter()
        .map(|t| TensorRecord {
            name: t.name,
            shape: t.shape,
            data: t.data.to_vec(),
        })
        .collect()
}

fn fill<'a, P: Parameters>(target: &mut P, records: &mut impl Iterator<Item = &'a TensorRecord>) -> Result<()> {
    for t in target.tensors_mut() {
        let rec = records
            .next()
            .ok_or_else(|| Error::Schema(format!("checkpoint is missing tensor {}", t.name)))?;
        if rec.name != t.name {
            return Err(Error::Schema(format!("expected tensor {}, found {}", t.name, rec.name)));
        }
        if rec.data.len() != t.data.len() || rec.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Schema(format!(
                "tensor {} has {} values, dims call for {}",
                t.name,
                rec.data.len(),
                t.data.len()
            )));
        }
        t.data.copy_from_slice(&rec.data);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Dims {
    input_dim: usize,
    hidden_sizes: Vec<usize>,
    feature_dim: usize,
    num_rules: usize,
    attention_hidden: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    dims: Dims,
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    params: Vec<TensorRecord>,
    velocity: Vec<TensorRecord>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = ckpt.to_json()?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text, &path.display().to_string())
}

/// Both the selected and the final state of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
}

impl TrainOutcome {
    pub fn selected(self) -> Checkpoint {
        match self.last.config.selection {
            Selection::BestValid => self.best,
            Selection::Last => self.last,
        }
    }
}

/// Called after every epoch with its metrics and the current parameters.
pub type Observer<'a> = dyn FnMut(&EpochRecord, &EncoderParams, &AttentionParams) + 'a;

/// Trains from scratch and returns the checkpoint picked by `cfg.selection`.
pub fn train(
    catalog: &Catalog,
    train_pairs: &PairSet,
    valid_pairs: &PairSet,
    rules: &RuleSet,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    Ok(train_with_observer(catalog, train_pairs, valid_pairs, rules, cfg, &mut |_, _, _| {})?.selected())
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

const ATTENTION_SALT: u64 = 1;
const VALID_SALT: u64 = 2;

/// Fresh parameters for `cfg`; the attention network uses its own seed
/// stream so the student initialization does not depend on the mode.
pub fn initial_checkpoint(catalog: &Catalog, rules: &RuleSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let student = EncoderParams::init(catalog.feature_dim(), &cfg.student(), cfg.seed)?;
    let attention = AttentionParams::init(
        catalog.feature_dim(),
        rules.len(),
        cfg.attention_hidden,
        derive_seed(cfg.seed, ATTENTION_SALT),
    )?;
    Ok(Checkpoint {
        student_velocity: student.zeros_like(),
        attention_velocity: attention.zeros_like(),
        student,
        attention,
        config: cfg.clone(),
        epoch: 0,
        history: Vec::new(),
    })
}

pub fn train_with_observer(
    catalog: &Catalog,
    train_pairs: &PairSet,
    valid_pairs: &PairSet,
    rules: &RuleSet,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    let start = initial_checkpoint(catalog, rules, cfg)?;
    run_epochs(catalog, train_pairs, valid_pairs, rules, start, cfg.epochs, observer)
}

/// Continues `ckpt` for `extra_epochs` more epochs with its own config and
/// seed stream. The best-validation tracker starts from `ckpt` itself.
pub fn resume(
    catalog: &Catalog,
    train_pairs: &PairSet,
    valid_pairs: &PairSet,
    rules: &RuleSet,
    mut ckpt: Checkpoint,
    extra_epochs: usize,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    ckpt.config.validate()?;
    if ckpt.student.input_dim() != catalog.feature_dim() || ckpt.attention.num_rules() != rules.len() {
        return Err(Error::RejectedInput(
            "checkpoint dimensions do not match the catalog and rule set".into(),
        ));
    }
    ckpt.history.truncate(ckpt.epoch);
    run_epochs(catalog, train_pairs, valid_pairs, rules, ckpt, extra_epochs, observer)
}

fn run_epochs(
    catalog: &Catalog,
    train_pairs: &PairSet,
    valid_pairs: &PairSet,
    rules: &RuleSet,
    mut state: Checkpoint,
    extra_epochs: usize,
    observer: &mut Observer<'_>,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() {
        return Err(Error::RejectedInput("no training pairs".into()));
    }
    if catalog.num_tops() != train_pairs.num_tops() || catalog.num_bottoms() != train_pairs.num_bottoms() {
        return Err(Error::RejectedInput("training pairs do not belong to the catalog".into()));
    }
    let cfg = state.config.clone();
    let valid_triplets = if valid_pairs.is_empty() {
        Vec::new()
    } else {
        sample_triplets_excluding(
            catalog,
            valid_pairs,
            &train_pairs.union(valid_pairs),
            cfg.negatives,
            derive_seed(cfg.seed, VALID_SALT),
        )?
    };
    let mut best = state.clone();
    let mut best_auc = state.history.last().and_then(|r| r.valid_auc);

    for epoch in state.epoch..state.epoch + extra_epochs {
        let record = run_epoch(catalog, train_pairs, rules, &mut state, epoch, &valid_triplets)?;
        state.epoch = epoch + 1;
        state.history.push(record.clone());
        observer(&record, &state.student, &state.attention);
        let improved = match (record.valid_auc, best_auc) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best_auc = record.valid_auc;
            best = state.clone();
        }
    }
    best.history = state.history.clone();
    Ok(TrainOutcome { best, last: state })
}

fn run_epoch(
    catalog: &Catalog,
    train_pairs: &PairSet,
    rules: &RuleSet,
    state: &mut Checkpoint,
    epoch: usize,
    valid_triplets: &[Triplet],
) -> Result<EpochRecord> {
    let cfg = state.config.clone();
    // An empty rule set has nothing to distill; the run is plain ranking.
    let rho = match cfg.mode {
        TrainMode::Akd if !rules.is_empty() => rho_at(epoch, cfg.rho_max, cfg.rho_alpha),
        _ => 0.0,
    };
    let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
    let mut triplets = sample_triplets(catalog, train_pairs, cfg.negatives, epoch_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(1);
    triplets.shuffle(&mut rng);

    let mut grad_student = state.student.zeros_like();
    let mut grad_attention = state.attention.zeros_like();
    let mut loss_sum = 0.0;
    for (batch, chunk) in triplets.chunks(cfg.batch_size).enumerate() {
        grad_student.scale(0.0);
        grad_attention.scale(0.0);
        let mut batch_loss = 0.0;
        for &t in chunk {
            batch_loss += match cfg.mode {
                TrainMode::Akd => {
                    let fw = distill_forward(&state.student, &state.attention, catalog, rules, t, rho, cfg.c)?;
                    distill_backward(&state.student, &state.attention, &fw, &mut grad_student, &mut grad_attention)?;
                    fw.loss.value
                }
                TrainMode::Dbpr => dbpr_accumulate(&state.student, catalog, t, &mut grad_student)?,
            };
        }
        let n = chunk.len() as f64;
        grad_student.scale(1.0 / n);
        grad_attention.scale(1.0 / n);
        if !batch_loss.is_finite() || !grad_student.is_finite() || !grad_attention.is_finite() {
            return Err(Error::NonFinite {
                epoch: epoch + 1,
                batch: batch + 1,
            });
        }
        loss_sum += batch_loss;
        sgd_step(
            &mut state.student,
            &grad_student,
            &mut state.student_velocity,
            cfg.learning_rate,
            cfg.momentum,
            cfg.lambda_reg,
        )?;
        if cfg.mode == TrainMode::Akd {
            sgd_step(
                &mut state.attention,
                &grad_attention,
                &mut state.attention_velocity,
                cfg.learning_rate,
                cfg.momentum,
                0.0,
            )?;
        }
    }

    let scorer = StudentScorer::new(&state.student, catalog)?;
    let train_auc = auc(&score_triplets(&scorer, &triplets))?;
    let valid_auc = if valid_triplets.is_empty() {
        None
    } else {
        Some(auc(&score_triplets(&scorer, valid_triplets))?)
    };
    Ok(EpochRecord {
        epoch: epoch + 1,
        train_loss: loss_sum / triplets.len() as f64,
        train_auc,
        valid_auc,
        rho,
    })
}

/// Ranking-loss-only forward and backward for one triplet; returns the loss.
fn dbpr_accumulate(student: &EncoderParams, catalog: &Catalog, t: Triplet, grads: &mut EncoderParams) -> Result<f64> {
    let sf = student_forward(student, catalog, t)?;
    let p = ScoreDistribution::from_scores(sf.m_ij, sf.m_ik);
    let d_ij = -p.ik;
    accumulate_student_backward(student, &sf.cache, d_ij, -d_ij, grads)?;
    Ok(bpr_loss(sf.m_ij, sf.m_ik))
}
