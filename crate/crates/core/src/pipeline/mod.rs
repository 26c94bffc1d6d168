//! Teacher training, student distillation, evaluation and bias diagnostics.

mod ablation;
mod run;

pub use ablation::{cell_dir_name, run_grid, two_sweep, AblationRow, GridCell, TwoSweep};
pub use run::{runs_root, RunDir, RUNS_DIR_ENV};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::Dataset;
use crate::distributions::{batch_group_stats, inter_group_from_logits, BatchGroupStats};
use crate::error::{Error, Result};
use crate::grouping::{Group, GroupPartition, GroupPolicy};
use crate::losses::{
    ce_loss, decomposed_kd, kd_grad, kd_loss, ltkd_grad, ltkd_loss, objective_grad, DistillWeights,
    GroupObjective, LossBreakdown, Temperature,
};
use crate::math::Matrix;
use crate::model::{Mlp, Sgd, SgdConfig};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Vanilla KL distillation.
    Kd,
    /// Rebalanced inter-group term plus uniformly weighted intra-group terms.
    Ltkd,
    /// Vanilla KD written as its inter + teacher-weighted intra decomposition.
    Decomposed,
}

impl Method {
    /// Conventional temperature for the method: 4 for vanilla KD, 1 otherwise.
    pub fn default_tau(self) -> f64 {
        match self {
            Method::Kd => 4.0,
            Method::Ltkd | Method::Decomposed => 1.0,
        }
    }
}

/// Step decay: multiply the learning rate by `factor` at each epoch fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let frac = epoch as f64 / epochs.max(1) as f64;
        let passed = self.milestones.iter().filter(|&&m| frac >= m).count();
        base * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

/// Full contract of a distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Multiply distillation terms by `τ²` when `τ ≠ 1`.
    pub tau_squared: bool,
    pub ce_weight: f64,
    pub group_policy: GroupPolicy,
    pub student_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl DistillConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            alpha: 6.0,
            beta: 6.0,
            tau: method.default_tau(),
            tau_squared: true,
            ce_weight: 1.0,
            group_policy: GroupPolicy::RankThirds,
            student_hidden: vec![32],
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tau", self.tau),
            ("ce_weight", self.ce_weight),
            ("lr", self.sgd.lr),
            ("momentum", self.sgd.momentum),
            ("weight_decay", self.sgd.weight_decay),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} is not finite")));
            }
        }
        if self.method == Method::Ltkd {
            DistillWeights::new(self.alpha, self.beta)?;
        }
        if self.ce_weight < 0.0 {
            return Err(Error::Config("ce_weight must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.temperature().map(|_| ())?;
        self.group_policy.validate()
    }

    pub fn temperature(&self) -> Result<Temperature> {
        if self.tau_squared {
            Temperature::new(self.tau)
        } else {
            Temperature::unscaled(self.tau)
        }
    }

    pub fn weights(&self) -> DistillWeights {
        DistillWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// Accuracies in percent on a balanced test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: f64,
    pub medium: f64,
    pub tail: f64,
    pub all: f64,
    pub per_class: Vec<f64>,
    pub samples_per_class: Vec<usize>,
}

impl EvalReport {
    pub fn group(&self, g: Group) -> f64 {
        match g {
            Group::Head => self.head,
            Group::Medium => self.medium,
            Group::Tail => self.tail,
        }
    }

    pub fn summary_json(&self) -> Value {
        json!({ "head": self.head, "medium": self.medium, "tail": self.tail, "all": self.all })
    }
}

/// Per-class, per-group and overall accuracy. Group accuracy is the mean of
/// its classes' accuracies; `all` is the unweighted class mean.
pub fn evaluate(model: &Mlp, test: &Dataset, partition: &GroupPartition) -> Result<EvalReport> {
    let predictions = model.predict(&test.features)?;
    evaluate_predictions(&predictions, &test.labels, partition)
}

pub fn evaluate_predictions(
    predictions: &[usize],
    labels: &[usize],
    partition: &GroupPartition,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let c = partition.num_classes();
    let mut correct = vec![0usize; c];
    let mut seen = vec![0usize; c];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= c {
            return Err(Error::Input(format!("label {y} out of range for {c} classes")));
        }
        seen[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    if let Some(k) = seen.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {k} has no test samples")));
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&seen)
        .map(|(&k, &n)| 100.0 * k as f64 / n as f64)
        .collect();
    let mean_over = |classes: &[usize]| classes.iter().map(|&i| per_class[i]).sum::<f64>() / classes.len() as f64;
    Ok(EvalReport {
        head: mean_over(partition.group(Group::Head)),
        medium: mean_over(partition.group(Group::Medium)),
        tail: mean_over(partition.group(Group::Tail)),
        all: per_class.iter().sum::<f64>() / c as f64,
        per_class,
        samples_per_class: seen,
    })
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_finite(value: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{what} became {value} at epoch {epoch}, batch {batch}"
        )))
    }
}

/// One line of `metrics.jsonl` for a teacher run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub accuracy: Value,
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: Mlp,
    pub report: EvalReport,
    pub history: Vec<TeacherEpoch>,
}

/// Trains a teacher with plain cross-entropy on the (imbalanced) train split.
pub fn train_teacher(
    train: &Dataset,
    test: &Dataset,
    partition: &GroupPartition,
    cfg: &TeacherConfig,
) -> Result<TrainedTeacher> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mut dims = vec![train.dim()];
    dims.extend(&cfg.hidden);
    dims.push(train.num_classes);
    let mut model = Mlp::new(&dims, &mut stream(cfg.seed, Stream::TeacherInit))?;
    let mut shuffle = stream(cfg.seed, Stream::TeacherShuffle);
    let mut sgd = Sgd::new(cfg.sgd);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        sgd.set_lr(cfg.schedule.lr_at(cfg.sgd.lr, epoch, cfg.epochs));
        let mut ce_sum = 0.0;
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut shuffle);
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch(idx);
            let (loss, grads) = model.loss_and_grads(&x, |z| ce_loss(z, &y, None))?;
            check_finite(loss, "teacher loss", epoch, b)?;
            sgd.step(model.params_mut(), &grads)?;
            ce_sum += loss;
        }
        let report = evaluate(&model, test, partition)?;
        history.push(TeacherEpoch {
            epoch,
            ce: ce_sum / batches.len() as f64,
            accuracy: report.summary_json(),
        });
    }
    let report = evaluate(&model, test, partition)?;
    Ok(TrainedTeacher { model, report, history })
}

/// Student network for a distillation config.
pub fn init_student(cfg: &DistillConfig, input_dim: usize, num_classes: usize) -> Result<Mlp> {
    let mut dims = vec![input_dim];
    dims.extend(&cfg.student_hidden);
    dims.push(num_classes);
    Mlp::new(&dims, &mut stream(cfg.seed, Stream::StudentInit))
}

/// One line of `metrics.jsonl` for a distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillEpoch {
    pub epoch: usize,
    /// Batch-averaged distillation breakdown.
    pub loss: LossBreakdown,
    pub ce: f64,
    /// `ce_weight · ce + loss.total`, batch-averaged.
    pub objective: f64,
    pub accuracy: EvalReport,
    /// Largest `|kd − (inter + Σ intra)|` over the epoch's batches, for the
    /// decomposed method.
    pub identity_residual: Option<f64>,
}

impl DistillEpoch {
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "epoch": self.epoch,
            "loss": self.loss.to_json(),
            "ce": self.ce,
            "objective": self.objective,
            "accuracy": self.accuracy.summary_json(),
        });
        if let Some(r) = self.identity_residual {
            v["identity_residual"] = json!(r);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Mlp,
    pub report: EvalReport,
    pub epochs: Vec<DistillEpoch>,
    /// Per-batch teacher group sums and scales, in training order.
    pub batch_stats: Vec<BatchGroupStats>,
}

impl DistillOutcome {
    pub fn batch_stats_csv(&self) -> String {
        stats_csv(&self.batch_stats)
    }
}

fn stats_csv(stats: &[BatchGroupStats]) -> String {
    let mut out = String::from(BatchGroupStats::CSV_HEADER);
    out.push('\n');
    for (i, s) in stats.iter().enumerate() {
        out.push_str(&s.csv_row(i));
        out.push('\n');
    }
    out
}

struct BatchLoss {
    breakdown: LossBreakdown,
    ce: f64,
    residual: Option<f64>,
}

/// Distills `teacher` into `student`. Per batch: teacher logits (no gradient),
/// batch group stats from the teacher's inter-group masses, the configured
/// loss plus weighted cross-entropy, one SGD step.
pub fn distill(
    teacher: &Mlp,
    student: Mlp,
    train: &Dataset,
    test: &Dataset,
    partition: &GroupPartition,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if teacher.num_classes() != train.num_classes || student.num_classes() != train.num_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes, student {}, data {}",
            teacher.num_classes(),
            student.num_classes(),
            train.num_classes
        )));
    }
    if partition.num_classes() != train.num_classes {
        return Err(Error::Config("partition does not match the dataset".into()));
    }
    let temp = cfg.temperature()?;
    let groups = partition.groups();
    let teacher_fingerprint = teacher.fingerprint();

    let mut student = student;
    let mut shuffle = stream(cfg.seed, Stream::StudentShuffle);
    let mut sgd = Sgd::new(cfg.sgd);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut all_stats = Vec::new();

    for epoch in 0..cfg.epochs {
        sgd.set_lr(cfg.schedule.lr_at(cfg.sgd.lr, epoch, cfg.epochs));
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut shuffle);
        let mut sum = LossBreakdown::zero(groups.num_groups());
        let mut ce_sum = 0.0;
        let mut residual: Option<f64> = None;

        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch(idx);
            let zt = teacher.forward(&x)?;
            let inter: Vec<Vec<f64>> = zt
                .row_iter()
                .map(|row| inter_group_from_logits(row, groups, temp.tau()))
                .collect::<Result<_>>()?;
            let stats = batch_group_stats(&inter)?;

            let mut step_loss: Option<BatchLoss> = None;
            let (objective, grads) = student.loss_and_grads(&x, |zs| {
                let (ce, ce_g) = ce_loss(zs, &y, None)?;
                let (breakdown, dist_g, residual) = distill_term(cfg, &zt, zs, partition, &stats, temp)?;
                let mut g = dist_g;
                g.axpy(cfg.ce_weight, &ce_g)?;
                let value = cfg.ce_weight * ce + breakdown.total;
                step_loss = Some(BatchLoss { breakdown, ce, residual });
                Ok((value, g))
            })?;
            check_finite(objective, "student objective", epoch, b)?;
            sgd.step(student.params_mut(), &grads)?;

            let step = step_loss.expect("loss closure ran");
            sum.total += step.breakdown.total;
            sum.inter += step.breakdown.inter;
            for (acc, v) in sum.intra.iter_mut().zip(&step.breakdown.intra) {
                *acc += v;
            }
            sum.weights_used = step.breakdown.weights_used;
            ce_sum += step.ce;
            if let Some(r) = step.residual {
                residual = Some(residual.map_or(r, |m: f64| m.max(r)));
            }
            all_stats.push(stats);
        }

        let n = batches.len() as f64;
        sum.total /= n;
        sum.inter /= n;
        sum.intra.iter_mut().for_each(|v| *v /= n);
        let ce = ce_sum / n;
        epochs.push(DistillEpoch {
            epoch,
            objective: cfg.ce_weight * ce + sum.total,
            loss: sum,
            ce,
            accuracy: evaluate(&student, test, partition)?,
            identity_residual: residual,
        });
    }

    if teacher.fingerprint() != teacher_fingerprint {
        return Err(Error::Contract("teacher parameters changed during distillation".into()));
    }
    let report = evaluate(&student, test, partition)?;
    Ok(DistillOutcome {
        student,
        report,
        epochs,
        batch_stats: all_stats,
    })
}

/// Cross-entropy-only training of a student under the same seed streams,
/// schedule and batch order as [`distill`]: the no-distillation baseline.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub student: Mlp,
    pub report: EvalReport,
    /// Batch-averaged cross-entropy per epoch.
    pub ce: Vec<f64>,
}

pub fn train_baseline(
    student: Mlp,
    train: &Dataset,
    test: &Dataset,
    partition: &GroupPartition,
    cfg: &DistillConfig,
) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let mut student = student;
    let mut shuffle = stream(cfg.seed, Stream::StudentShuffle);
    let mut sgd = Sgd::new(cfg.sgd);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        sgd.set_lr(cfg.schedule.lr_at(cfg.sgd.lr, epoch, cfg.epochs));
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut shuffle);
        let mut ce_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch(idx);
            let (loss, grads) = student.loss_and_grads(&x, |z| ce_loss(z, &y, None))?;
            check_finite(loss, "baseline loss", epoch, b)?;
            sgd.step(student.params_mut(), &grads)?;
            ce_sum += loss;
        }
        history.push(ce_sum / batches.len() as f64);
    }
    let report = evaluate(&student, test, partition)?;
    Ok(BaselineOutcome {
        student,
        report,
        ce: history,
    })
}

type TermOutput = (LossBreakdown, Matrix, Option<f64>);

fn distill_term(
    cfg: &DistillConfig,
    zt: &Matrix,
    zs: &Matrix,
    partition: &GroupPartition,
    stats: &BatchGroupStats,
    temp: Temperature,
) -> Result<TermOutput> {
    let groups = partition.groups();
    match cfg.method {
        Method::Kd => {
            // the decomposition equals vanilla KD, so it doubles as the log breakdown
            let mut breakdown = decomposed_kd(zt, zs, groups, temp)?;
            breakdown.total = kd_loss(zt, zs, temp)?;
            Ok((breakdown, kd_grad(zt, zs, temp)?, None))
        }
        Method::Ltkd => {
            let w = cfg.weights();
            let breakdown = ltkd_loss(zt, zs, groups, stats, w, temp)?;
            Ok((breakdown, ltkd_grad(zt, zs, groups, stats, w, temp)?, None))
        }
        Method::Decomposed => {
            let breakdown = decomposed_kd(zt, zs, groups, temp)?;
            let grad = objective_grad(zt, zs, groups, &GroupObjective::DECOMPOSED_KD, None, temp)?;
            let residual = (kd_loss(zt, zs, temp)? - breakdown.total).abs();
            Ok((breakdown, grad, Some(residual)))
        }
    }
}

/// Per-batch teacher group sums over shuffled batches of `data`.
pub fn batch_bias_trace(
    teacher: &Mlp,
    data: &Dataset,
    partition: &GroupPartition,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BatchGroupStats>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = stream(seed, Stream::BiasTrace);
    shuffled_batches(data.len(), batch_size, &mut rng)
        .iter()
        .map(|idx| {
            let (x, _) = data.batch(idx);
            let zt = teacher.forward(&x)?;
            let inter: Vec<Vec<f64>> = zt
                .row_iter()
                .map(|row| inter_group_from_logits(row, partition.groups(), 1.0))
                .collect::<Result<_>>()?;
            batch_group_stats(&inter)
        })
        .collect()
}

pub fn bias_trace_csv(trace: &[BatchGroupStats]) -> String {
    stats_csv(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::build_partition;

    #[test]
    fn perfect_and_constant_predictors() {
        let p = build_partition(&[100, 50, 10, 5, 2, 1], GroupPolicy::RankThirds).unwrap();
        let labels: Vec<usize> = (0..6).flat_map(|c| [c; 4]).collect();
        let r = evaluate_predictions(&labels, &labels, &p).unwrap();
        assert_eq!((r.head, r.medium, r.tail, r.all), (100.0, 100.0, 100.0, 100.0));

        let head_only = vec![0; labels.len()];
        let r = evaluate_predictions(&head_only, &labels, &p).unwrap();
        assert_eq!(r.tail, 0.0);
        assert_eq!(r.head, 50.0);
        assert!((r.all - 100.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn group_accuracy_is_mean_of_member_classes() {
        let p = build_partition(&[9, 8, 7, 6, 5, 4], GroupPolicy::RankThirds).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5];
        let preds = vec![0, 0, 1, 0, 2, 2, 2, 2, 4, 0, 0, 0];
        let r = evaluate_predictions(&preds, &labels, &p).unwrap();
        assert_eq!(r.per_class, vec![100.0, 50.0, 100.0, 0.0, 50.0, 0.0]);
        assert_eq!(r.head, 75.0);
        assert_eq!(r.medium, 50.0);
        assert_eq!(r.tail, 25.0);
        assert_eq!(r.all, 50.0);
    }

    #[test]
    fn missing_test_class_rejected() {
        let p = build_partition(&[3, 2, 1], GroupPolicy::RankThirds).unwrap();
        assert!(evaluate_predictions(&[0, 1], &[0, 1], &p).is_err());
    }

    #[test]
    fn lr_schedule_steps() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0.1, 0, 10), 0.1);
        assert!((s.lr_at(0.1, 5, 10) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(0.1, 8, 10) - 0.001).abs() < 1e-15);
        assert_eq!(LrSchedule::constant().lr_at(0.1, 9, 10), 0.1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DistillConfig::new(Method::Ltkd);
        assert!(cfg.validate().is_ok());
        cfg.alpha = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = DistillConfig::new(Method::Kd);
        assert_eq!(cfg.tau, 4.0);
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = DistillConfig::new(Method::Decomposed);
        cfg.ce_weight = f64::NAN;
        assert!(cfg.validate().is_err());
    }
}
