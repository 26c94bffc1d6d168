//! KL-based distillation objectives over logit matrices.
//!
//! All KL terms are forward `KL(teacher ‖ student)`, evaluated in log space
//! from logits. Batch losses are the arithmetic mean over rows. When the
//! temperature differs from 1 the distillation terms are multiplied by `τ²`
//! unless the [`Temperature`] was built with [`Temperature::unscaled`].

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::distributions::{logsumexp, rebalance_inter, BatchGroupStats, MASS_FLOOR};
use crate::error::{Error, Result};
use crate::grouping::{ClassGroups, Group};
use crate::math::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    tau: f64,
    scale_loss: bool,
}

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { tau, scale_loss: true })
    }

    /// Same temperature without the `τ²` loss multiplier.
    pub fn unscaled(tau: f64) -> Result<Self> {
        Ok(Self {
            scale_loss: false,
            ..Self::new(tau)?
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn loss_scale(&self) -> f64 {
        if self.scale_loss && self.tau != 1.0 {
            self.tau * self.tau
        } else {
            1.0
        }
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self { tau: 1.0, scale_loss: true }
    }
}

/// Inter / intra weights of the long-tailed objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl DistillWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self { alpha: 6.0, beta: 6.0 }
    }
}

/// How each group's intra-group KL is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntraWeighting {
    /// Teacher inter-group mass `p^T_G`; reproduces vanilla KD exactly.
    TeacherMass,
    /// One constant for every group.
    Uniform(f64),
}

/// `alpha · KL(target_G ‖ p^S_G) + Σ_G w_G · KL(p̃^T_G ‖ p̃^S_G)`, where the
/// inter target is the teacher's group masses, optionally rebalanced with
/// per-batch scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupObjective {
    pub alpha: f64,
    pub intra: IntraWeighting,
}

impl GroupObjective {
    /// Teacher-weighted decomposition of vanilla KD.
    pub const DECOMPOSED_KD: GroupObjective = GroupObjective {
        alpha: 1.0,
        intra: IntraWeighting::TeacherMass,
    };

    pub fn ltkd(w: DistillWeights) -> Self {
        Self {
            alpha: w.alpha,
            intra: IntraWeighting::Uniform(w.beta),
        }
    }
}

/// Unweighted per-sample KL pieces of the group decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTerms {
    /// `KL(target_G ‖ p^S_G)`.
    pub inter_kl: f64,
    /// `KL(p̃^T_G ‖ p̃^S_G)` per group.
    pub intra_kl: Vec<f64>,
    /// Raw teacher masses `p^T_G`.
    pub teacher_inter: Vec<f64>,
    /// Inter-group target actually used (raw or rebalanced).
    pub target_inter: Vec<f64>,
}

impl SampleTerms {
    /// `inter + Σ_G p^T_G · intra_G`, the decomposed form of vanilla KD.
    pub fn decomposed_total(&self) -> f64 {
        self.inter_kl
            + self
                .teacher_inter
                .iter()
                .zip(&self.intra_kl)
                .map(|(w, k)| w * k)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightsUsed {
    /// Batch-mean teacher masses per group.
    TeacherMass(Vec<f64>),
    Fixed { alpha: f64, beta: f64 },
}

/// Batch loss split into inter and per-group intra contributions.
///
/// `inter` and `intra` are already weighted, temperature-scaled and averaged
/// over the batch, so `total = inter + Σ intra`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub inter: f64,
    pub intra: Vec<f64>,
    pub weights_used: WeightsUsed,
}

impl LossBreakdown {
    pub fn zero(num_groups: usize) -> Self {
        Self {
            total: 0.0,
            inter: 0.0,
            intra: vec![0.0; num_groups],
            weights_used: WeightsUsed::Fixed { alpha: 0.0, beta: 0.0 },
        }
    }

    /// `{"total":…, "inter":…, "intra":{"head":…,"medium":…,"tail":…}}`.
    pub fn to_json(&self) -> Value {
        let intra: serde_json::Map<String, Value> = self
            .intra
            .iter()
            .enumerate()
            .map(|(g, v)| (group_key(g, self.intra.len()), json!(v)))
            .collect();
        json!({ "total": self.total, "inter": self.inter, "intra": intra })
    }
}

fn group_key(g: usize, k: usize) -> String {
    if k == 3 {
        Group::ALL[g].name().to_string()
    } else {
        format!("g{g}")
    }
}

impl Serialize for LossBreakdown {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

/// `KL(p ‖ q)` over probability vectors. `q` is floored at 1e-12 and terms with
/// `p_i = 0` contribute nothing.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("kl of lengths {} and {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(MASS_FLOOR).ln()))
        .sum())
}

/// Log-space view of one row of logits at a temperature.
struct LogView {
    /// `log p_i`
    log_p: Vec<f64>,
    /// `log p_G`
    log_inter: Vec<f64>,
    /// `log p̃_{G(i),i}`, indexed by class
    log_intra: Vec<f64>,
}

impl LogView {
    fn new(z: &[f64], groups: &ClassGroups, tau: f64) -> Self {
        let u: Vec<f64> = z.iter().map(|&v| v / tau).collect();
        let lse = logsumexp(&u);
        let log_p = u.iter().map(|&v| v - lse).collect();
        let mut log_inter = Vec::with_capacity(groups.num_groups());
        let mut log_intra = vec![0.0; u.len()];
        for members in groups.iter() {
            let lse_g = members.iter().map(|&i| u[i]).collect::<Vec<_>>();
            let lse_g = logsumexp(&lse_g);
            log_inter.push(lse_g - lse);
            for &i in members {
                log_intra[i] = u[i] - lse_g;
            }
        }
        Self { log_p, log_inter, log_intra }
    }
}

fn kl_log(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum()
}

fn check_pair(zt: &Matrix, zs: &Matrix) -> Result<()> {
    if zt.shape() != zs.shape() {
        return Err(Error::shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            zt.shape(),
            zs.shape()
        )));
    }
    if zt.rows() == 0 || zt.cols() == 0 {
        return Err(Error::Input("empty logit batch".into()));
    }
    if !zt.is_finite() || !zs.is_finite() {
        return Err(Error::Input("non-finite logits".into()));
    }
    Ok(())
}

fn check_groups(zt: &Matrix, groups: &ClassGroups) -> Result<()> {
    if zt.cols() != groups.num_classes() {
        return Err(Error::shape(format!(
            "{} logit columns but partition covers {} classes",
            zt.cols(),
            groups.num_classes()
        )));
    }
    Ok(())
}

/// Unscaled `KL(softmax(z_t/τ) ‖ softmax(z_s/τ))` for one sample.
pub fn kd_sample(zt: &[f64], zs: &[f64], tau: f64) -> f64 {
    let lt = log_softmax_row(zt, tau);
    let ls = log_softmax_row(zs, tau);
    kl_log(&lt, &ls)
}

fn log_softmax_row(z: &[f64], tau: f64) -> Vec<f64> {
    let u: Vec<f64> = z.iter().map(|&v| v / tau).collect();
    let lse = logsumexp(&u);
    u.into_iter().map(|v| v - lse).collect()
}

/// Vanilla KD: batch mean of `KL(p^T ‖ p^S)` at temperature `τ`, times the
/// temperature's loss scale.
pub fn kd_loss(zt: &Matrix, zs: &Matrix, temp: Temperature) -> Result<f64> {
    check_pair(zt, zs)?;
    let tau = temp.tau();
    let sum: f64 = zt.row_iter().zip(zs.row_iter()).map(|(t, s)| kd_sample(t, s, tau)).sum();
    Ok(temp.loss_scale() * sum / zt.rows() as f64)
}

/// Gradient of [`kd_loss`] with respect to the student logits.
pub fn kd_grad(zt: &Matrix, zs: &Matrix, temp: Temperature) -> Result<Matrix> {
    check_pair(zt, zs)?;
    let tau = temp.tau();
    let c = temp.loss_scale() / (tau * zt.rows() as f64);
    let mut out = Matrix::zeros(zt.rows(), zt.cols());
    for i in 0..zt.rows() {
        let lt = log_softmax_row(zt.row(i), tau);
        let ls = log_softmax_row(zs.row(i), tau);
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(ls.iter().zip(&lt)) {
            *o = c * (a.exp() - b.exp());
        }
    }
    Ok(out)
}

/// Per-sample decomposition pieces. With `stats`, the inter target is the
/// rebalanced teacher vector; otherwise the raw teacher masses.
pub fn sample_terms(
    zt: &[f64],
    zs: &[f64],
    groups: &ClassGroups,
    tau: f64,
    stats: Option<&BatchGroupStats>,
) -> Result<SampleTerms> {
    if zt.len() != zs.len() || zt.len() != groups.num_classes() {
        return Err(Error::shape(format!(
            "rows of length {} and {} for {} classes",
            zt.len(),
            zs.len(),
            groups.num_classes()
        )));
    }
    let t = LogView::new(zt, groups, tau);
    let s = LogView::new(zs, groups, tau);
    Ok(terms_from_views(&t, &s, groups, stats)?.0)
}

fn terms_from_views(
    t: &LogView,
    s: &LogView,
    groups: &ClassGroups,
    stats: Option<&BatchGroupStats>,
) -> Result<(SampleTerms, Vec<f64>)> {
    let teacher_inter: Vec<f64> = t.log_inter.iter().map(|v| v.exp()).collect();
    let (target_inter, log_target) = match stats {
        None => (teacher_inter.clone(), t.log_inter.clone()),
        Some(stats) => {
            let q = rebalance_inter(&teacher_inter, stats)?;
            let lq = q.iter().map(|v| v.ln()).collect();
            (q, lq)
        }
    };
    let inter_kl = kl_log(&log_target, &s.log_inter);
    let intra_kl = groups
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|&i| {
                    let lp = t.log_intra[i];
                    lp.exp() * (lp - s.log_intra[i])
                })
                .sum()
        })
        .collect();
    Ok((
        SampleTerms {
            inter_kl,
            intra_kl,
            teacher_inter,
            target_inter: target_inter.clone(),
        },
        target_inter,
    ))
}

fn intra_weights(objective: &GroupObjective, terms: &SampleTerms) -> Vec<f64> {
    match objective.intra {
        IntraWeighting::TeacherMass => terms.teacher_inter.clone(),
        IntraWeighting::Uniform(beta) => vec![beta; terms.intra_kl.len()],
    }
}

fn validate_objective(objective: &GroupObjective) -> Result<()> {
    let beta = match objective.intra {
        IntraWeighting::TeacherMass => 0.0,
        IntraWeighting::Uniform(b) => b,
    };
    DistillWeights::new(objective.alpha, beta).map(|_| ())
}

/// Batch loss of a [`GroupObjective`].
pub fn objective_loss(
    zt: &Matrix,
    zs: &Matrix,
    groups: &ClassGroups,
    objective: &GroupObjective,
    stats: Option<&BatchGroupStats>,
    temp: Temperature,
) -> Result<LossBreakdown> {
    check_pair(zt, zs)?;
    check_groups(zt, groups)?;
    validate_objective(objective)?;
    let tau = temp.tau();
    let k = groups.num_groups();
    let mut inter = 0.0;
    let mut intra = vec![0.0; k];
    let mut mass = vec![0.0; k];
    for (rt, rs) in zt.row_iter().zip(zs.row_iter()) {
        let t = LogView::new(rt, groups, tau);
        let s = LogView::new(rs, groups, tau);
        let (terms, _) = terms_from_views(&t, &s, groups, stats)?;
        let w = intra_weights(objective, &terms);
        inter += objective.alpha * terms.inter_kl;
        for g in 0..k {
            intra[g] += w[g] * terms.intra_kl[g];
            mass[g] += terms.teacher_inter[g];
        }
    }
    let c = temp.loss_scale() / zt.rows() as f64;
    let inter = c * inter;
    let intra: Vec<f64> = intra.into_iter().map(|v| c * v).collect();
    let total = inter + intra.iter().sum::<f64>();
    let weights_used = match objective.intra {
        IntraWeighting::TeacherMass => {
            WeightsUsed::TeacherMass(mass.into_iter().map(|m| m / zt.rows() as f64).collect())
        }
        IntraWeighting::Uniform(beta) => WeightsUsed::Fixed {
            alpha: objective.alpha,
            beta,
        },
    };
    Ok(LossBreakdown {
        total,
        inter,
        intra,
        weights_used,
    })
}

/// Closed-form gradient of [`objective_loss`] with respect to the student
/// logits. Teacher quantities (including the rebalanced target) are
/// constants.
///
/// Per sample, with `u = z_s/τ`, target masses `q` and intra weights `w`:
/// `∂/∂u_i = α (p^S_i − q_G p̃^S_i) + w_G (p̃^S_i − p̃^T_i)`.
pub fn objective_grad(
    zt: &Matrix,
    zs: &Matrix,
    groups: &ClassGroups,
    objective: &GroupObjective,
    stats: Option<&BatchGroupStats>,
    temp: Temperature,
) -> Result<Matrix> {
    check_pair(zt, zs)?;
    check_groups(zt, groups)?;
    validate_objective(objective)?;
    let tau = temp.tau();
    let c = temp.loss_scale() / (tau * zt.rows() as f64);
    let mut out = Matrix::zeros(zt.rows(), zt.cols());
    for r in 0..zt.rows() {
        let t = LogView::new(zt.row(r), groups, tau);
        let s = LogView::new(zs.row(r), groups, tau);
        let (terms, q) = terms_from_views(&t, &s, groups, stats)?;
        let w = intra_weights(objective, &terms);
        let row = out.row_mut(r);
        for (i, o) in row.iter_mut().enumerate() {
            let g = groups.group_of(i);
            let ps = s.log_p[i].exp();
            let ps_intra = s.log_intra[i].exp();
            let pt_intra = t.log_intra[i].exp();
            *o = c * (objective.alpha * (ps - q[g] * ps_intra) + w[g] * (ps_intra - pt_intra));
        }
    }
    Ok(out)
}

/// Teacher-weighted decomposition of vanilla KD:
/// `KL(p^T_G ‖ p^S_G) + Σ_G p^T_G · KL(p̃^T_G ‖ p̃^S_G)`.
pub fn decomposed_kd(
    zt: &Matrix,
    zs: &Matrix,
    groups: &ClassGroups,
    temp: Temperature,
) -> Result<LossBreakdown> {
    objective_loss(zt, zs, groups, &GroupObjective::DECOMPOSED_KD, None, temp)
}

/// Long-tailed objective: `α·KL(p̂^T_G ‖ p^S_G) + β·Σ_G KL(p̃^T_G ‖ p̃^S_G)`,
/// with `p̂^T_G` the teacher masses rebalanced by `stats`.
pub fn ltkd_loss(
    zt: &Matrix,
    zs: &Matrix,
    groups: &ClassGroups,
    stats: &BatchGroupStats,
    w: DistillWeights,
    temp: Temperature,
) -> Result<LossBreakdown> {
    objective_loss(zt, zs, groups, &GroupObjective::ltkd(w), Some(stats), temp)
}

pub fn ltkd_grad(
    zt: &Matrix,
    zs: &Matrix,
    groups: &ClassGroups,
    stats: &BatchGroupStats,
    w: DistillWeights,
    temp: Temperature,
) -> Result<Matrix> {
    objective_grad(zt, zs, groups, &GroupObjective::ltkd(w), Some(stats), temp)
}

/// The `{target}`, `{non-target}` split.
pub fn target_split(num_classes: usize, target: usize) -> Result<ClassGroups> {
    if num_classes < 2 || target >= num_classes {
        return Err(Error::Input(format!(
            "target {target} with {num_classes} classes"
        )));
    }
    let rest = (0..num_classes).filter(|&c| c != target).collect();
    ClassGroups::new(num_classes, vec![vec![target], rest])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkdReduction {
    /// Binary target / non-target KL.
    pub tckd_like: f64,
    /// Non-target intra KL weighted by the teacher's non-target mass.
    pub nckd_like: f64,
    /// Intra KL of the singleton target group (always zero).
    pub target_intra: f64,
    /// `|tckd + nckd − KL(p^T ‖ p^S)|`.
    pub residual: f64,
}

/// Two-group reduction of the decomposition for one sample.
pub fn dkd_reduction_check(zt: &[f64], zs: &[f64], target: usize, tau: f64) -> Result<DkdReduction> {
    let groups = target_split(zt.len(), target)?;
    let terms = sample_terms(zt, zs, &groups, tau, None)?;
    let nckd_like = terms.teacher_inter[1] * terms.intra_kl[1];
    let full = kd_sample(zt, zs, tau);
    let decomposed = terms.inter_kl + terms.teacher_inter[0] * terms.intra_kl[0] + nckd_like;
    Ok(DkdReduction {
        tckd_like: terms.inter_kl,
        nckd_like,
        target_intra: terms.intra_kl[0],
        residual: (decomposed - full).abs(),
    })
}

/// Hard-label cross-entropy at `τ = 1` and its gradient.
///
/// With class weights the loss is `Σ w_y ℓ / Σ w_y`.
pub fn ce_loss(zs: &Matrix, labels: &[usize], class_weights: Option<&[f64]>) -> Result<(f64, Matrix)> {
    if labels.len() != zs.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            zs.rows()
        )));
    }
    if zs.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let c = zs.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::shape(format!("{} class weights for {c} classes", w.len())));
        }
    }
    let weight = |y: usize| class_weights.map_or(1.0, |w| w[y]);
    let norm: f64 = labels.iter().map(|&y| weight(y)).sum();
    if !(norm > 0.0) {
        return Err(Error::Input("class weights sum to zero over the batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(zs.rows(), c);
    for (r, &y) in labels.iter().enumerate() {
        let lp = log_softmax_row(zs.row(r), 1.0);
        let w = weight(y) / norm;
        loss -= w * lp[y];
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *g = w * (lp[j].exp() - onehot);
        }
    }
    Ok((loss, grad))
}
