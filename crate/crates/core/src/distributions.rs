//! Temperature softmax, inter-group and intra-group distributions, and
//! batch-level teacher rebalancing.
//!
//! With classes split into groups `G`, a probability vector factors as
//! `p_i = p_G(i) · p̃_G(i),i` where `p_G = Σ_{i∈G} p_i` is the inter-group mass
//! and `p̃_G` is the softmax restricted to the group's logits. Group sums are
//! evaluated in log space (`exp(lse_G − lse)`) so tiny tail masses neither
//! underflow to zero prematurely nor get divided by.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::ClassGroups;

/// Floor applied to probability masses before any division or log.
pub const MASS_FLOOR: f64 = 1e-12;

const SUM_TOL: f64 = 1e-9;

/// A per-class probability vector: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("probability {v} outside [0, 1]")));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::Input(format!("probabilities sum to {s}")));
        }
        Ok(Self(values))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Max-shifted `log Σ exp(x)`. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn check_logits(z: &[f64], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    if z.is_empty() {
        return Err(Error::Input("empty logit row".into()));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite logit {v}")));
    }
    Ok(())
}

fn check_cover(len: usize, groups: &ClassGroups) -> Result<()> {
    if len != groups.num_classes() {
        return Err(Error::shape(format!(
            "{len} classes but partition covers {}",
            groups.num_classes()
        )));
    }
    Ok(())
}

/// `log softmax(z / τ)`.
pub fn log_softmax(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_logits(z, tau)?;
    let u: Vec<f64> = z.iter().map(|&v| v / tau).collect();
    let lse = logsumexp(&u);
    Ok(u.iter().map(|&v| v - lse).collect())
}

/// `softmax(z / τ)` with max subtraction.
pub fn softmax(z: &[f64], tau: f64) -> Result<ProbVector> {
    check_logits(z, tau)?;
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(ProbVector(e.into_iter().map(|v| v / s).collect()))
}

/// Inter-group masses `p_G = Σ_{i∈G} p_i` of a probability vector.
pub fn inter_group(p: &[f64], groups: &ClassGroups) -> Result<Vec<f64>> {
    check_cover(p.len(), groups)?;
    Ok(groups
        .iter()
        .map(|members| members.iter().map(|&i| p[i]).sum())
        .collect())
}

/// Per-group log masses `log p_G = lse_G(z/τ) − lse(z/τ)`.
pub fn log_inter_group(z: &[f64], groups: &ClassGroups, tau: f64) -> Result<Vec<f64>> {
    check_logits(z, tau)?;
    check_cover(z.len(), groups)?;
    let u: Vec<f64> = z.iter().map(|&v| v / tau).collect();
    let lse = logsumexp(&u);
    Ok(groups.iter().map(|m| group_lse(&u, m) - lse).collect())
}

/// Inter-group masses computed from logits.
pub fn inter_group_from_logits(z: &[f64], groups: &ClassGroups, tau: f64) -> Result<Vec<f64>> {
    Ok(log_inter_group(z, groups, tau)?.into_iter().map(f64::exp).collect())
}

fn group_lse(u: &[f64], members: &[usize]) -> f64 {
    let m = members.iter().map(|&i| u[i]).fold(f64::NEG_INFINITY, f64::max);
    m + members.iter().map(|&i| (u[i] - m).exp()).sum::<f64>().ln()
}

/// Intra-group distributions `p̃_G` (softmax over each group's own logits).
/// Computed from logits, so a group whose total mass underflows still gets a
/// well-defined distribution.
pub fn intra_group(z: &[f64], groups: &ClassGroups, tau: f64) -> Result<Vec<Vec<f64>>> {
    check_logits(z, tau)?;
    check_cover(z.len(), groups)?;
    let u: Vec<f64> = z.iter().map(|&v| v / tau).collect();
    Ok(groups
        .iter()
        .map(|members| {
            // shift by the group max so the result keeps full relative precision
            let m = members.iter().map(|&i| u[i]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = members.iter().map(|&i| (u[i] - m).exp()).collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(|v| v / total).collect()
        })
        .collect())
}

/// Inter-group vector plus one intra-group vector per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDistribution {
    pub inter: Vec<f64>,
    pub intra: Vec<Vec<f64>>,
}

impl GroupedDistribution {
    /// Rebuilds `p_i = p_G(i) · p̃_G(i),i`.
    pub fn reconstruct(&self, groups: &ClassGroups) -> Vec<f64> {
        let mut p = vec![0.0; groups.num_classes()];
        for (g, members) in groups.iter().enumerate() {
            for (k, &i) in members.iter().enumerate() {
                p[i] = self.inter[g] * self.intra[g][k];
            }
        }
        p
    }
}

pub fn grouped(z: &[f64], groups: &ClassGroups, tau: f64) -> Result<GroupedDistribution> {
    let inter = inter_group_from_logits(z, groups, tau)?;
    let intra = intra_group(z, groups, tau)?;
    let out = GroupedDistribution { inter, intra };
    #[cfg(debug_assertions)]
    {
        let p = softmax(z, tau)?;
        let r = out.reconstruct(groups);
        debug_assert!(p.iter().zip(&r).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
    Ok(out)
}

/// Per-batch sums of teacher inter-group masses and the scale factors that
/// equalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchGroupStats {
    pub sums: Vec<f64>,
    pub avg: f64,
    pub scales: Vec<f64>,
}

impl BatchGroupStats {
    /// Stats from already-reduced group sums.
    pub fn from_sums(sums: Vec<f64>) -> Result<Self> {
        if sums.is_empty() {
            return Err(Error::Input("no groups".into()));
        }
        if let Some(v) = sums.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Input(format!("invalid group sum {v}")));
        }
        let avg = sums.iter().sum::<f64>() / sums.len() as f64;
        let scales = sums.iter().map(|&s| avg / s.max(MASS_FLOOR)).collect();
        Ok(Self { sums, avg, scales })
    }

    /// Unit scales; rebalancing with these is the identity.
    pub fn neutral(num_groups: usize) -> Self {
        Self {
            sums: vec![1.0; num_groups],
            avg: 1.0,
            scales: vec![1.0; num_groups],
        }
    }

    pub const CSV_HEADER: &'static str = "batch_idx,sum_H,sum_M,sum_T,scale_H,scale_M,scale_T";

    /// One diagnostics row: batch index, group sums, then scales.
    pub fn csv_row(&self, batch_idx: usize) -> String {
        let mut row = batch_idx.to_string();
        for v in self.sums.iter().chain(&self.scales) {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }
}

/// Column sums of per-sample teacher inter-group vectors, their mean, and
/// `s_G = avg / max(sum_G, ε)`.
pub fn batch_group_stats<R: AsRef<[f64]>>(teacher_inter: &[R]) -> Result<BatchGroupStats> {
    let first = teacher_inter
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let k = first.as_ref().len();
    let mut sums = vec![0.0; k];
    for row in teacher_inter {
        let row = row.as_ref();
        if row.len() != k {
            return Err(Error::shape(format!("inter vector of length {} in a {k}-group batch", row.len())));
        }
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    BatchGroupStats::from_sums(sums)
}

/// `p̂_i = s_G(i)·p_i / Σ_j s_G(j)·p_j`.
pub fn rebalance(p: &[f64], groups: &ClassGroups, stats: &BatchGroupStats) -> Result<ProbVector> {
    check_cover(p.len(), groups)?;
    if stats.scales.len() != groups.num_groups() {
        return Err(Error::shape(format!(
            "{} scales for {} groups",
            stats.scales.len(),
            groups.num_groups()
        )));
    }
    let weighted: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| stats.scales[groups.group_of(i)] * pi)
        .collect();
    let norm: f64 = weighted.iter().sum();
    if !(norm > 0.0) {
        return Err(Error::Contract("rebalanced mass is zero".into()));
    }
    Ok(ProbVector(weighted.into_iter().map(|w| w / norm).collect()))
}

/// Group-level form of [`rebalance`]: normalized `s_G · p_G`. Equal to
/// `inter_group(rebalance(p))`.
pub fn rebalance_inter(inter: &[f64], stats: &BatchGroupStats) -> Result<Vec<f64>> {
    if inter.len() != stats.scales.len() {
        return Err(Error::shape(format!(
            "{} masses for {} scales",
            inter.len(),
            stats.scales.len()
        )));
    }
    let weighted: Vec<f64> = inter.iter().zip(&stats.scales).map(|(p, s)| p * s).collect();
    let norm: f64 = weighted.iter().sum();
    if !(norm > 0.0) {
        return Err(Error::Contract("rebalanced mass is zero".into()));
    }
    Ok(weighted.into_iter().map(|w| w / norm).collect())
}
