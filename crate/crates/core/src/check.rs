//! Self-check harness behind the `check` command: randomized verification of
//! the decomposition identity, the DKD reduction, rebalancing invariants and
//! LTKD gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distributions::{batch_group_stats, inter_group, rebalance, softmax, BatchGroupStats};
use crate::error::Result;
use crate::grouping::ClassGroups;
use crate::losses::{
    dkd_reduction_check, kd_sample, objective_grad, objective_loss, sample_terms, DistillWeights,
    GroupObjective, IntraWeighting, Temperature,
};
use crate::math::{central_difference, Matrix, NodeId, Tape};
use crate::rng::{stream, Stream};

pub const IDENTITY_TOL: f64 = 1e-10;
pub const DKD_TOL: f64 = 1e-10;
pub const SUM_TOL: f64 = 1e-12;
pub const SCALE_TOL: f64 = 1e-9;
pub const NEUTRAL_TOL: f64 = 1e-15;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-8;
pub const AUTODIFF_TOL: f64 = 1e-9;

/// Deliberate defect for exercising the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Subtracts the intra-group part of the decomposition and negates
    /// analytic gradients.
    FlipSign,
}

impl Fault {
    fn sign(self) -> f64 {
        match self {
            Fault::None => 1.0,
            Fault::FlipSign => -1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub passed: bool,
    /// Largest error metric seen, compared against `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub failing_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub suites: Vec<SuiteResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub instances: usize,
    pub gradient_instances: usize,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            instances: 1000,
            gradient_instances: 200,
            seed: 0,
            fault: Fault::None,
        }
    }
}

pub fn run_all(opts: &CheckOptions) -> Result<CheckReport> {
    Ok(CheckReport {
        suites: vec![
            decomposition_identity(opts)?,
            dkd_reduction(opts)?,
            rebalance_invariants(opts)?,
            gradient_finite_differences(opts)?,
            gradient_autodiff(opts)?,
        ],
    })
}

/// Tracks the worst error and the first seed exceeding tolerance.
struct Tracker {
    worst: f64,
    failing_seed: Option<u64>,
    tolerance: f64,
}

impl Tracker {
    fn new(tolerance: f64) -> Self {
        Self {
            worst: 0.0,
            failing_seed: None,
            tolerance,
        }
    }

    fn observe(&mut self, err: f64, seed: u64) {
        // NaN counts as a failure
        if !(err <= self.tolerance) && self.failing_seed.is_none() {
            self.failing_seed = Some(seed);
        }
        if err > self.worst || err.is_nan() {
            self.worst = err;
        }
    }

    fn finish(self, name: &'static str, instances: usize) -> SuiteResult {
        SuiteResult {
            name,
            instances,
            passed: self.failing_seed.is_none(),
            worst: self.worst,
            tolerance: self.tolerance,
            failing_seed: self.failing_seed,
        }
    }
}

/// Random logits in `[-range, range]`.
pub fn random_logits(rng: &mut ChaCha8Rng, c: usize, range: f64) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(-range..=range)).collect()
}

/// Uniformly random assignment of `c ≥ k` classes to `k` non-empty groups.
pub fn random_groups(rng: &mut ChaCha8Rng, c: usize, k: usize) -> ClassGroups {
    loop {
        let mut members = vec![Vec::new(); k];
        for class in 0..c {
            members[rng.random_range(0..k)].push(class);
        }
        if members.iter().all(|m| !m.is_empty()) {
            return ClassGroups::new(c, members).expect("valid cover");
        }
    }
}

fn instance_rng(opts: &CheckOptions, i: usize) -> (u64, ChaCha8Rng) {
    let seed = opts.seed.wrapping_add(i as u64);
    (seed, stream(seed, Stream::Check))
}

pub fn decomposition_identity(opts: &CheckOptions) -> Result<SuiteResult> {
    let mut t = Tracker::new(IDENTITY_TOL);
    for i in 0..opts.instances {
        let (seed, mut rng) = instance_rng(opts, i);
        let c = rng.random_range(3..=50);
        let groups = random_groups(&mut rng, c, 3);
        let tau = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        let zt = random_logits(&mut rng, c, 5.0);
        let zs = random_logits(&mut rng, c, 5.0);
        let terms = sample_terms(&zt, &zs, &groups, tau, None)?;
        let intra: f64 = terms.teacher_inter.iter().zip(&terms.intra_kl).map(|(w, k)| w * k).sum();
        let decomposed = terms.inter_kl + opts.fault.sign() * intra;
        t.observe((kd_sample(&zt, &zs, tau) - decomposed).abs(), seed);
    }
    Ok(t.finish("decomposition-identity", opts.instances))
}

pub fn dkd_reduction(opts: &CheckOptions) -> Result<SuiteResult> {
    let mut t = Tracker::new(DKD_TOL);
    for i in 0..opts.instances {
        let (seed, mut rng) = instance_rng(opts, i);
        let c = rng.random_range(2..=50);
        let target = rng.random_range(0..c);
        let tau = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        let zt = random_logits(&mut rng, c, 5.0);
        let zs = random_logits(&mut rng, c, 5.0);
        let r = dkd_reduction_check(&zt, &zs, target, tau)?;
        let err = match opts.fault {
            Fault::None => r.residual.max(r.target_intra.abs()),
            Fault::FlipSign => (r.tckd_like - r.nckd_like - kd_sample(&zt, &zs, tau)).abs(),
        };
        t.observe(err, seed);
    }
    Ok(t.finish("dkd-reduction", opts.instances))
}

/// Normalization of `p̂`, `s_G · sum_G = avg`, and identity under equal sums.
/// The reported metric is each error divided by its own tolerance.
pub fn rebalance_invariants(opts: &CheckOptions) -> Result<SuiteResult> {
    let mut t = Tracker::new(1.0);
    let n = (opts.instances / 10).max(1);
    for i in 0..n {
        let (seed, mut rng) = instance_rng(opts, i);
        let c = rng.random_range(3..=50);
        let groups = random_groups(&mut rng, c, 3);
        let batch = rng.random_range(1..=64);
        let probs: Vec<Vec<f64>> = (0..batch)
            .map(|_| softmax(&random_logits(&mut rng, c, 6.0), 1.0).map(|p| p.into_vec()))
            .collect::<Result<_>>()?;
        let inter: Vec<Vec<f64>> = probs.iter().map(|p| inter_group(p, &groups)).collect::<Result<_>>()?;
        let stats = batch_group_stats(&inter)?;
        let mut worst: f64 = 0.0;
        for (s, sum) in stats.scales.iter().zip(&stats.sums) {
            worst = worst.max((s * sum - stats.avg).abs() / SCALE_TOL);
        }
        for p in &probs {
            let hat = rebalance(p, &groups, &stats)?;
            let total: f64 = hat.iter().sum::<f64>() * opts.fault.sign();
            worst = worst.max((total - 1.0).abs() / SUM_TOL);
        }
        let neutral = BatchGroupStats::from_sums(vec![stats.avg; 3])?;
        for p in &probs {
            let hat = rebalance(p, &groups, &neutral)?;
            for (a, b) in hat.iter().zip(p) {
                worst = worst.max((a - b).abs() / NEUTRAL_TOL);
            }
        }
        t.observe(worst, seed);
    }
    Ok(t.finish("rebalance-invariants", n))
}

struct GradInstance {
    zt: Matrix,
    zs: Matrix,
    groups: ClassGroups,
    stats: BatchGroupStats,
    objective: GroupObjective,
    temp: Temperature,
}

fn gradient_instance(rng: &mut ChaCha8Rng) -> Result<GradInstance> {
    let c = rng.random_range(3..=20);
    let rows = rng.random_range(1..=4);
    let groups = random_groups(rng, c, 3);
    let zt = Matrix::from_fn(rows, c, |_, _| rng.random_range(-3.0..=3.0));
    let zs = Matrix::from_fn(rows, c, |_, _| rng.random_range(-3.0..=3.0));
    let tau = [1.0, 2.0, 4.0][rng.random_range(0..3)];
    let inter: Vec<Vec<f64>> = zt
        .row_iter()
        .map(|r| crate::distributions::inter_group_from_logits(r, &groups, tau))
        .collect::<Result<_>>()?;
    let stats = batch_group_stats(&inter)?;
    let w = DistillWeights::new(rng.random_range(0.0..=10.0), rng.random_range(0.0..=10.0))?;
    Ok(GradInstance {
        zt,
        zs,
        groups,
        stats,
        objective: GroupObjective::ltkd(w),
        temp: Temperature::new(tau)?,
    })
}

/// `max_i |a_i − f_i| / max(max_i |f_i|, floor)`.
///
/// The error is measured against the size of the whole gradient rather than
/// entry by entry: difference quotients carry an absolute rounding error of
/// roughly `ε·|loss| / h`, so an entry that happens to sit near zero has no
/// meaningful entrywise relative error.
pub fn relative_error(analytic: &Matrix, reference: &Matrix, floor: f64) -> f64 {
    let scale = reference.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, f)| (a - f).abs() / scale)
        .fold(0.0, f64::max)
}

pub fn gradient_finite_differences(opts: &CheckOptions) -> Result<SuiteResult> {
    let mut t = Tracker::new(FD_REL_TOL);
    for i in 0..opts.gradient_instances {
        let (seed, mut rng) = instance_rng(opts, i);
        let g = gradient_instance(&mut rng)?;
        let analytic = objective_grad(&g.zt, &g.zs, &g.groups, &g.objective, Some(&g.stats), g.temp)?
            .scale(opts.fault.sign());
        let fd = finite_difference_grad(&g)?;
        t.observe(relative_error(&analytic, &fd, FD_FLOOR), seed);
    }
    Ok(t.finish("gradient-finite-differences", opts.gradient_instances))
}

/// Central differences of the batch objective, taken row by row. Each row's
/// loss depends only on that row's logits once the batch statistics are
/// fixed, so differencing the single-row loss gives the same derivative with
/// less cancellation error than differencing the whole batch.
fn finite_difference_grad(g: &GradInstance) -> Result<Matrix> {
    let n = g.zs.rows();
    let mut out = Matrix::zeros(n, g.zs.cols());
    for r in 0..n {
        let zt = Matrix::new(1, g.zt.cols(), g.zt.row(r).to_vec())?;
        let zs = Matrix::new(1, g.zs.cols(), g.zs.row(r).to_vec())?;
        let f = |z: &Matrix| {
            objective_loss(&zt, z, &g.groups, &g.objective, Some(&g.stats), g.temp)
                .map(|b| b.total)
                .unwrap_or(f64::NAN)
        };
        let d = central_difference(f, &zs, FD_STEP);
        for (o, v) in out.row_mut(r).iter_mut().zip(d.as_slice()) {
            *o = v / n as f64;
        }
    }
    Ok(out)
}

pub fn gradient_autodiff(opts: &CheckOptions) -> Result<SuiteResult> {
    let mut t = Tracker::new(AUTODIFF_TOL);
    for i in 0..opts.gradient_instances {
        let (seed, mut rng) = instance_rng(opts, i);
        let g = gradient_instance(&mut rng)?;
        let analytic = objective_grad(&g.zt, &g.zs, &g.groups, &g.objective, Some(&g.stats), g.temp)?
            .scale(opts.fault.sign());
        let mut tape = Tape::new();
        let zs = tape.leaf(g.zs.clone());
        let loss = record_objective(&mut tape, zs, &g.zt, &g.groups, &g.objective, Some(&g.stats), g.temp)?;
        let grads = tape.backward(loss)?;
        let err = analytic
            .max_abs_diff(&grads.get_or_zeros(&tape, zs))
            .unwrap_or(f64::INFINITY);
        t.observe(err, seed);
    }
    Ok(t.finish("gradient-autodiff", opts.gradient_instances))
}

/// Records a [`GroupObjective`] on `tape` as a function of the student logits
/// node, using only primitive tape operations. Teacher-side quantities enter
/// as constants.
pub fn record_objective(
    tape: &mut Tape,
    zs: NodeId,
    zt: &Matrix,
    groups: &ClassGroups,
    objective: &GroupObjective,
    stats: Option<&BatchGroupStats>,
    temp: Temperature,
) -> Result<NodeId> {
    let n = zt.rows();
    let tau = temp.tau();

    // teacher side, per row: class probabilities → (rebalanced) group masses and
    // within-group distributions
    let mut target = vec![vec![0.0; n]; groups.num_groups()];
    let mut teacher_mass = vec![vec![0.0; n]; groups.num_groups()];
    let mut teacher_intra: Vec<Matrix> = groups.iter().map(|m| Matrix::zeros(n, m.len())).collect();
    for r in 0..n {
        let p = softmax(zt.row(r), tau)?;
        let masses = inter_group(&p, groups)?;
        let q = match stats {
            Some(s) => inter_group(&rebalance(&p, groups, s)?, groups)?,
            None => masses.clone(),
        };
        for (g, members) in groups.iter().enumerate() {
            target[g][r] = q[g];
            teacher_mass[g][r] = masses[g];
            for (k, &i) in members.iter().enumerate() {
                teacher_intra[g].set(r, k, p[i] / masses[g]);
            }
        }
    }

    let u = tape.scale(zs, 1.0 / tau);
    let lse = tape.logsumexp_rows(u);
    let mut total: Option<NodeId> = None;
    let mut add = |tape: &mut Tape, node: NodeId| -> Result<()> {
        total = Some(match total {
            None => node,
            Some(t) => tape.add(t, node)?,
        });
        Ok(())
    };

    for (g, members) in groups.iter().enumerate() {
        let ug = tape.select_cols(u, members)?;
        let lse_g = tape.logsumexp_rows(ug);

        // inter: Σ_r q (log q − (lse_G − lse)), scaled by α
        let log_ps_g = tape.sub(lse_g, lse)?;
        let q = Matrix::from_fn(n, 1, |r, _| target[g][r]);
        let log_q = q.map(|v| if v > 0.0 { v.ln() } else { 0.0 });
        let q = tape.constant(q);
        let log_q = tape.constant(log_q);
        let diff = tape.sub(log_q, log_ps_g)?;
        let inter = tape.mul(q, diff)?;
        let inter = tape.scale(inter, objective.alpha);
        add(tape, inter)?;

        // intra: w · Σ_k p̃T (log p̃T − (u_k − lse_G))
        let lse_b = tape.broadcast_cols(lse_g, members.len())?;
        let log_pts = tape.sub(ug, lse_b)?;
        let pt = teacher_intra[g].clone();
        let log_pt = pt.map(|v| if v > 0.0 { v.ln() } else { 0.0 });
        let pt = tape.constant(pt);
        let log_pt = tape.constant(log_pt);
        let diff = tape.sub(log_pt, log_pts)?;
        let kl = tape.mul(pt, diff)?;
        let kl = tape.row_sum(kl);
        let w = match objective.intra {
            IntraWeighting::TeacherMass => Matrix::from_fn(n, 1, |r, _| teacher_mass[g][r]),
            IntraWeighting::Uniform(beta) => Matrix::filled(n, 1, beta),
        };
        let w = tape.constant(w);
        let weighted = tape.mul(w, kl)?;
        add(tape, weighted)?;
    }
    let total = total.expect("at least one group");
    let summed = tape.sum(total);
    Ok(tape.scale(summed, temp.loss_scale() / n as f64))
}
