use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ltkd::check::{self, CheckOptions, Fault};
use ltkd::data::{BlobsConfig, DataBundle, Dataset, Split};
use ltkd::grouping::{build_partition, GroupPartition, GroupPolicy};
use ltkd::model::Mlp;
use ltkd::pipeline::{
    batch_bias_trace, bias_trace_csv, distill, evaluate, init_student, run_grid, runs_root, train_teacher,
    two_sweep, AblationRow, DistillConfig, GridCell, Method, RunDir, TeacherConfig, TwoSweep,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{
    AblateArgs, BiasTraceArgs, CheckArgs, Command, DistillArgs, EvalArgs, GenDataArgs, GroupArgs, SplitArg,
    StudentArgs, TeacherArgs,
};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(ltkd::Error),
    CheckFailed,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(ltkd::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
            CliError::CheckFailed => EXIT_CHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::CheckFailed => write!(f, "check suite failed"),
        }
    }
}

impl From<ltkd::Error> for CliError {
    fn from(e: ltkd::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Check(a) => check_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::BiasTrace(a) => bias_trace_cmd(a),
    }
}

fn out_dir(out: Option<PathBuf>, default_id: String) -> Result<RunDir> {
    Ok(RunDir::create(out.unwrap_or_else(|| runs_root().join(default_id)))?)
}

fn policy(groups: &GroupArgs) -> Result<GroupPolicy> {
    let p = groups.policy().map_err(CliError::Usage)?;
    p.validate()?;
    Ok(p)
}

/// Provenance record: the command name plus every resolved setting.
fn write_config(run: &RunDir, command: &str, settings: serde_json::Value) -> Result<()> {
    let mut v = json!({ "command": command, "version": env!("CARGO_PKG_VERSION") });
    if let (Some(obj), serde_json::Value::Object(extra)) = (v.as_object_mut(), settings) {
        obj.extend(extra);
    }
    run.write_config(&v)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<DataBundle> {
    Ok(DataBundle::read_dir(dir)?)
}

fn partition_for(data: &DataBundle, groups: &GroupArgs) -> Result<GroupPartition> {
    Ok(build_partition(&data.train.class_counts(), policy(groups)?)?)
}

/// A checkpoint path, or a run directory holding one of `names`.
fn resolve_ckpt(path: &Path, names: &[&str]) -> PathBuf {
    if path.is_dir() {
        names
            .iter()
            .map(|n| path.join(n))
            .find(|p| p.exists())
            .unwrap_or_else(|| path.join(names[0]))
    } else {
        path.to_path_buf()
    }
}

fn load_model_for(path: &Path, data: &DataBundle) -> Result<Mlp> {
    let model = Mlp::load(path)?;
    if model.input_dim() != data.train.dim() || model.num_classes() != data.train.num_classes {
        return Err(ltkd::Error::Shape(format!(
            "{} expects {} features and {} classes, data has {} and {}",
            path.display(),
            model.input_dim(),
            model.num_classes(),
            data.train.dim(),
            data.train.num_classes
        ))
        .into());
    }
    Ok(model)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = BlobsConfig {
        num_classes: a.classes,
        base_count: a.base,
        gamma: a.gamma,
        dim: a.dim,
        separation: a.sep,
        seed: a.seed,
        test_per_class: a.test_per_class,
    };
    if cfg.num_classes < 3 {
        return Err(CliError::Usage("--classes must be at least 3 (one per group)".into()));
    }
    let bundle = DataBundle::generate(&cfg).map_err(|e| match e {
        ltkd::Error::Input(m) => CliError::Usage(m),
        e => e.into(),
    })?;
    let run = out_dir(a.out, format!("data-s{}", a.seed))?;
    bundle.write_dir(run.path())?;
    write_config(&run, "gen-data", serde_json::to_value(&cfg)?)?;
    let counts = &bundle.spec.long_tail.counts;
    println!("realized imbalance factor: {}", bundle.spec.realized_imbalance);
    println!(
        "class counts: max {} min {} total {}",
        counts.iter().max().unwrap_or(&0),
        counts.iter().min().unwrap_or(&0),
        bundle.train.len()
    );
    println!("wrote {}", run.path().display());
    Ok(())
}

fn train_teacher_cmd(a: TeacherArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let partition = partition_for(&data, &a.groups)?;
    let cfg = TeacherConfig {
        hidden: a.hidden.clone(),
        epochs: a.train.epochs,
        batch_size: a.train.batch_size,
        sgd: a.train.sgd(),
        schedule: a.train.schedule(),
        seed: a.train.seed,
    };
    let run = out_dir(a.out, format!("teacher-s{}", a.train.seed))?;
    write_config(
        &run,
        "train-teacher",
        json!({ "data": a.data, "group_policy": partition.policy(), "teacher": cfg }),
    )?;
    let teacher = train_teacher(&data.train, &data.test, &partition, &cfg)?;
    teacher.model.save(run.teacher_ckpt())?;
    run.write_metrics(teacher.history.iter().map(|e| json!(e)))?;
    run.write_text("eval.json", &(serde_json::to_string_pretty(&teacher.report)? + "\n"))?;
    run.write_text("partition.json", &(serde_json::to_string_pretty(&partition)? + "\n"))?;
    println!("{}", teacher.report.summary_json());
    println!("wrote {}", run.path().display());
    Ok(())
}

fn distill_config(method: Method, alpha: f64, beta: f64, s: &StudentArgs, group_policy: GroupPolicy) -> DistillConfig {
    DistillConfig {
        method,
        alpha,
        beta,
        tau: s.tau.unwrap_or(method.default_tau()),
        tau_squared: !s.no_tau_squared,
        ce_weight: s.ce_weight,
        group_policy,
        student_hidden: s.student_hidden.clone(),
        epochs: s.train.epochs,
        batch_size: s.train.batch_size,
        sgd: s.train.sgd(),
        schedule: s.train.schedule(),
        seed: s.train.seed,
    }
}

struct StudentSetup {
    data: DataBundle,
    partition: GroupPartition,
    teacher: Mlp,
    teacher_path: PathBuf,
}

fn student_setup(s: &StudentArgs) -> Result<StudentSetup> {
    let data = load_data(&s.data)?;
    let partition = partition_for(&data, &s.groups)?;
    let teacher_path = resolve_ckpt(&s.teacher, &["teacher.ckpt"]);
    let teacher = load_model_for(&teacher_path, &data)?;
    Ok(StudentSetup {
        data,
        partition,
        teacher,
        teacher_path,
    })
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let method = Method::from(a.method);
    let policy = policy(&a.student.groups)?;
    let cfg = distill_config(method, a.alpha, a.beta, &a.student, policy);
    cfg.validate()?;
    let setup = student_setup(&a.student)?;
    let id = format!("{}-s{}", serde_json::to_value(method)?.as_str().unwrap_or("run"), cfg.seed);
    let run = out_dir(a.out, id)?;
    write_config(
        &run,
        "distill",
        json!({ "data": a.student.data, "teacher": setup.teacher_path, "distill": cfg }),
    )?;
    let student = init_student(&cfg, setup.data.train.dim(), setup.data.train.num_classes)?;
    let out = distill(
        &setup.teacher,
        student,
        &setup.data.train,
        &setup.data.test,
        &setup.partition,
        &cfg,
    )?;
    run.record_distill(&out)?;
    if let Some(r) = out.epochs.iter().filter_map(|e| e.identity_residual).reduce(f64::max) {
        println!("max identity residual: {r:e}");
    }
    println!("{}", out.report.summary_json());
    println!("wrote {}", run.path().display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let partition = partition_for(&data, &a.groups)?;
    let path = resolve_ckpt(&a.model, &["student.ckpt", "teacher.ckpt"]);
    let model = load_model_for(&path, &data)?;
    let split: &Dataset = match a.split {
        SplitArg::Test => &data.test,
        SplitArg::Train => &data.train,
    };
    let report = evaluate(&model, split, &partition)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(out) = a.out {
        let run = RunDir::create(out)?;
        let split_name = match split.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        write_config(
            &run,
            "eval",
            json!({ "model": path, "data": a.data, "split": split_name, "group_policy": partition.policy() }),
        )?;
        run.write_text("eval.json", &text)?;
    }
    Ok(())
}

fn check_cmd(a: CheckArgs) -> Result<()> {
    if a.instances == 0 || a.gradient_instances == 0 {
        return Err(CliError::Usage("instance counts must be positive".into()));
    }
    let opts = CheckOptions {
        instances: a.instances,
        gradient_instances: a.gradient_instances,
        seed: a.seed,
        fault: if a.inject_fault { Fault::FlipSign } else { Fault::None },
    };
    let report = check::run_all(&opts)?;
    for s in &report.suites {
        let status = if s.passed { "PASS" } else { "FAIL" };
        print!(
            "{status} {:<28} worst {:.3e} (tolerance {:.0e}) over {} instances",
            s.name, s.worst, s.tolerance, s.instances
        );
        match s.failing_seed {
            Some(seed) => println!("; failing seed {seed}"),
            None => println!(),
        }
    }
    if let Some(out) = a.out {
        let run = RunDir::create(out)?;
        write_config(
            &run,
            "check",
            json!({ "instances": a.instances, "gradient_instances": a.gradient_instances, "seed": a.seed,
                    "inject_fault": a.inject_fault }),
        )?;
        run.write_text("check.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if report.passed() {
        println!("{} suites passed", report.suites.len());
        Ok(())
    } else {
        Err(CliError::CheckFailed)
    }
}

/// Grid file accepted by `ablate --grid`. Either `cells`, or `alphas` and
/// `betas` (full product, or two sweeps with `two_sweep`).
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    #[serde(default)]
    cells: Vec<GridCell>,
    #[serde(default)]
    alphas: Vec<f64>,
    #[serde(default)]
    betas: Vec<f64>,
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    two_sweep: bool,
    fixed_beta: Option<f64>,
    fixed_alpha: Option<f64>,
}

enum Plan {
    Cells(Vec<GridCell>),
    TwoSweep(TwoSweep),
}

fn ablation_plan(a: &AblateArgs) -> Result<(Plan, Vec<u64>)> {
    let grid = match &a.grid {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ltkd::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<GridFile>(&text)?
        }
        None => GridFile {
            alphas: a.alphas.clone(),
            betas: a.betas.clone(),
            two_sweep: a.two_sweep,
            ..GridFile::default()
        },
    };
    let seeds = grid.seeds.clone().unwrap_or_else(|| a.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::Usage("empty seed list".into()));
    }
    let plan = if grid.two_sweep {
        let defaults = TwoSweep::default();
        let pick = |v: &Vec<f64>, d: Vec<f64>| if v.is_empty() { d } else { v.clone() };
        Plan::TwoSweep(TwoSweep {
            alphas: pick(&grid.alphas, defaults.alphas),
            betas: pick(&grid.betas, defaults.betas),
            fixed_beta: grid.fixed_beta.unwrap_or(a.fixed_beta),
            fixed_alpha: grid.fixed_alpha.or(a.fixed_alpha),
        })
    } else if !grid.cells.is_empty() {
        if !grid.alphas.is_empty() || !grid.betas.is_empty() {
            return Err(CliError::Usage("grid file: give either cells or alphas/betas".into()));
        }
        Plan::Cells(grid.cells)
    } else {
        let cells: Vec<GridCell> = grid
            .alphas
            .iter()
            .flat_map(|&alpha| grid.betas.iter().map(move |&beta| GridCell { alpha, beta }))
            .collect();
        if cells.is_empty() {
            return Err(CliError::Usage(
                "empty ablation grid: give --alphas and --betas, --two-sweep, or --grid".into(),
            ));
        }
        Plan::Cells(cells)
    };
    Ok((plan, seeds))
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let (plan, seeds) = ablation_plan(&a)?;
    let base = distill_config(Method::Ltkd, 6.0, 6.0, &a.student, policy(&a.student.groups)?);
    base.validate()?;
    let values: Vec<f64> = match &plan {
        Plan::Cells(cells) => cells.iter().flat_map(|c| [c.alpha, c.beta]).collect(),
        Plan::TwoSweep(s) => s.alphas.iter().chain(&s.betas).copied().chain([s.fixed_beta]).collect(),
    };
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CliError::Usage("α and β must be finite and non-negative".into()));
    }
    let setup = student_setup(&a.student)?;
    let run = out_dir(a.out.clone(), format!("ablate-s{}", seeds[0]))?;
    let grid_json = match &plan {
        Plan::Cells(cells) => json!({ "cells": cells }),
        Plan::TwoSweep(s) => json!({ "two_sweep": s }),
    };
    write_config(
        &run,
        "ablate",
        json!({ "data": a.student.data, "teacher": setup.teacher_path, "base": base, "grid": grid_json,
                "seeds": seeds }),
    )?;
    let cells_root = run.file("cells");
    let (rows, best_alpha) = match &plan {
        Plan::Cells(cells) => {
            let rows = run_grid(
                &setup.teacher,
                &setup.data.train,
                &setup.data.test,
                &setup.partition,
                &base,
                cells,
                &seeds,
                Some(&cells_root),
            )?;
            (rows, None)
        }
        Plan::TwoSweep(sweep) => {
            let (rows, best) = two_sweep(
                &setup.teacher,
                &setup.data.train,
                &setup.data.test,
                &setup.partition,
                &base,
                sweep,
                &seeds,
                Some(&cells_root),
            )?;
            (rows, Some(best))
        }
    };
    run.write_text("ablation.csv", &AblationRow::to_csv(&rows))?;
    if let Some(best) = best_alpha {
        println!("best alpha: {best}");
    }
    println!("{} rows", rows.len());
    println!("wrote {}", run.file("ablation.csv").display());
    Ok(())
}

fn bias_trace_cmd(a: BiasTraceArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let partition = partition_for(&data, &a.groups)?;
    let teacher_path = resolve_ckpt(&a.teacher, &["teacher.ckpt"]);
    let teacher = load_model_for(&teacher_path, &data)?;
    let (split, split_name) = match a.split {
        SplitArg::Train => (&data.train, "train"),
        SplitArg::Test => (&data.test, "test"),
    };
    let run = out_dir(a.out, format!("bias-trace-s{}", a.seed))?;
    write_config(
        &run,
        "bias-trace",
        json!({ "teacher": teacher_path, "data": a.data, "split": split_name, "batch_size": a.batch_size,
                "seed": a.seed, "group_policy": partition.policy() }),
    )?;
    let trace = batch_bias_trace(&teacher, split, &partition, a.batch_size, a.seed)?;
    run.write_text("bias_trace.csv", &bias_trace_csv(&trace))?;
    let head_heavy = trace.iter().filter(|s| s.sums[0] > s.sums[2]).count();
    println!(
        "{} batches; sum_H > sum_T on {} ({:.1}%)",
        trace.len(),
        head_heavy,
        100.0 * head_heavy as f64 / trace.len().max(1) as f64
    );
    println!("wrote {}", run.file("bias_trace.csv").display());
    Ok(())
}
