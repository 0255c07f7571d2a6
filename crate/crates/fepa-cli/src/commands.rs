//! Implementations behind the subcommands. Every function returns
//! `Failure` with the exit code baked in: bad inputs are code 2, failed
//! verifications code 3, and bad flag values code 1.

use crate::{
    CheckArgs, Cli, Cmd, CompareArgs, ExperimentArgs, LumpArgs, LumpMode, OdesArgs, RhoArg,
    SolveArgs,
};
use fepa::experiment::{run_sweep, summarize, to_csv, ExperimentSpec};
use fepa::lumping::{
    build_efl_lump, build_ofl_lump, discover_efl, discover_ofl, verify_efl, verify_ofl,
    LumpedSystem, Partition, TuplePartition, VerifyOptions, VerifyReport,
};
use fepa::perturb::{
    homogenize, perturbation_report, plan_for_efl, plan_for_ofl, HomogenizationPlan,
};
use fepa::semantics::{ode_json, ode_text, vector_field};
use fepa::solve::{solve_field, trajectory_distance, SolveOptions};
use fepa::{compile, parse_model, validate, CompiledModel, Severity};
use serde::Serialize;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

pub enum Failure {
    /// Exit 1: a flag value that clap cannot rule out but the command can.
    Usage(String),
    /// Exit 2: unreadable, unparsable, or inconsistent input.
    Model(String),
    /// Exit 3: a verification that ran to completion and failed.
    Verify(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Model(_) => 2,
            Failure::Verify(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Model(m) => write!(f, "error: {m}"),
            Failure::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

fn model_err(e: impl fmt::Display) -> Failure {
    Failure::Model(e.to_string())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Check(a) => check(a),
        Cmd::Odes(a) => odes(a),
        Cmd::Lump(a) => lump(a),
        Cmd::Solve(a) => solve(a),
        Cmd::Compare(a) => compare(a),
        Cmd::Experiment(a) => experiment(a),
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Model(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, rho: Option<RhoArg>) -> Result<CompiledModel, Failure> {
    let text = read_file(path)?;
    let src = parse_model(&text).map_err(|e| {
        Failure::Model(format!(
            "{}:{}:{}: {}",
            path.display(),
            e.line,
            e.col,
            e.msg
        ))
    })?;
    compile(&src, rho.map(Into::into)).map_err(model_err)
}

/// Print to stdout or write to `--out`.
fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| Failure::Model(format!("{}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn positive(value: f64, flag: &str) -> Result<(), Failure> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{flag} must be positive, got {value}"
        )))
    }
}

fn check(a: CheckArgs) -> Result<(), Failure> {
    let text = read_file(&a.model)?;
    let src = parse_model(&text).map_err(|e| {
        Failure::Model(format!(
            "{}:{}:{}: {}",
            a.model.display(),
            e.line,
            e.col,
            e.msg
        ))
    })?;
    let diags = validate(&src);
    for d in &diags {
        eprintln!("{d}");
    }
    let errors = diags
        .iter()
        .filter(|d| d.severity == Severity::Error)
        .count();
    if errors > 0 {
        return Err(Failure::Model(format!(
            "{}: {errors} error{}",
            a.model.display(),
            if errors == 1 { "" } else { "s" }
        )));
    }
    let model = compile(&src, a.rho.map(Into::into)).map_err(model_err)?;
    println!(
        "ok: {} atoms, {} states, semantics = {}",
        model.atoms.len(),
        model.states.len(),
        model.rho
    );
    Ok(())
}

fn odes(a: OdesArgs) -> Result<(), Failure> {
    let model = load_model(&a.model, a.rho)?;
    let field = vector_field(&model);
    let text = if a.json {
        let mut s = serde_json::to_string_pretty(&ode_json(&model, &field)).map_err(model_err)?;
        s.push('\n');
        s
    } else {
        ode_text(&model, &field)
    };
    emit(&a.out, &text)
}

fn solve(a: SolveArgs) -> Result<(), Failure> {
    positive(a.t_end, "--t-end")?;
    positive(a.grid, "--grid")?;
    let model = load_model(&a.model, a.rho)?;
    let field = vector_field(&model);
    let opts = SolveOptions {
        t_end: a.t_end,
        grid: a.grid,
        ..SolveOptions::default()
    };
    let traj = solve_field(&model, &field, &opts).map_err(model_err)?;
    emit(&a.out, &traj.to_csv())
}

#[derive(Serialize)]
struct CompareReport {
    norm: fepa::solve::Norm,
    t_end: f64,
    grid: f64,
    distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verdict: Option<&'static str>,
    per_state: Vec<StateGap>,
}

#[derive(Serialize)]
struct StateGap {
    state: String,
    max_abs_diff: f64,
}

fn compare(a: CompareArgs) -> Result<(), Failure> {
    positive(a.t_end, "--t-end")?;
    positive(a.grid, "--grid")?;
    let ma = load_model(&a.model_a, a.rho)?;
    let mb = load_model(&a.model_b, a.rho)?;
    let names_a = ma.state_names();
    let names_b = mb.state_names();
    if names_a.len() != names_b.len() {
        return Err(Failure::Model(format!(
            "models disagree on size: {} states vs {}",
            names_a.len(),
            names_b.len()
        )));
    }
    let mut pairs = Vec::with_capacity(names_a.len());
    for (i, name) in names_a.iter().enumerate() {
        match names_b.iter().position(|n| n == name) {
            Some(j) => pairs.push((i, j)),
            None => {
                return Err(Failure::Model(format!(
                    "state `{name}` is missing from {}",
                    a.model_b.display()
                )))
            }
        }
    }
    let opts = SolveOptions {
        t_end: a.t_end,
        grid: a.grid,
        ..SolveOptions::default()
    };
    let ta = solve_field(&ma, &vector_field(&ma), &opts).map_err(model_err)?;
    let tb = solve_field(&mb, &vector_field(&mb), &opts).map_err(model_err)?;
    let distance = trajectory_distance(&ta, &tb, a.norm, &pairs);
    let per_state = pairs
        .iter()
        .map(|&(i, j)| StateGap {
            state: names_a[i].to_string(),
            max_abs_diff: ta.max_abs_diff(&tb, &[(i, j)]),
        })
        .collect();
    let verdict = a
        .tol
        .map(|tol| if distance <= tol { "PASS" } else { "FAIL" });
    let report = CompareReport {
        norm: a.norm,
        t_end: a.t_end,
        grid: a.grid,
        distance,
        tol: a.tol,
        verdict,
        per_state,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(model_err)?;
    text.push('\n');
    emit(&a.out, &text)?;
    if let Some(tol) = a.tol {
        if distance > tol {
            return Err(Failure::Verify(format!(
                "trajectory distance {distance:.6e} exceeds tolerance {tol:.6e}"
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LumpReport<'a> {
    mode: &'static str,
    verdict: &'a str,
    original_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    lumped_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variables: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    members: Option<Vec<Vec<String>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<Vec<f64>>,
    verification: &'a VerifyReport,
}

#[derive(Serialize)]
struct EpsReport<'a> {
    mode: &'static str,
    verdict: &'a str,
    perturbation: &'a fepa::perturb::PerturbationReport,
    homogenized_model: String,
    verification: &'a VerifyReport,
}

fn mode_name(mode: LumpMode) -> &'static str {
    match mode {
        LumpMode::Efl => "efl",
        LumpMode::Ofl => "ofl",
        LumpMode::EpsEfl => "eps-efl",
        LumpMode::EpsOfl => "eps-ofl",
    }
}

fn fail_from_report(report: &VerifyReport) -> Failure {
    let what = report
        .witness
        .as_ref()
        .map(|w| {
            format!(
                "condition {} at state `{}`, action `{}`",
                w.condition, w.state, w.action
            )
        })
        .unwrap_or_else(|| "structural mismatch".to_string());
    Failure::Verify(what)
}

/// Load `--partition`, or propose one from the model structure. Discovery
/// groups atoms whose rates agree within `--tol`, so homogenizing modes
/// can discover with a loose tolerance.
fn block_partition(model: &CompiledModel, a: &LumpArgs) -> Result<Partition, Failure> {
    match &a.partition {
        Some(path) => Partition::from_json(&read_file(path)?).map_err(model_err),
        None => {
            let found = discover_ofl(model, a.tol)
                .into_iter()
                .next()
                .expect("discovery returns a partition");
            if found.blocks.iter().all(|b| b.atoms.len() <= 1) {
                return Err(Failure::Verify(
                    "no non-trivial partition found: every atom sits in its own block".into(),
                ));
            }
            eprintln!("discovered partition: {}", block_summary(&found));
            Ok(found)
        }
    }
}

fn tuple_partition(model: &CompiledModel, a: &LumpArgs) -> Result<TuplePartition, Failure> {
    match &a.partition {
        Some(path) => TuplePartition::from_json(&read_file(path)?).map_err(model_err),
        None => {
            let found = discover_efl(model, a.tol)
                .into_iter()
                .next()
                .expect("discovery returns a partition");
            if found.classes.iter().all(|c| c.tuples.len() <= 1) {
                return Err(Failure::Verify(
                    "no non-trivial partition found: every tuple sits in its own class".into(),
                ));
            }
            eprintln!("discovered partition: {}", tuple_summary(&found));
            Ok(found)
        }
    }
}

fn block_summary(p: &Partition) -> String {
    let blocks: Vec<String> = p
        .blocks
        .iter()
        .map(|b| format!("{{{}}}", b.atoms.join(", ")))
        .collect();
    blocks.join(" ")
}

fn tuple_summary(p: &TuplePartition) -> String {
    let classes: Vec<String> = p
        .classes
        .iter()
        .map(|c| {
            let tuples: Vec<String> = c
                .tuples
                .iter()
                .map(|t| format!("({})", t.join(", ")))
                .collect();
            format!("{{{}}}", tuples.join(" "))
        })
        .collect();
    classes.join(" ")
}

fn lump(a: LumpArgs) -> Result<(), Failure> {
    if a.samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    positive(a.tol, "--tol")?;
    positive(a.t_end, "--t-end")?;
    positive(a.grid, "--grid")?;
    let model = load_model(&a.model, a.rho)?;
    let vopts = VerifyOptions {
        samples: a.samples,
        tol: a.tol,
        seed: a.seed,
    };
    match a.mode {
        LumpMode::Ofl => {
            let partition = block_partition(&model, &a)?;
            let report = verify_ofl(&model, &partition, &vopts).map_err(model_err)?;
            let sys = if report.passed() {
                Some(
                    build_ofl_lump(&model, &partition, &vopts, false)
                        .map_err(model_err)?
                        .0,
                )
            } else {
                None
            };
            finish_lump(&a, &model, report, sys)
        }
        LumpMode::Efl => {
            let partition = tuple_partition(&model, &a)?;
            let report = verify_efl(&model, &partition, &vopts).map_err(model_err)?;
            let sys = if report.passed() {
                Some(
                    build_efl_lump(&model, &partition, &vopts, false)
                        .map_err(model_err)?
                        .0,
                )
            } else {
                None
            };
            finish_lump(&a, &model, report, sys)
        }
        LumpMode::EpsOfl => {
            let partition = block_partition(&model, &a)?;
            let plan = plan_for_ofl(&model, &partition).map_err(model_err)?;
            eps_lump(&a, &model, plan, |homog| {
                verify_ofl(homog, &partition, &vopts)
            })
        }
        LumpMode::EpsEfl => {
            let partition = tuple_partition(&model, &a)?;
            let plan = plan_for_efl(&model, &partition).map_err(model_err)?;
            eps_lump(&a, &model, plan, |homog| {
                verify_efl(homog, &partition, &vopts)
            })
        }
    }
}

fn finish_lump(
    a: &LumpArgs,
    model: &CompiledModel,
    report: VerifyReport,
    sys: Option<LumpedSystem>,
) -> Result<(), Failure> {
    let members = sys.as_ref().map(|s| {
        s.members
            .iter()
            .map(|m| m.iter().map(|&id| model.states[id].name.clone()).collect())
            .collect()
    });
    let out = LumpReport {
        mode: mode_name(a.mode),
        verdict: &report.verdict,
        original_size: model.states.len(),
        lumped_size: sys.as_ref().map(|s| s.dim()),
        variables: sys.as_ref().map(|s| s.names.clone()),
        members,
        init: sys.as_ref().map(|s| s.init.clone()),
        verification: &report,
    };
    let mut text = serde_json::to_string_pretty(&out).map_err(model_err)?;
    text.push('\n');
    emit(&a.out, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(fail_from_report(&report))
    }
}

fn eps_lump<F>(
    a: &LumpArgs,
    model: &CompiledModel,
    plan: HomogenizationPlan,
    verify: F,
) -> Result<(), Failure>
where
    F: FnOnce(&CompiledModel) -> Result<VerifyReport, fepa::lumping::PartitionError>,
{
    let homog = homogenize(model, &plan).map_err(model_err)?;
    let report = verify(&homog.model).map_err(model_err)?;
    let opts = SolveOptions {
        t_end: a.t_end,
        grid: a.grid,
        ..SolveOptions::default()
    };
    let bundle = perturbation_report(model, &homog, a.norm, &opts).map_err(model_err)?;
    let out = EpsReport {
        mode: mode_name(a.mode),
        verdict: &report.verdict,
        perturbation: &bundle.report,
        homogenized_model: homog.model.source.to_string(),
        verification: &report,
    };
    let mut text = serde_json::to_string_pretty(&out).map_err(model_err)?;
    text.push('\n');
    emit(&a.out, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(fail_from_report(&report))
    }
}

fn experiment(a: ExperimentArgs) -> Result<(), Failure> {
    positive(a.t_end, "--t-end")?;
    positive(a.grid, "--grid")?;
    positive(a.delta_start, "--delta-start")?;
    if a.delta_count == 0 {
        return Err(Failure::Usage("--delta-count must be at least 1".into()));
    }
    if !(a.delta_step.is_finite() && a.delta_step >= 0.0) {
        return Err(Failure::Usage(format!(
            "--delta-step must be nonnegative, got {}",
            a.delta_step
        )));
    }
    if let Some(d) = a.efl_d.iter().chain(&a.ofl_d).find(|&&d| d == 0) {
        return Err(Failure::Usage(format!(
            "replica counts must be at least 1, got {d}"
        )));
    }
    let mut spec = ExperimentSpec::default();
    spec.efl_replicas = a.efl_d.clone();
    spec.ofl_replicas = a.ofl_d.clone();
    spec.deltas = (0..a.delta_count)
        .map(|k| a.delta_start + a.delta_step * k as f64)
        .collect();
    if let Some(rho) = a.rho {
        spec.rhos = vec![rho.into()];
    }
    spec.t_end = a.t_end;
    spec.grid = a.grid;
    spec.norm = a.norm;
    spec.jobs = a.jobs;
    let rows = run_sweep(&spec).map_err(model_err)?;
    emit(&a.out, &to_csv(&rows))?;
    for g in summarize(&rows) {
        eprintln!(
            "{} rho={} D={}: max_error={:.4}% monotone_violations={} linear_r2={:.4}",
            g.reduction, g.rho, g.d, g.max_error_pct, g.monotone_violations, g.linear_r2
        );
    }
    Ok(())
}
