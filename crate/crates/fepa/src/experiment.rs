//! Numerical error study on a family of nearly identical clients sharing
//! one server.
//!
//! The family has D clients `Pd = (alpha, rd).Pd'`, `Pd' = (beta, 0.5).Pd`
//! with drifted rates `rd = 1 + (d-1)*delta`, one server
//! `Q = (alpha, 1.0).Q'`, `Q' = (gamma, 15.0).Q`, and the composition
//! `(P1 <> ... <> PD) <alpha> Q`. Clients start at `200 + (d-1)`, the server
//! at 400. The sweep homogenises each instance, solves original and
//! homogenised systems over a fixed horizon, and reports relative errors of
//! the exact reduction (full against full perturbed solution, populations
//! averaged too) and of the ordinary reduction (block sums against the
//! reduced solution of the homogenised model), next to the guaranteed error
//! bound.

use rayon::prelude::*;
use thiserror::Error;

use crate::lumping::{
    build_ofl_lump, Block, LumpError, Partition, TupleClass, TuplePartition, VerifyOptions,
};
use crate::model::ModelError;
use crate::perturb::{
    efl_error, homogenize, ofl_error, perturbation_report, plan_for_efl, plan_for_ofl, PerturbError,
};
use crate::solve::{Norm, SolveError, SolveOptions};
use crate::syntax::Rho;
use crate::{compile, parse_model, CompiledModel};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Lump(#[from] LumpError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Sweep configuration. The default replicates the published study: client
/// counts 3, 6, 9, 12 for the exact reduction and 12 for the ordinary one,
/// twenty drifts 0.0005 + 0.005k, both semantics, horizon 100 sampled
/// every 0.2.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub efl_replicas: Vec<usize>,
    pub ofl_replicas: Vec<usize>,
    pub deltas: Vec<f64>,
    pub rhos: Vec<Rho>,
    pub t_end: f64,
    pub grid: f64,
    pub norm: Norm,
    /// Worker threads; None lets the runtime decide.
    pub jobs: Option<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            efl_replicas: vec![3, 6, 9, 12],
            ofl_replicas: vec![12],
            deltas: (0..20).map(|k| 0.0005 + 0.005 * k as f64).collect(),
            rhos: vec![Rho::Min, Rho::Product],
            t_end: 100.0,
            grid: 0.2,
            norm: Norm::Inf,
            jobs: None,
        }
    }
}

/// Build one member of the study family.
pub fn drifting_replicas(d: usize, delta: f64, rho: Rho) -> Result<CompiledModel, ModelError> {
    assert!(d >= 1, "at least one client");
    let mut src = String::new();
    for i in 1..=d {
        let r = 1.0 + (i as f64 - 1.0) * delta;
        src.push_str(&format!("P{i} = (alpha, {r}).P{i}';\n"));
        src.push_str(&format!("P{i}' = (beta, 0.5).P{i};\n"));
    }
    src.push_str("Q = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\n");
    for i in 1..=d {
        src.push_str(&format!("init P{i} = {};\n", 200.0 + (i as f64 - 1.0)));
    }
    src.push_str("init Q = 400.0;\n");
    let chain: Vec<String> = (1..=d).map(|i| format!("P{i}")).collect();
    src.push_str(&format!("system = ({}) <alpha> Q;\n", chain.join(" <> ")));
    src.push_str(&format!("semantics = {rho};\n"));
    let parsed = parse_model(&src).expect("generated source is well formed");
    compile(&parsed, None)
}

/// The block partition used throughout the study: all clients together, the
/// server alone.
pub fn study_partition(d: usize) -> Partition {
    Partition {
        blocks: vec![
            Block {
                atoms: (1..=d).map(|i| format!("P{i}")).collect(),
                sigmas: None,
            },
            Block {
                atoms: vec!["Q".into()],
                sigmas: None,
            },
        ],
    }
}

/// The singleton-tuple partition matching `study_partition`.
pub fn study_tuple_partition(d: usize) -> TuplePartition {
    TuplePartition {
        classes: vec![
            TupleClass {
                tuples: (1..=d).map(|i| vec![format!("P{i}")]).collect(),
                sigmas: None,
            },
            TupleClass {
                tuples: vec![vec!["Q".into()]],
                sigmas: None,
            },
        ],
    }
}

/// One sweep measurement. Exactly one of the two error columns is set,
/// matching the reduction the row describes.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub rho: Rho,
    pub d: usize,
    pub delta_param: f64,
    pub eps_norm: f64,
    pub delta0_norm: f64,
    pub efl_error_pct: Option<f64>,
    pub ofl_error_pct: Option<f64>,
    pub theory_bound: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Exact,
    Ordinary,
}

fn solve_opts(spec: &ExperimentSpec) -> SolveOptions {
    SolveOptions {
        t_end: spec.t_end,
        grid: spec.grid,
        ..SolveOptions::default()
    }
}

fn exact_row(
    rho: Rho,
    d: usize,
    delta: f64,
    spec: &ExperimentSpec,
) -> Result<SweepRow, ExperimentError> {
    let model = drifting_replicas(d, delta, rho)?;
    let plan = plan_for_efl(&model, &study_tuple_partition(d))?;
    let h = homogenize(&model, &plan)?;
    let bundle = perturbation_report(&model, &h, spec.norm, &solve_opts(spec))?;
    let err = efl_error(&bundle.original, &bundle.homogenized)?;
    Ok(SweepRow {
        rho,
        d,
        delta_param: delta,
        eps_norm: bundle.report.epsilon,
        delta0_norm: bundle.report.delta,
        efl_error_pct: Some(err),
        ofl_error_pct: None,
        theory_bound: bundle.report.bound,
    })
}

fn ordinary_row(
    rho: Rho,
    d: usize,
    delta: f64,
    spec: &ExperimentSpec,
) -> Result<SweepRow, ExperimentError> {
    let model = drifting_replicas(d, delta, rho)?;
    let partition = study_partition(d);
    let plan = plan_for_ofl(&model, &partition)?;
    let h = homogenize(&model, &plan)?;
    let opts = solve_opts(spec);
    let bundle = perturbation_report(&model, &h, spec.norm, &opts)?;
    let (sys, _) = build_ofl_lump(&h.model, &partition, &VerifyOptions::default(), false)?;
    let lumped = sys.solve(&opts)?;
    let err = ofl_error(&bundle.original, &lumped, &sys.members)?;
    Ok(SweepRow {
        rho,
        d,
        delta_param: delta,
        eps_norm: bundle.report.epsilon,
        delta0_norm: bundle.report.delta,
        efl_error_pct: None,
        ofl_error_pct: Some(err),
        theory_bound: bundle.report.bound,
    })
}

/// Run the sweep. Rows come back in a fixed order: exact-reduction rows
/// first, then ordinary ones, each sorted by semantics, client count, and
/// drift; the order does not depend on the worker count.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut jobs: Vec<(Mode, Rho, usize, f64)> = Vec::new();
    for mode in [Mode::Exact, Mode::Ordinary] {
        let ds = match mode {
            Mode::Exact => &spec.efl_replicas,
            Mode::Ordinary => &spec.ofl_replicas,
        };
        for &rho in &spec.rhos {
            for &d in ds {
                for &delta in &spec.deltas {
                    jobs.push((mode, rho, d, delta));
                }
            }
        }
    }
    let run = |&(mode, rho, d, delta): &(Mode, Rho, usize, f64)| match mode {
        Mode::Exact => exact_row(rho, d, delta, spec),
        Mode::Ordinary => ordinary_row(rho, d, delta, spec),
    };
    match spec.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(|| jobs.par_iter().map(run).collect()),
        None => jobs.par_iter().map(run).collect(),
    }
}

/// Render rows as CSV. Unset error columns are left empty.
pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "rho,D,delta_param,eps_norm,delta0_norm,efl_error_pct,ofl_error_pct,theory_bound\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.rho,
            r.d,
            r.delta_param,
            r.eps_norm,
            r.delta0_norm,
            opt(r.efl_error_pct),
            opt(r.ofl_error_pct),
            r.theory_bound
        ));
    }
    out
}

/// Per (reduction, semantics, client count) digest of a sweep.
#[derive(Debug, Clone)]
pub struct GroupSummary {
    /// "efl" or "ofl".
    pub reduction: &'static str,
    pub rho: Rho,
    pub d: usize,
    pub max_error_pct: f64,
    /// Drift steps where the error strictly decreased.
    pub monotone_violations: usize,
    /// Goodness of a least-squares line error ~ a + b * drift.
    pub linear_r2: f64,
}

/// Slack when checking that errors do not decrease as the drift grows;
/// absorbs integrator noise.
const MONOTONE_SLACK: f64 = 1e-9;

/// Digest sweep rows group by group. Rows inside a group keep sweep order,
/// which is ascending in the drift.
pub fn summarize(rows: &[SweepRow]) -> Vec<GroupSummary> {
    let mut out = Vec::new();
    let mut seen: Vec<(&'static str, Rho, usize)> = Vec::new();
    for r in rows {
        let reduction = if r.efl_error_pct.is_some() {
            "efl"
        } else {
            "ofl"
        };
        let key = (reduction, r.rho, r.d);
        if !seen.contains(&key) {
            seen.push(key);
        }
    }
    for (reduction, rho, d) in seen {
        let series: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.rho == rho && r.d == d)
            .filter_map(|r| {
                let e = match reduction {
                    "efl" => r.efl_error_pct,
                    _ => r.ofl_error_pct,
                };
                e.map(|e| (r.delta_param, e))
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        let max_error_pct = series
            .iter()
            .map(|(_, e)| *e)
            .fold(f64::NEG_INFINITY, f64::max);
        let monotone_violations = series
            .windows(2)
            .filter(|w| w[1].1 < w[0].1 - MONOTONE_SLACK * w[0].1.abs().max(1.0))
            .count();
        out.push(GroupSummary {
            reduction,
            rho,
            d,
            max_error_pct,
            monotone_violations,
            linear_r2: linear_fit_r2(&series),
        });
    }
    out
}

/// Coefficient of determination of the least-squares line through the
/// points; 1.0 when fewer than two distinct abscissae exist.
pub fn linear_fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 1.0;
    }
    let mx = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my) * (y - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    let b = sxy / sxx;
    let ss_res: f64 = points
        .iter()
        .map(|(x, y)| {
            let fit = my + b * (x - mx);
            (y - fit) * (y - fit)
        })
        .sum();
    1.0 - ss_res / syy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::vector_field;
    use crate::solve::solve_field;

    #[test]
    fn family_member_matches_hand_rates_and_populations() {
        let m = drifting_replicas(3, 0.01, Rho::Product).unwrap();
        let find = |atom: &str, action: &str| {
            m.rate_vector
                .iter()
                .find(|r| m.atoms[r.atom].name == atom && m.actions[r.action] == action)
                .map(|r| r.value)
                .unwrap()
        };
        assert_eq!(find("P1", "alpha"), 1.0);
        assert_eq!(find("P2", "alpha"), 1.01);
        assert_eq!(find("P3", "alpha"), 1.02);
        assert_eq!(find("P2", "beta"), 0.5);
        assert_eq!(find("Q", "alpha"), 1.0);
        assert_eq!(find("Q", "gamma"), 15.0);
        let init = |s: &str| m.init[m.state_index(s).unwrap()];
        assert_eq!(init("P1"), 200.0);
        assert_eq!(init("P3"), 202.0);
        assert_eq!(init("Q"), 400.0);
        assert_eq!(init("Q'"), 0.0);
    }

    #[test]
    fn family_converges_to_equilibrium_by_the_horizon() {
        for rho in [Rho::Min, Rho::Product] {
            let m = drifting_replicas(3, 0.01, rho).unwrap();
            let f = vector_field(&m);
            let traj = solve_field(&m, &f, &SolveOptions::default()).unwrap();
            let last = traj.values.last().unwrap();
            let drift = Norm::Inf.of(&f.eval(last));
            assert!(drift < 1e-6, "{rho}: residual drift {drift}");
        }
    }

    fn quick_spec() -> ExperimentSpec {
        ExperimentSpec {
            efl_replicas: vec![2],
            ofl_replicas: vec![2],
            deltas: vec![0.001, 0.006],
            rhos: vec![Rho::Min, Rho::Product],
            t_end: 1.0,
            grid: 0.5,
            norm: Norm::Inf,
            jobs: Some(2),
        }
    }

    #[test]
    fn sweep_rows_come_back_in_declared_order() {
        let rows = run_sweep(&quick_spec()).unwrap();
        assert_eq!(rows.len(), 8);
        let shape: Vec<(bool, String, usize, f64)> = rows
            .iter()
            .map(|r| {
                (
                    r.efl_error_pct.is_some(),
                    r.rho.to_string(),
                    r.d,
                    r.delta_param,
                )
            })
            .collect();
        let expect: Vec<(bool, String, usize, f64)> = [
            (true, "min", 0.001),
            (true, "min", 0.006),
            (true, "product", 0.001),
            (true, "product", 0.006),
            (false, "min", 0.001),
            (false, "min", 0.006),
            (false, "product", 0.001),
            (false, "product", 0.006),
        ]
        .iter()
        .map(|(e, rho, d)| (*e, rho.to_string(), 2, *d))
        .collect();
        assert_eq!(shape, expect);
        for r in &rows {
            assert!(r.eps_norm > 0.0);
            assert_eq!(
                r.efl_error_pct.is_some(),
                r.ofl_error_pct.is_none(),
                "exactly one error column per row"
            );
            assert!(r.theory_bound > 0.0);
        }
        let again = run_sweep(&quick_spec()).unwrap();
        assert_eq!(to_csv(&rows), to_csv(&again), "sweep is deterministic");
    }

    #[test]
    fn csv_has_empty_cell_for_the_unused_metric() {
        let rows = run_sweep(&quick_spec()).unwrap();
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "rho,D,delta_param,eps_norm,delta0_norm,efl_error_pct,ofl_error_pct,theory_bound"
        );
        for (line, row) in lines.zip(&rows) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 8);
            assert_eq!(cells[5].is_empty(), row.efl_error_pct.is_none());
            assert_eq!(cells[6].is_empty(), row.ofl_error_pct.is_none());
        }
    }

    #[test]
    fn summary_counts_violations_and_measures_fit() {
        let row = |delta: f64, err: f64| SweepRow {
            rho: Rho::Min,
            d: 3,
            delta_param: delta,
            eps_norm: delta,
            delta0_norm: 0.0,
            efl_error_pct: Some(err),
            ofl_error_pct: None,
            theory_bound: 1.0,
        };
        let clean: Vec<SweepRow> = [(0.01, 1.0), (0.02, 2.0), (0.03, 3.0)]
            .map(|(d, e)| row(d, e))
            .into();
        let s = summarize(&clean);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].monotone_violations, 0);
        assert!((s[0].linear_r2 - 1.0).abs() < 1e-12);
        assert_eq!(s[0].max_error_pct, 3.0);

        let dip: Vec<SweepRow> = [(0.01, 1.0), (0.02, 0.5), (0.03, 3.0)]
            .map(|(d, e)| row(d, e))
            .into();
        let s = summarize(&dip);
        assert_eq!(s[0].monotone_violations, 1);
        assert!(s[0].linear_r2 < 0.95);
    }

    #[test]
    fn flat_series_fits_perfectly_and_single_point_is_trivial() {
        assert_eq!(linear_fit_r2(&[(0.1, 2.0), (0.2, 2.0), (0.3, 2.0)]), 1.0);
        assert_eq!(linear_fit_r2(&[(0.1, 2.0)]), 1.0);
    }

    #[test]
    fn single_client_family_still_builds() {
        let m = drifting_replicas(1, 0.0, Rho::Min).unwrap();
        assert_eq!(m.atoms.len(), 2);
        assert_eq!(m.states.len(), 4);
    }
}
