//! Numerical integration of the drift field over a fixed output grid.
//!
//! Two methods: classic fixed-step RK4 (the step is shrunk to divide the
//! grid spacing exactly) and an adaptive Dormand-Prince 5(4) pair with the
//! first-same-as-last optimisation. The adaptive method is the default; it
//! clips steps to land exactly on grid points, so output times are exact
//! multiples of the spacing.
//!
//! Populations may undershoot zero by a little solver error; undershoot far
//! beyond the tolerances is reported as an error rather than papered over.
//! CSV output clamps the tiny negatives to zero, the in-memory trajectory
//! keeps the raw values.

use crate::model::CompiledModel;
use crate::semantics::VectorField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    FixedRk4 { h: f64 },
    Adaptive,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub method: Method,
    pub t_end: f64,
    pub grid: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            method: Method::Adaptive,
            t_end: 100.0,
            grid: 0.2,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_steps: 50_000_000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("solution became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("step size underflowed at t = {t}; the system is too stiff for the tolerances")]
    StepUnderflow { t: f64 },
    #[error("exceeded {0} steps")]
    TooManySteps(u64),
    #[error("state {name} fell to {value} at t = {t}, far below zero")]
    WentNegative { name: String, value: f64, t: f64 },
    #[error("bad option: {0}")]
    BadOptions(String),
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    /// One row of populations per time point.
    pub values: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Greatest pointwise |a - b| over the grid, comparing column `pairs`
    /// (left index in `self`, right index in `other`).
    pub fn max_abs_diff(&self, other: &Trajectory, pairs: &[(usize, usize)]) -> f64 {
        assert_eq!(self.times.len(), other.times.len(), "grids must match");
        let mut worst = 0.0f64;
        for (row_a, row_b) in self.values.iter().zip(&other.values) {
            for (i, j) in pairs {
                worst = worst.max((row_a[*i] - row_b[*j]).abs());
            }
        }
        worst
    }

    /// RFC 4180 CSV: header `t,<state names>`, one row per grid point.
    /// Negative values within solver noise are clamped to zero.
    pub fn to_csv(&self) -> String {
        fn field(s: &str) -> String {
            if s.contains(',') || s.contains('"') || s.contains('\n') {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        }
        let mut out = String::from("t");
        for n in &self.names {
            out.push(',');
            out.push_str(&field(n));
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t}"));
            for v in row {
                out.push(',');
                let v = if *v < 0.0 { 0.0 } else { *v };
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Vector norm used when measuring rate perturbations and trajectory gaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Inf,
    One,
    Two,
}

impl Norm {
    pub fn of(&self, x: &[f64]) -> f64 {
        match self {
            Norm::Inf => x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            Norm::One => x.iter().map(|v| v.abs()).sum(),
            Norm::Two => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::Inf => "inf",
            Norm::One => "1",
            Norm::Two => "2",
        })
    }
}

impl std::str::FromStr for Norm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inf" | "max" => Ok(Norm::Inf),
            "1" | "one" => Ok(Norm::One),
            "2" | "two" => Ok(Norm::Two),
            other => Err(format!("unknown norm `{other}` (expected inf, 1, or 2)")),
        }
    }
}

/// Largest over the grid of the norm of the difference vector between
/// paired columns (left index into `a`, right index into `b`).
pub fn trajectory_distance(
    a: &Trajectory,
    b: &Trajectory,
    norm: Norm,
    pairs: &[(usize, usize)],
) -> f64 {
    assert_eq!(a.times.len(), b.times.len(), "grids must match");
    let mut worst = 0.0f64;
    let mut diff = vec![0.0; pairs.len()];
    for (row_a, row_b) in a.values.iter().zip(&b.values) {
        for (d, (i, j)) in diff.iter_mut().zip(pairs) {
            *d = row_a[*i] - row_b[*j];
        }
        worst = worst.max(norm.of(&diff));
    }
    worst
}

fn output_times(opts: &SolveOptions) -> Vec<f64> {
    let mut times = Vec::new();
    let mut i = 0u64;
    loop {
        let t = i as f64 * opts.grid;
        if t > opts.t_end * (1.0 + 1e-12) {
            break;
        }
        times.push(t.min(opts.t_end));
        i += 1;
    }
    if *times.last().unwrap() < opts.t_end {
        times.push(opts.t_end);
    }
    times
}

/// Integrate `f` from `init`, reporting rows at every grid point.
///
/// `neg_scale[i]` sets the tolerated undershoot for component `i` (its
/// conserved total is the natural choice); components may not fall below
/// `-(abs_tol + rel_tol * neg_scale) * 1e4`.
pub fn solve_ode<F>(
    f: F,
    init: &[f64],
    names: &[String],
    neg_scale: &[f64],
    opts: &SolveOptions,
) -> Result<Trajectory, SolveError>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(opts.grid > 0.0 && opts.grid.is_finite()) {
        return Err(SolveError::BadOptions(format!(
            "grid spacing must be positive, got {}",
            opts.grid
        )));
    }
    if !(opts.t_end > 0.0 && opts.t_end.is_finite()) {
        return Err(SolveError::BadOptions(format!(
            "end time must be positive, got {}",
            opts.t_end
        )));
    }
    if let Method::FixedRk4 { h } = opts.method {
        if !(h > 0.0 && h.is_finite()) {
            return Err(SolveError::BadOptions(format!(
                "step size must be positive, got {h}"
            )));
        }
    }
    let times = output_times(opts);
    let n = init.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(times.len());
    rows.push(init.to_vec());
    let mut y = init.to_vec();

    match opts.method {
        Method::FixedRk4 { h } => {
            let mut k1 = vec![0.0; n];
            let mut k2 = vec![0.0; n];
            let mut k3 = vec![0.0; n];
            let mut k4 = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            let mut steps = 0u64;
            for w in times.windows(2) {
                let (t0, t1) = (w[0], w[1]);
                let span = t1 - t0;
                let sub = (span / h).ceil().max(1.0) as u64;
                let hh = span / sub as f64;
                for _ in 0..sub {
                    steps += 1;
                    if steps > opts.max_steps {
                        return Err(SolveError::TooManySteps(opts.max_steps));
                    }
                    f(&y, &mut k1);
                    for i in 0..n {
                        tmp[i] = y[i] + 0.5 * hh * k1[i];
                    }
                    f(&tmp, &mut k2);
                    for i in 0..n {
                        tmp[i] = y[i] + 0.5 * hh * k2[i];
                    }
                    f(&tmp, &mut k3);
                    for i in 0..n {
                        tmp[i] = y[i] + hh * k3[i];
                    }
                    f(&tmp, &mut k4);
                    for i in 0..n {
                        y[i] += hh / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
                check_row(&y, names, neg_scale, t1, opts)?;
                rows.push(y.clone());
            }
        }
        Method::Adaptive => {
            // Dormand-Prince 5(4) with FSAL.
            const A: [[f64; 6]; 6] = [
                [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
                [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
                [
                    19372.0 / 6561.0,
                    -25360.0 / 2187.0,
                    64448.0 / 6561.0,
                    -212.0 / 729.0,
                    0.0,
                    0.0,
                ],
                [
                    9017.0 / 3168.0,
                    -355.0 / 33.0,
                    46732.0 / 5247.0,
                    49.0 / 176.0,
                    -5103.0 / 18656.0,
                    0.0,
                ],
                [
                    35.0 / 384.0,
                    0.0,
                    500.0 / 1113.0,
                    125.0 / 192.0,
                    -2187.0 / 6784.0,
                    11.0 / 84.0,
                ],
            ];
            const E: [f64; 7] = [
                71.0 / 57600.0,
                0.0,
                -71.0 / 16695.0,
                71.0 / 1920.0,
                -17253.0 / 339200.0,
                22.0 / 525.0,
                -1.0 / 40.0,
            ];
            let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
            let mut tmp = vec![0.0; n];
            let mut ynew = vec![0.0; n];
            let mut t = 0.0f64;
            let mut steps = 0u64;
            f(&y, &mut k[0]);
            // Start inside the stable region when the initial drift is
            // violent instead of burning rejections to find it.
            let mut h = (opts.grid / 10.0).min(opts.t_end);
            let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            let fmax = k[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if fmax > 0.0 {
                h = h.min((0.01 * ymax / fmax).max(1e-12));
            }
            let mut out_idx = 1usize;
            while out_idx < times.len() {
                let target = times[out_idx];
                let clipped = h >= target - t;
                let hh = if clipped { target - t } else { h };
                steps += 1;
                if steps > opts.max_steps {
                    return Err(SolveError::TooManySteps(opts.max_steps));
                }
                if hh < 1e-13 * t.max(1.0) {
                    return Err(SolveError::StepUnderflow { t });
                }
                for s in 1..7 {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for (j, kj) in k.iter().enumerate().take(s) {
                            let a = A[s - 1][j];
                            if a != 0.0 {
                                acc += a * kj[i];
                            }
                        }
                        tmp[i] = y[i] + hh * acc;
                    }
                    if s == 6 {
                        ynew.copy_from_slice(&tmp);
                    }
                    let (_, tail) = k.split_at_mut(s);
                    f(&tmp, &mut tail[0]);
                }
                // k[6] = f(ynew) thanks to b-row == A[5]. A trial step that
                // left the finite range is an outright rejection; NaN must
                // not reach the max fold below, which would drop it.
                let mut err = 0.0f64;
                if ynew.iter().all(|v| v.is_finite()) {
                    for i in 0..n {
                        let mut e = 0.0;
                        for (j, kj) in k.iter().enumerate() {
                            if E[j] != 0.0 {
                                e += E[j] * kj[i];
                            }
                        }
                        e *= hh;
                        let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(ynew[i].abs());
                        let ratio = (e / scale).abs();
                        if !ratio.is_finite() {
                            err = f64::INFINITY;
                            break;
                        }
                        err = err.max(ratio);
                    }
                } else {
                    err = f64::INFINITY;
                }
                if err.is_finite() && err <= 1.0 {
                    t = if clipped { target } else { t + hh };
                    y.copy_from_slice(&ynew);
                    k.swap(0, 6);
                    if !y.iter().all(|v| v.is_finite()) {
                        return Err(SolveError::NonFinite { t });
                    }
                    if clipped {
                        check_row(&y, names, neg_scale, t, opts)?;
                        rows.push(y.clone());
                        out_idx += 1;
                    }
                    let grow = if err == 0.0 {
                        5.0
                    } else {
                        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                    };
                    h = (h * grow).min(opts.t_end);
                } else {
                    let shrink = if err.is_finite() {
                        (0.9 * err.powf(-0.2)).clamp(0.2, 0.9)
                    } else {
                        0.2
                    };
                    h *= shrink;
                }
            }
        }
    }

    Ok(Trajectory {
        names: names.to_vec(),
        times,
        values: rows,
    })
}

fn check_row(
    y: &[f64],
    names: &[String],
    neg_scale: &[f64],
    t: f64,
    opts: &SolveOptions,
) -> Result<(), SolveError> {
    for (i, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(SolveError::NonFinite { t });
        }
        let floor = (opts.abs_tol + opts.rel_tol * neg_scale[i]) * 1e4;
        if *v < -floor {
            return Err(SolveError::WentNegative {
                name: names[i].clone(),
                value: *v,
                t,
            });
        }
    }
    Ok(())
}

/// Integrate a compiled model's field from its initial populations.
pub fn solve_field(
    model: &CompiledModel,
    field: &VectorField,
    opts: &SolveOptions,
) -> Result<Trajectory, SolveError> {
    let names: Vec<String> = model.states.iter().map(|s| s.name.clone()).collect();
    let totals = model.atom_totals(&model.init);
    let neg_scale: Vec<f64> = model
        .states
        .iter()
        .map(|s| totals[s.atom].max(1.0))
        .collect();
    solve_ode(
        |v, out| field.eval_into(v, out),
        &model.init,
        &names,
        &neg_scale,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compile;
    use crate::semantics::vector_field;
    use crate::syntax::parse_model;

    fn decay_opts(t_end: f64) -> SolveOptions {
        SolveOptions {
            t_end,
            grid: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn adaptive_matches_exponential_decay() {
        // y' = -y, y(0) = 1
        let opts = decay_opts(5.0);
        let traj = solve_ode(
            |v, out| out[0] = -v[0],
            &[1.0],
            &["y".to_string()],
            &[1.0],
            &opts,
        )
        .unwrap();
        for (t, row) in traj.times.iter().zip(&traj.values) {
            assert!((row[0] - (-t).exp()).abs() < 1e-7, "t={t}");
        }
    }

    #[test]
    fn rk4_error_shrinks_sixteen_fold() {
        let run = |h: f64| {
            let opts = SolveOptions {
                method: Method::FixedRk4 { h },
                t_end: 1.0,
                grid: 1.0,
                ..Default::default()
            };
            let traj = solve_ode(
                |v, out| out[0] = -v[0],
                &[1.0],
                &["y".to_string()],
                &[1.0],
                &opts,
            )
            .unwrap();
            (traj.values[1][0] - (-1.0f64).exp()).abs()
        };
        let e1 = run(0.1);
        let e2 = run(0.05);
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "order-4 ratio was {ratio}");
    }

    #[test]
    fn grid_times_are_exact_multiples() {
        let opts = SolveOptions {
            t_end: 2.0,
            grid: 0.2,
            ..Default::default()
        };
        let traj = solve_ode(
            |v, out| out[0] = -v[0],
            &[1.0],
            &["y".to_string()],
            &[1.0],
            &opts,
        )
        .unwrap();
        assert_eq!(traj.times.len(), 11);
        assert_eq!(traj.times[5], 5.0 * 0.2);
        assert_eq!(*traj.times.last().unwrap(), 2.0);
    }

    #[test]
    fn conservation_along_model_trajectory() {
        let text = "P = (alpha, 1.0).P';\nP' = (beta, 0.5).P;\nQ = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\nsystem = P <alpha> Q;\ninit P = 200;\ninit Q = 400;\nsemantics = product;\n";
        let m = compile(&parse_model(text).unwrap(), None).unwrap();
        let f = vector_field(&m);
        let opts = SolveOptions {
            t_end: 10.0,
            grid: 0.5,
            ..Default::default()
        };
        let traj = solve_field(&m, &f, &opts).unwrap();
        for row in &traj.values {
            let totals = m.atom_totals(row);
            assert!((totals[0] - 200.0).abs() < 1e-6);
            assert!((totals[1] - 400.0).abs() < 1e-6);
        }
    }

    #[test]
    fn blowup_is_reported() {
        // y' = y^2, y(0) = 1 blows up at t = 1
        let opts = SolveOptions {
            t_end: 2.0,
            grid: 0.5,
            ..Default::default()
        };
        let err = solve_ode(
            |v, out| out[0] = v[0] * v[0],
            &[1.0],
            &["y".to_string()],
            &[1.0],
            &opts,
        )
        .unwrap_err();
        match err {
            SolveError::StepUnderflow { t } | SolveError::NonFinite { t } => {
                assert!((0.9..1.1).contains(&t), "blowup near t=1, got {t}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn sustained_negativity_is_reported() {
        let opts = SolveOptions {
            t_end: 5.0,
            grid: 0.5,
            ..Default::default()
        };
        let err = solve_ode(
            |_, out| out[0] = -1.0,
            &[1.0],
            &["y".to_string()],
            &[1.0],
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, SolveError::WentNegative { .. }));
    }

    #[test]
    fn csv_quotes_awkward_names() {
        let traj = Trajectory {
            names: vec!["plain".into(), "(b, 2).A".into()],
            times: vec![0.0, 0.5],
            values: vec![vec![1.0, 2.0], vec![0.5, -1e-12]],
        };
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,plain,\"(b, 2).A\"");
        assert_eq!(lines.next().unwrap(), "0,1,2");
        assert_eq!(lines.next().unwrap(), "0.5,0.5,0");
    }

    #[test]
    fn deterministic_across_runs() {
        let text = "P = (alpha, 1.0).P';\nP' = (beta, 0.5).P;\nQ = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\nsystem = P <alpha> Q;\ninit P = 200;\ninit Q = 400;\nsemantics = min;\n";
        let m = compile(&parse_model(text).unwrap(), None).unwrap();
        let f = vector_field(&m);
        let opts = SolveOptions {
            t_end: 20.0,
            ..Default::default()
        };
        let a = solve_field(&m, &f, &opts).unwrap();
        let b = solve_field(&m, &f, &opts).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn fixed_and_adaptive_agree_on_smooth_model() {
        let text = "P = (alpha, 1.0).P';\nP' = (beta, 0.5).P;\nQ = (alpha, 1.0).Q';\nQ' = (gamma, 15.0).Q;\nsystem = P <alpha> Q;\ninit P = 2;\ninit Q = 4;\nsemantics = product;\n";
        let m = compile(&parse_model(text).unwrap(), None).unwrap();
        let f = vector_field(&m);
        let base = SolveOptions {
            t_end: 5.0,
            grid: 0.5,
            ..Default::default()
        };
        let a = solve_field(&m, &f, &base).unwrap();
        let fixed = SolveOptions {
            method: Method::FixedRk4 { h: 1e-3 },
            ..base
        };
        let b = solve_field(&m, &f, &fixed).unwrap();
        let pairs: Vec<(usize, usize)> = (0..4).map(|i| (i, i)).collect();
        assert!(a.max_abs_diff(&b, &pairs) < 1e-6);
    }
}
