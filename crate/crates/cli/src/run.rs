//! Task execution and the run report.

use std::path::Path;
use std::sync::Arc;

use longrun_core::assumptions::{check_master, check_prop_wishart, check_wellposedness, CheckReport, Meshes};
use longrun_core::hjb_pde::{compute_h, extract_ergodic, max_c_curvature, solve_cauchy, CauchyOptions, Grid};
use longrun_core::longrun_affine::{counterexample_search, solve_ergodic_riccati, solve_horizon_riccati_ode};
use longrun_core::simulate::{mc_duality, mc_longrun_convergence, mc_supermartingale};
use longrun_core::Error;
use nalgebra::DMatrix;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::output::{line_plot, Cell, Series, Table};
use crate::scenario::{Built, Mode, Scenario, Task};

pub const EXIT_THRESHOLD: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Hypothesis { .. } | Error::Ellipticity(_) | Error::Unsupported(_) => EXIT_PRECONDITION,
        Error::NumericalAbort(_) | Error::Explosion(_) | Error::NoConvergence { .. } | Error::Singular(_) => {
            EXIT_NUMERICAL
        }
        _ => EXIT_INPUT,
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// Strictly decreasing, except that an exact zero may repeat.
fn decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0))
}

struct TaskResult {
    passed: bool,
    output: Value,
}

enum Abort {
    Precondition(String),
    Core(Error),
}

impl From<Error> for Abort {
    fn from(e: Error) -> Self {
        Abort::Core(e)
    }
}

#[derive(Default)]
struct Runner {
    tables: Vec<Table>,
    plots: Vec<(String, String)>,
}

impl Runner {
    fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn check(&mut self, sc: &Scenario, b: &Built) -> Result<TaskResult, Abort> {
        let meshes = Meshes::standard(b.spec.d(), sc.sim.master_seed);
        let reports: Vec<CheckReport> = vec![
            check_wellposedness(&b.spec, &meshes),
            check_master(&b.spec, &meshes),
            check_prop_wishart(&b.spec, &meshes),
        ];
        let mut t = Table::new("checks", &["assumption", "verdict", "certified", "witness_value"]);
        for r in &reports {
            t.push(vec![
                r.name.as_str().into(),
                format!("{:?}", r.verdict).as_str().into(),
                if r.certified { "true" } else { "false" }.into(),
                r.witness.as_ref().map_or(f64::NAN, |w| w.value).into(),
            ]);
        }
        self.tables.push(t);
        let routes_ok = reports[1].passed() || reports[2].passed();
        let passed = reports[0].passed() && routes_ok;
        if !passed {
            let mut failing: Vec<String> = Vec::new();
            if !reports[0].passed() {
                failing.push(describe(&reports[0]));
            }
            if !routes_ok {
                failing.push(describe(&reports[1]));
                failing.push(describe(&reports[2]));
            }
            return Err(Abort::Precondition(failing.join("; ")));
        }
        Ok(TaskResult {
            passed,
            output: json!({ "reports": reports }),
        })
    }

    fn riccati(&mut self, sc: &Scenario, b: &Built) -> Result<TaskResult, Abort> {
        let sol = solve_ergodic_riccati(&b.spec)?;
        let path = solve_horizon_riccati_ode(&b.spec, sc.riccati.horizon, sc.riccati.dt)?;
        let mut t = Table::new("riccati_convergence", &["T", "norm_M_T_minus_Mhat", "m_T_minus_lambdaHat_T"]);
        for k in 0..=100 {
            let tau = sc.riccati.horizon * k as f64 / 100.0;
            let (m, s) = path.at(tau);
            t.push_nums(&[tau, (m - &sol.mhat).norm(), s - sol.lambda_hat * tau]);
        }
        self.tables.push(t);
        let passed = sol.residual_norm <= 1e-10 && sol.stability_margin < 0.0;
        Ok(TaskResult {
            passed,
            output: json!({
                "lambdaHat": sol.lambda_hat,
                "Mhat": rows(&sol.mhat),
                "closedLoop": rows(&sol.closed_loop),
                "residualNorm": sol.residual_norm,
                "stabilityMargin": sol.stability_margin,
                "iterations": sol.iterations,
                "odeHorizon": sc.riccati.horizon,
                "odeRichardsonError": path.richardson_error,
            }),
        })
    }

    fn pde(&mut self, sc: &Scenario, b: &Built) -> Result<TaskResult, Abort> {
        let p = &sc.pde;
        let grid: Arc<Grid> = Arc::new(b.grid.clone().expect("grid built during validation"));
        let t_prev = p.horizon - p.delta;
        let mut snaps = p.snapshots.clone();
        snaps.push(t_prev);
        snaps.sort_by(f64::total_cmp);
        snaps.dedup();
        let opts = CauchyOptions {
            snapshots: snaps,
            theta: p.theta,
            ..CauchyOptions::default()
        };
        let run = solve_cauchy(&b.spec, grid.clone(), p.horizon, p.dt, &opts)?;
        let (earlier, later) = run.surfaces.split_at(run.surfaces.len() - 1);
        let earlier = earlier
            .iter()
            .min_by(|a, b| (a.t - t_prev).abs().total_cmp(&(b.t - t_prev).abs()))
            .expect("the T - delta snapshot is always requested");
        let erg = extract_ergodic(earlier, &later[0], grid.reference_index())?;
        let (lo, hi) = sc.box_bounds();
        let mut surfaces: Vec<_> = p.snapshots.iter().map(|t| run.nearest(*t)).collect();
        surfaces.dedup_by(|a, b| a.t == b.t);
        let diags = compute_h(&b.spec, &surfaces, &erg, &lo, &hi)?;
        let mut t = Table::new(
            "h_diagnostics",
            &["T", "osc_h", "sup_norm_grad_h", "sup_policy_distance", "kappa"],
        );
        for d in &diags {
            t.push_nums(&[d.t, d.oscillation, d.grad_sup, d.policy_sup, d.kappa]);
        }
        self.tables.push(t);

        let coord_cols: &[&str] = match sc.mode() {
            Mode::D1 => &["x", "vhat"],
            Mode::D2 => &["x", "z", "c", "vhat"],
        };
        let mut vt = Table::new("vhat", coord_cols);
        for i in 0..grid.len() {
            let mut r = grid.coords(i);
            r.push(erg.vhat[i]);
            vt.push_nums(&r);
        }
        self.tables.push(vt);

        let finite = erg.lambda.is_finite() && erg.vhat.iter().all(|v| v.is_finite());
        let affine = if b.spec.d() <= b.spec.n() {
            solve_ergodic_riccati(&b.spec).ok().map(|s| s.lambda_hat)
        } else {
            None
        };
        let curvature = match sc.mode() {
            Mode::D2 => Some(max_c_curvature(&grid, &erg.vhat, &lo, &hi)?),
            Mode::D1 => None,
        };
        let mut passed = finite;
        if let Some(lh) = affine {
            passed &= (erg.lambda - lh).abs() <= 1e-3;
            passed &= diags.last().is_none_or(|d| d.grad_sup <= 1e-4);
        }
        Ok(TaskResult {
            passed,
            output: json!({
                "lambda": erg.lambda,
                "lambdaHatAffine": affine,
                "refPoint": erg.ref_point,
                "dt": run.dt,
                "halvings": run.halvings,
                "preflightDt": run.preflight_dt,
                "warnings": run.warnings,
                "hDiagnostics": diags,
                "maxCurvatureInC": curvature,
                "gridNodes": grid.len(),
            }),
        })
    }

    fn simulate(&mut self, sc: &Scenario, b: &Built) -> Result<TaskResult, Abort> {
        let s = &sc.sim;
        let seed = s.master_seed;
        let dual = mc_duality(&b.spec, &b.x0, s.horizon, s.n_paths, s.dt, seed)?;
        let rows_lr = mc_longrun_convergence(&b.spec, &b.x0, s.t_window, &s.t_list, s.n_paths, s.dt, seed)?;
        let delta = vec![s.perturbation; b.spec.n()];
        let sm = mc_supermartingale(&b.spec, &b.x0, s.horizon, &delta, s.n_paths, s.dt, seed)?;

        let mut t = Table::new(
            "longrun_mc",
            &["T", "E_sup_ratio_minus_1", "se_sup_ratio", "E_strategy_distance", "se_strategy_distance"],
        );
        for r in &rows_lr {
            t.push_nums(&[
                r.horizon,
                r.sup_ratio.mean,
                r.sup_ratio.standard_error,
                r.strategy_distance.mean,
                r.strategy_distance.standard_error,
            ]);
        }
        self.tables.push(t);
        let mut e = Table::new("mc_estimates", &["quantity", "mean", "standard_error", "target"]);
        let mut add = |name: &str, m: &longrun_core::simulate::McEstimate, target: f64| {
            e.push(vec![name.into(), m.mean.into(), m.standard_error.into(), Cell::Num(target)]);
        };
        add("duality_wealth", &dual.wealth, dual.target);
        add("duality_deflator", &dual.deflator, dual.target);
        add("deflated_wealth", &sm.deflated_wealth, 1.0);
        add("numeraire_ratio", &sm.numeraire, 1.0);
        self.tables.push(e);

        let sup: Vec<f64> = rows_lr.iter().map(|r| r.sup_ratio.mean).collect();
        let dist: Vec<f64> = rows_lr.iter().map(|r| r.strategy_distance.mean).collect();
        let le = |m: &longrun_core::simulate::McEstimate| m.mean <= 1.0 + 3.0 * m.standard_error;
        let passed = dual.brackets(3.0)
            && decreasing(&sup)
            && decreasing(&dist)
            && le(&sm.deflated_wealth)
            && le(&sm.numeraire);
        Ok(TaskResult {
            passed,
            output: json!({
                "duality": {
                    "target": dual.target,
                    "v": dual.v,
                    "wealth": dual.wealth,
                    "deflator": dual.deflator,
                    "projectedSteps": dual.projected_steps,
                },
                "longrun": rows_lr.iter().map(|r| json!({
                    "T": r.horizon,
                    "supRatio": r.sup_ratio,
                    "strategyDistance": r.strategy_distance,
                })).collect::<Vec<_>>(),
                "supermartingale": {
                    "deflatedWealth": sm.deflated_wealth,
                    "numeraire": sm.numeraire,
                    "admissibleFraction": sm.admissible_fraction,
                },
            }),
        })
    }

    fn counterexample(&mut self, sc: &Scenario, b: &Built) -> Result<TaskResult, Abort> {
        let rep = counterexample_search(&b.spec, sc.sim.master_seed)?;
        let mut t = Table::new("counterexample_coefficients", &["term", "coefficient"]);
        for (name, v) in ["x", "y", "z", "y^2/x", "constant"].iter().zip(rep.coefficients) {
            t.push(vec![(*name).into(), v.into()]);
        }
        self.tables.push(t);
        Ok(TaskResult {
            passed: rep.chain.contradiction,
            output: json!({
                "coefficients": {
                    "x": rep.coefficients[0],
                    "y": rep.coefficients[1],
                    "z": rep.coefficients[2],
                    "y2_over_x": rep.coefficients[3],
                    "constant": rep.coefficients[4],
                },
                "bestM": rows(&rep.best_m),
                "minResidual": rep.min_residual,
                "starts": rep.starts,
                "restrictionsHold": rep.restrictions_hold,
                "chainWitness": {
                    "steps": rep.chain.steps,
                    "forcedZCoefficient": rep.chain.forced_z_coeff,
                    "alternativeBranch": rep.chain.alternative_branch.iter()
                        .map(|(m, xc)| json!({ "M": m, "xCoefficient": xc }))
                        .collect::<Vec<_>>(),
                    "contradiction": rep.chain.contradiction,
                },
            }),
        })
    }

    fn report(&mut self) -> TaskResult {
        let mut made = Vec::new();
        if let Some(t) = self.table("h_diagnostics") {
            let (x, osc, g, pol) = (t.column(0), t.column(1), t.column(2), t.column(3));
            let s = [
                ("osc h", &osc),
                ("sup |grad h|", &g),
                ("sup |pi_T - pi_hat|", &pol),
            ]
            .map(|(l, y)| Series {
                label: l.into(),
                points: x.iter().cloned().zip(y.iter().cloned()).collect(),
            });
            made.push(("h_diagnostics.svg".to_string(), line_plot("h diagnostics", "T", "value", &s, true)));
        }
        if let Some(t) = self.table("riccati_convergence") {
            let s = [Series {
                label: "|M(T) - Mhat|".into(),
                points: t.column(0).into_iter().zip(t.column(1)).collect(),
            }];
            made.push(("riccati_convergence.svg".to_string(), line_plot("M(T) -> Mhat", "T", "Frobenius norm", &s, true)));
        }
        if let Some(t) = self.table("longrun_mc") {
            let x = t.column(0);
            let s = [
                Series {
                    label: "E sup|W^T/W - 1|".into(),
                    points: x.iter().cloned().zip(t.column(1)).collect(),
                },
                Series {
                    label: "E strategy distance".into(),
                    points: x.iter().cloned().zip(t.column(3)).collect(),
                },
            ];
            made.push(("longrun_mc.svg".to_string(), line_plot("long-run convergence", "T", "MC mean", &s, true)));
        }
        let files: Vec<String> = made.iter().map(|(n, _)| n.clone()).collect();
        self.plots.extend(made);
        TaskResult {
            passed: true,
            output: json!({ "plots": files }),
        }
    }
}

fn describe(r: &CheckReport) -> String {
    match &r.witness {
        Some(w) => format!("{} ({}: {:e})", r.name, w.quantity, w.value),
        None => format!("{} ({:?})", r.name, r.verdict),
    }
}

pub fn scenario_hash(sc: &Scenario) -> String {
    let canon = serde_json::to_string(sc).expect("scenario serializes");
    format!("{:x}", Sha256::digest(canon.as_bytes()))
}

pub struct RunOutcome {
    pub exit: i32,
    pub message: Option<String>,
}

/// Executes the tasks in order and writes `report.json`, CSV tables and
/// plots into `out`.
pub fn run(sc: &Scenario, built: &Built, out: &Path, stamp: Option<u64>) -> std::io::Result<RunOutcome> {
    std::fs::create_dir_all(out)?;
    let mut runner = Runner::default();
    let mut records = Vec::new();
    let mut exit = 0;
    let mut message = None;
    for task in &sc.tasks {
        let res = match task {
            Task::Check => runner.check(sc, built),
            Task::Riccati => runner.riccati(sc, built),
            Task::Pde => runner.pde(sc, built),
            Task::Simulate => runner.simulate(sc, built),
            Task::Counterexample => runner.counterexample(sc, built),
            Task::Report => Ok(runner.report()),
        };
        match res {
            Ok(r) => {
                if !r.passed && exit == 0 {
                    exit = EXIT_THRESHOLD;
                }
                records.push(json!({ "task": task, "passed": r.passed, "output": r.output }));
            }
            Err(a) => {
                let (code, msg) = match a {
                    Abort::Precondition(m) => (EXIT_PRECONDITION, format!("failed precondition: {m}")),
                    Abort::Core(e) => (exit_code(&e), e.to_string()),
                };
                records.push(json!({ "task": task, "passed": false, "error": msg }));
                exit = code;
                message = Some(format!("task {task:?}: {msg}"));
                break;
            }
        }
    }
    let mut report = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "scenarioSha256": scenario_hash(sc),
        "seed": sc.sim.master_seed,
        "scenario": sc,
        "tasks": records,
        "passed": exit == 0,
        "exitCode": exit,
    });
    if let Some(ts) = stamp {
        report["generatedUnix"] = json!(ts);
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("report.json"), text + "\n")?;
    for t in &runner.tables {
        t.write_csv(out)?;
    }
    for (name, svg) in &runner.plots {
        std::fs::write(out.join(name), svg)?;
    }
    Ok(RunOutcome { exit, message })
}
