use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_longrun-wishart"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("run")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .args(["--stamp", "none"])
        .args(extra)
        .output()
        .unwrap()
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn benchmark_lambda_hat() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&bundled("benchmark_d1.toml"), dir.path(), &["--override", r#"tasks=["riccati", "report"]"#]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path());
    let lam = r["tasks"][0]["output"]["lambdaHat"].as_f64().unwrap();
    assert!((lam - (-0.2335943621)).abs() <= 1e-9, "{lam}");
    let csv = std::fs::read_to_string(dir.path().join("riccati_convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "T,norm_M_T_minus_Mhat,m_T_minus_lambdaHat_T");
    for cell in lines.next().unwrap().split(',') {
        let mantissa = cell.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17, "{cell}");
    }
    assert!(dir.path().join("riccati_convergence.svg").exists());
}

#[test]
fn counterexample_chain_witness() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &bundled("counterexample_d2.toml"),
        dir.path(),
        &["--override", r#"tasks=["check", "counterexample"]"#],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(dir.path());
    let cx = &r["tasks"][1]["output"];
    assert_eq!(cx["chainWitness"]["forcedZCoefficient"].as_f64(), Some(-0.1));
    assert_eq!(cx["chainWitness"]["contradiction"].as_bool(), Some(true));
    assert!(cx["minResidual"].as_f64().unwrap() > 0.0);
}

#[test]
fn empty_task_list_echoes_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&bundled("benchmark_d1.toml"), dir.path(), &["--override", "tasks=[]"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(dir.path());
    assert_eq!(r["tasks"].as_array().unwrap().len(), 0);
    assert_eq!(r["scenario"]["model"]["d"].as_u64(), Some(1));
    assert_eq!(r["passed"].as_bool(), Some(true));
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const PLANAR: &str = r#"
[model]
d = 2
n = 1
p = -1.0
K = [[1.0, 0.0], [0.0, 1.0]]
L = [[2.0, 0.0], [0.0, 2.0]]
Lambda = [[1.0, 0.0], [0.0, 1.0]]

[model.market]
r0 = 0.02
r1 = [[0.1, 0.0], [0.0, 0.1]]
zeta = [[1.0, 0.0]]
nu = [0.5]
rho = [0.5, 0.5]
"#;

#[test]
fn validate_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin().arg("validate").arg(write(dir.path(), "ok.toml", PLANAR)).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));

    let bad_k = PLANAR.replace("K = [[1.0, 0.0], [0.0, 1.0]]", "K = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]");
    let o = bin().arg("validate").arg(write(dir.path(), "k.toml", &bad_k)).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.K") && stderr(&o).contains("2x3"), "{}", stderr(&o));

    let bad_p = PLANAR.replace("nu = [0.5]", r#"nu = { provider = "wobbly", value = [0.5] }"#);
    let o = bin().arg("validate").arg(write(dir.path(), "p.toml", &bad_p)).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("wobbly") && e.contains("constant, saturating, decaying"), "{e}");

    let tagged = PLANAR.replace("nu = [0.5]", r#"nu = { provider = "saturating", value = [0.5], amp = 0.2 }"#);
    let o = bin().arg("validate").arg(write(dir.path(), "t.toml", &tagged)).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let syntax = PLANAR.replace("p = -1.0", "p = = -1.0");
    let o = bin().arg("validate").arg(write(dir.path(), "s.toml", &syntax)).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn precondition_and_numerical_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &bundled("benchmark_d1.toml"),
        dir.path(),
        &["--override", r#"tasks=["check"]"#, "--override", "model.L=[1.0]"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("wellposedness"), "{}", stderr(&o));
    assert_eq!(report(dir.path())["tasks"][0]["passed"].as_bool(), Some(false));

    let o = run(&bundled("counterexample_d2.toml"), dir.path(), &["--override", r#"tasks=["riccati"]"#]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("d <= n"));

    let o = run(
        &bundled("benchmark_d1.toml"),
        dir.path(),
        &[
            "--override",
            r#"tasks=["simulate"]"#,
            "--override",
            "model.K=[20.0]",
            "--override",
            "sim.T=5.0",
            "--override",
            "sim.nPaths=10",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

const SMALL_SIM: [&str; 6] = [
    "--override",
    r#"tasks=["riccati", "simulate", "report"]"#,
    "--override",
    "sim.nPaths=400",
    "--override",
    "sim.T_list=[2.0, 5.0]",
];

#[test]
fn reports_are_deterministic_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let sc = bundled("benchmark_d1.toml");
    let mut args_a = SMALL_SIM.to_vec();
    args_a.extend(["--threads", "1", "--seed", "11"]);
    let mut args_b = SMALL_SIM.to_vec();
    args_b.extend(["--threads", "3", "--seed", "11"]);
    run(&sc, &a, &args_a);
    run(&sc, &b, &args_b);
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());
    assert_eq!(
        std::fs::read(a.join("longrun_mc.csv")).unwrap(),
        std::fs::read(b.join("longrun_mc.csv")).unwrap()
    );
    let parsed = report(&a);
    assert_eq!(parsed["seed"].as_u64(), Some(11));

    let embedded = write(dir.path(), "embedded.json", &parsed["scenario"].to_string());
    let o = run(&embedded, &c, &[]);
    assert!(o.status.code().is_some(), "{}", stderr(&o));
    assert_eq!(ra, std::fs::read(c.join("report.json")).unwrap());
}

#[test]
fn seed_changes_monte_carlo_output() {
    let dir = tempfile::tempdir().unwrap();
    let sc = bundled("benchmark_d1.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut args = SMALL_SIM.to_vec();
    args.extend(["--seed", "1"]);
    run(&sc, &a, &args);
    args.pop();
    args.push("2");
    run(&sc, &b, &args);
    let (ra, rb) = (report(&a), report(&b));
    assert_ne!(ra["scenarioSha256"], rb["scenarioSha256"]);
    assert_ne!(
        ra["tasks"][1]["output"]["duality"]["wealth"]["mean"],
        rb["tasks"][1]["output"]["duality"]["wealth"]["mean"]
    );
}

#[test]
fn stamp_adds_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg(bundled("benchmark_d1.toml"))
        .arg("--out")
        .arg(dir.path())
        .args(["--override", "tasks=[]"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(report(dir.path())["generatedUnix"].as_u64().is_some());
}

#[test]
fn bundled_names_resolve_without_path() {
    let o = bin().args(["validate", "counterexample_d2.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = bin().args(["validate", "nonexistent.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("benchmark_d1.toml"));
}
