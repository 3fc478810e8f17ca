//! End-to-end tests driving the installed binary: exit codes, report shapes
//! against the published schemas, determinism, and the flat-file emitters.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn smallnoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smallnoise"))
        .args(args)
        .output()
        .expect("binary should launch")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code (signal?)")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

// -----------------------------------------------------------------------
// Minimal structural schema checker: type unions, required, properties,
// items, enum. Enough to pin the report format without a validator crate.
// -----------------------------------------------------------------------

fn type_matches(ty: &str, value: &Value) -> bool {
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        "integer" => value.is_i64() || value.is_u64(),
        "number" => value.is_number(),
        other => panic!("unexpected schema type {other:?}"),
    }
}

fn check_schema(schema: &Value, value: &Value, at: &str, errors: &mut Vec<String>) {
    if let Some(ty) = schema.get("type") {
        let allowed: Vec<&str> = match ty {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().map(|t| t.as_str().unwrap()).collect(),
            _ => panic!("malformed type at {at}"),
        };
        if !allowed.iter().any(|t| type_matches(t, value)) {
            errors.push(format!("{at}: type {allowed:?} violated by {value}"));
            return;
        }
        // A union with null uses null to stand for "absent": nothing further
        // to check on that branch.
        if value.is_null() {
            return;
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            errors.push(format!("{at}: {value} not in enum {options:?}"));
        }
    }
    if let Some(required) = schema.get("required").and_then(Value::as_array) {
        for key in required.iter().map(|k| k.as_str().unwrap()) {
            if value.get(key).is_none() {
                errors.push(format!("{at}: missing required key {key:?}"));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        for (key, sub) in props {
            if let Some(v) = value.get(key) {
                check_schema(sub, v, &format!("{at}.{key}"), errors);
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            check_schema(items, v, &format!("{at}[{i}]"), errors);
        }
    }
}

fn assert_schema(name: &str, value: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas")
        .join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
    let schema: Value = serde_json::from_str(&text).unwrap();
    let mut errors = Vec::new();
    check_schema(&schema, value, "$", &mut errors);
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}

// -----------------------------------------------------------------------
// Subcommand behavior.
// -----------------------------------------------------------------------

#[test]
fn minimize_langevin_reports_the_cubic_spline_solution() {
    let out = smallnoise(&[
        "minimize",
        "--model",
        "builtin:langevin",
        "--target",
        "1.0",
        "--multistart",
        "32",
        "--steps",
        "512",
    ]);
    assert_eq!(exit_code(&out), 0);
    let report = stdout_json(&out);
    assert_schema("minimize.schema.json", &report);
    assert!((report["lambda"].as_f64().unwrap() - 1.5).abs() < 1e-9);
    assert_eq!(report["distinct_solutions"], 1);
    let p0 = report["minimizers"][0]["p0"].as_array().unwrap();
    assert!((p0[0].as_f64().unwrap() - 3.0).abs() < 1e-7);
    assert!((p0[1].as_f64().unwrap() - 3.0).abs() < 1e-7);
}

#[test]
fn expand_matches_the_gaussian_closed_form() {
    let out = smallnoise(&[
        "expand",
        "--model",
        "builtin:ou1d",
        "--param",
        "alpha=1",
        "--param",
        "beta=0.5",
        "--param",
        "gamma=1",
        "--param",
        "yhat0=0.3",
        "--target",
        "2.0",
        "--multistart",
        "16",
        "--steps",
        "512",
        "--check-gradient",
    ]);
    assert_eq!(exit_code(&out), 0);
    let report = stdout_json(&out);
    assert_schema("expand.schema.json", &report);

    // For dY = (alpha eps + beta Y) dt + eps gamma dW the projection is the
    // full state; Y(T) is Gaussian with variance eps^2 s2 and mean eps mu:
    //   s2 = gamma^2 (e^{2 beta T} - 1) / (2 beta),
    //   mu = yhat0 e^{beta T} + alpha (e^{beta T} - 1) / beta.
    let (alpha, beta, yhat0, a): (f64, f64, f64, f64) = (1.0, 0.5, 0.3, 2.0);
    let s2 = (f64::exp(2.0 * beta) - 1.0) / (2.0 * beta);
    let mu = yhat0 * f64::exp(beta) + alpha * (f64::exp(beta) - 1.0) / beta;
    assert!((report["c1"].as_f64().unwrap() - a * a / (2.0 * s2)).abs() < 1e-6);
    assert!((report["c2"].as_f64().unwrap() - mu * a / s2).abs() < 1e-6);
    assert_eq!(report["verdict"], "ND_HOLDS");
    assert_eq!(report["certified"], true);
    assert!(report["contributions"][0]["gradient_gap"].as_f64().unwrap() < 1e-6);
}

#[test]
fn check_nd_certifies_the_heisenberg_arc() {
    let out = smallnoise(&[
        "check-nd",
        "--model",
        "builtin:heisenberg",
        "--mask",
        "0,1,2",
        "--target",
        "1.0,0.0,0.14269908169872414",
        "--multistart",
        "48",
        "--steps",
        "512",
        "--hessian-oracle",
        "--oracle-grid",
        "24",
    ]);
    assert_eq!(exit_code(&out), 0);
    let report = stdout_json(&out);
    assert_schema("check_nd.schema.json", &report);
    assert_eq!(report["verdict"], "ND_HOLDS");
    let cert = &report["certificates"][0];
    assert_eq!(cert["covariance_invertible"], true);
    assert_eq!(cert["focality"], "NON_FOCAL");
    assert!(cert["hessian"]["lambda_min"].as_f64().unwrap() > 0.0);
    // Two driving fields, full rank only after one bracket level.
    assert_eq!(report["strong_bracket"]["full_rank"], true);
    assert_eq!(report["strong_bracket"]["depth_used"], 2);
}

#[test]
fn strict_nd_fails_on_the_focal_metric() {
    let out = smallnoise(&[
        "expand",
        "--model",
        "builtin:flatmetric",
        "--param",
        "theta=1",
        "--target",
        "1.0",
        "--multistart",
        "16",
        "--steps",
        "256",
        "--strict-nd",
    ]);
    assert_eq!(exit_code(&out), 2);
    // The report is still emitted alongside the failing status.
    let report = stdout_json(&out);
    assert_eq!(report["verdict"], "FOCAL");
    assert_eq!(report["certified"], false);
}

#[test]
fn unreachable_target_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("stuck.json");
    std::fs::write(
        &model,
        r#"{
          "dims": {"d": 2, "m": 1, "l": 2},
          "fields": [
            {"components": [[], []]},
            {"components": [[{"coeff": 1.0, "exps": [0, 0]}], []]}
          ]
        }"#,
    )
    .unwrap();
    let out = smallnoise(&[
        "minimize",
        "--model",
        model.to_str().unwrap(),
        "--target",
        "0.0,1.0",
        "--multistart",
        "8",
        "--steps",
        "64",
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn degenerate_target_exits_with_code_3() {
    // The deterministic Langevin flow from the origin stays at the origin,
    // so a = 0 costs no control energy and the expansion does not apply.
    let out = smallnoise(&[
        "expand",
        "--model",
        "builtin:langevin",
        "--target",
        "0.0",
        "--multistart",
        "8",
        "--steps",
        "256",
    ]);
    assert_eq!(exit_code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate target"));
}

#[test]
fn short_time_forces_a_vanishing_subleading_exponent() {
    let out = smallnoise(&[
        "short-time",
        "--model",
        "builtin:heisenberg",
        "--target",
        "0.6,0.8,0.0",
        "--multistart",
        "48",
        "--steps",
        "512",
    ]);
    assert_eq!(exit_code(&out), 0);
    let report = stdout_json(&out);
    assert_schema("expand.schema.json", &report);
    assert_eq!(report["mode"], "SHORT_TIME");
    assert_eq!(report["c2"].as_f64().unwrap(), 0.0);
    assert!((report["distance"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn short_time_rejects_an_explicit_horizon() {
    let out = smallnoise(&[
        "short-time",
        "--model",
        "builtin:heisenberg",
        "--target",
        "0.6,0.8,0.0",
        "--horizon",
        "2.0",
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unit horizon"));
}

#[test]
fn mc_validate_recovers_gaussian_exponents() {
    // Pure Brownian projection: log f(eps) = -a^2/(2 eps^2) - ln eps + const,
    // so c1 = a^2/2 = 0.125 and c2 = 0. Extrapolating the 3-rung fit to
    // eps = 0 amplifies the per-rung noise roughly tenfold, hence the path
    // count; the run is still around 1e7 Euler steps.
    let out = smallnoise(&[
        "mc-validate",
        "--model",
        "builtin:flatmetric",
        "--param",
        "theta=0",
        "--target",
        "0.5",
        "--epsilons",
        "0.8,0.6,0.4",
        "--paths",
        "40000",
        "--euler-steps",
        "100",
        "--reference",
        "0.125,0",
        "--radii",
        "6.0",
    ]);
    assert_eq!(exit_code(&out), 0);
    let report = stdout_json(&out);
    assert_schema("mc_validate.schema.json", &report);
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert_eq!(report["valid"], true);
    let c1_hat = report["fit"]["c1_hat"].as_f64().unwrap();
    assert!((c1_hat - 0.125).abs() < 0.1, "c1_hat = {c1_hat}");
    assert_eq!(report["reference"]["c1"].as_f64().unwrap(), 0.125);
    assert!(report["c1_relative_error"].is_number());
    assert!(report["rows"][0]["localization"][0]["prob"].is_number());
}

#[test]
fn toml_model_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("area.toml");
    std::fs::write(
        &model,
        r#"
name = "area-rule"
dims = { d = 3, m = 2, l = 2 }
projection_mask = [0, 2]
coords = ["x", "y", "z"]

[start]
x0 = [0.0, 0.0, 0.0]

[[fields]]
components = [[], [], []]

[[fields]]
components = [
  [{ coeff = 1.0, exps = [0, 0, 0] }],
  [],
  [{ coeff = -0.5, exps = [0, 1, 0] }],
]

[[fields]]
components = [
  [],
  [{ coeff = 1.0, exps = [0, 0, 0] }],
  [{ coeff = 0.5, exps = [1, 0, 0] }],
]
"#,
    )
    .unwrap();
    let out = smallnoise(&[
        "minimize",
        "--model",
        model.to_str().unwrap(),
        "--target",
        "0.8,0.1",
        "--multistart",
        "32",
        "--steps",
        "256",
    ]);
    assert_eq!(exit_code(&out), 0);
    let report = stdout_json(&out);
    assert_schema("minimize.schema.json", &report);
    assert_eq!(report["manifest"]["mask"], serde_json::json!([0, 2]));
    assert!(report["lambda"].as_f64().unwrap() > 0.0);
}

#[test]
fn param_and_mask_only_apply_to_builtins() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    std::fs::write(
        &model,
        r#"{"dims": {"d": 1, "m": 1, "l": 1},
            "fields": [{"components": [[]]}, {"components": [[{"coeff": 1.0, "exps": [0]}]]}]}"#,
    )
    .unwrap();
    let out = smallnoise(&[
        "minimize",
        "--model",
        model.to_str().unwrap(),
        "--param",
        "beta=1",
        "--target",
        "1.0",
    ]);
    assert_eq!(exit_code(&out), 1);
    let out = smallnoise(&[
        "minimize",
        "--model",
        model.to_str().unwrap(),
        "--mask",
        "0",
        "--target",
        "1.0",
    ]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn unknown_builtin_exits_with_code_1() {
    let out = smallnoise(&["minimize", "--model", "builtin:nosuch", "--target", "1.0"]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nosuch"));
}

// -----------------------------------------------------------------------
// Files on disk: reports, plot data, path dumps.
// -----------------------------------------------------------------------

#[test]
fn emit_paths_writes_one_csv_per_minimizer() {
    let dir = tempfile::tempdir().unwrap();
    let paths = dir.path().join("arc.csv");
    let report_file = dir.path().join("report.json");
    let out = smallnoise(&[
        "minimize",
        "--model",
        "builtin:langevin",
        "--target",
        "1.0",
        "--multistart",
        "16",
        "--steps",
        "256",
        "--emit-paths",
        paths.to_str().unwrap(),
        "--out",
        report_file.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    assert!(out.stdout.is_empty());
    let csv = std::fs::read_to_string(dir.path().join("arc-0.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "t,x_y,x_z,p_y,p_z,hdot1");
    // Header plus 513 nodes: the stored path is the polish stage at 2 x 256
    // intervals.
    assert_eq!(csv.lines().count(), 514);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(&report_file).unwrap()).unwrap();
    assert_schema("minimize.schema.json", &report);
}

#[test]
fn emit_plot_data_tabulates_the_predicted_curve() {
    let dir = tempfile::tempdir().unwrap();
    let plot = dir.path().join("curve.csv");
    let out = smallnoise(&[
        "expand",
        "--model",
        "builtin:langevin",
        "--target",
        "1.0",
        "--multistart",
        "16",
        "--steps",
        "256",
        "--epsilons",
        "0.5,0.25",
        "--emit-plot-data",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let csv = std::fs::read_to_string(&plot).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "eps,predicted_log_density");
    // langevin at a=1: c1 = 1.5, c2 = 0 (zero start shift), ell = 1, so at
    // eps = 0.5 the prediction is -6 - ln(0.5).
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let predicted: f64 = row[1].parse().unwrap();
    assert!((predicted - (-6.0 - 0.5f64.ln())).abs() < 1e-9);
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn reports_are_deterministic_up_to_the_timestamp() {
    let run = || {
        let out = smallnoise(&[
            "expand",
            "--model",
            "builtin:heisenberg",
            "--mask",
            "0,1,2",
            "--target",
            "1.0,0.0,0.14269908169872414",
            "--multistart",
            "32",
            "--steps",
            "256",
            "--seed",
            "7",
        ]);
        assert_eq!(exit_code(&out), 0);
        let mut v = stdout_json(&out);
        v["manifest"]["timestamp"] = Value::Null;
        v
    };
    assert_eq!(run(), run());
}

#[test]
fn csv_report_formats_have_stable_headers() {
    let out = smallnoise(&[
        "minimize",
        "--model",
        "builtin:langevin",
        "--target",
        "1.0",
        "--multistart",
        "16",
        "--steps",
        "256",
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.starts_with(
        "index,energy,energy_invariant,residual_norm,residual_doubled,p0,q_terminal,x_terminal\n"
    ));
    // One minimizer row; p0 is semicolon-joined so the field count is fixed.
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 8);

    let out = smallnoise(&[
        "mc-validate",
        "--model",
        "builtin:flatmetric",
        "--param",
        "theta=0",
        "--target",
        "0.5",
        "--epsilons",
        "0.8,0.6,0.4",
        "--paths",
        "1000",
        "--euler-steps",
        "50",
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.starts_with("eps,log_density,stderr_log,density,n_used,censored_fraction,bandwidth\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn expand_rejects_csv_reports() {
    let out = smallnoise(&[
        "expand",
        "--model",
        "builtin:langevin",
        "--target",
        "1.0",
        "--multistart",
        "8",
        "--steps",
        "256",
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("csv output"));
}

#[test]
fn jobs_flag_initializes_a_bounded_pool() {
    let out = smallnoise(&[
        "--jobs",
        "1",
        "minimize",
        "--model",
        "builtin:langevin",
        "--target",
        "1.0",
        "--multistart",
        "8",
        "--steps",
        "256",
    ]);
    assert_eq!(exit_code(&out), 0);
    let out = smallnoise(&["--jobs", "0", "minimize", "--model", "builtin:langevin", "--target", "1.0"]);
    assert_eq!(exit_code(&out), 1);
}
