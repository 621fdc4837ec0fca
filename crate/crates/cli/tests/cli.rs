use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hinfsyn"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const STABLE_PLANT: &str = r#"{
  "name": "stable-demo",
  "domain": "continuous",
  "A": [[-1.0, 0.5], [0.0, -2.0]],
  "B": [[0.0], [1.0]],
  "E": [[1.0, 0.0], [0.0, 1.0]],
  "Cz": [[1.0, 0.0], [0.0, 0.0]],
  "Dz": [[0.0], [1.0]]
}"#;

const UNSTABILIZABLE_PLANT: &str = r#"{
  "name": "stuck",
  "domain": "continuous",
  "A": [[1.0, 0.0], [0.0, -1.0]],
  "B": [[0.0], [1.0]],
  "E": [[1.0], [1.0]],
  "Cz": [[1.0, 0.0], [0.0, 0.0]],
  "Dz": [[0.0], [1.0]]
}"#;

#[test]
fn pipeline_on_loose_requirements_exits_zero_with_three_files() {
    let tmp = tempfile::tempdir().unwrap();
    let plant = write(tmp.path(), "plant.json", STABLE_PLANT);
    let req = write(tmp.path(), "req.txt", "H-infinity norm less than 50; settling time under 20 seconds; overshoot below 50%");
    let out_dir = tmp.path().join("out");
    let out = run(&["pipeline", "--plant", p(&plant), "--req", p(&req), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["stable_demo_certificate.json", "stable_demo_controller.py", "stable_demo_run.json"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("stable_demo_run.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
}

#[test]
fn pipeline_reads_requirements_from_stdin() {
    use std::io::Write;
    let tmp = tempfile::tempdir().unwrap();
    let plant = write(tmp.path(), "plant.json", STABLE_PLANT);
    let mut child = bin()
        .args(["pipeline", "--plant", p(&plant), "--req", "-", "--target", "c", "--out", p(tmp.path())])
        .stdin(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"H-infinity norm less than 50; overshoot below 50%").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("stable_demo_controller.h").exists());
}

#[test]
fn unstabilizable_plant_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let plant = write(tmp.path(), "plant.json", UNSTABILIZABLE_PLANT);
    let req = write(tmp.path(), "req.txt", "H-infinity norm less than 5");
    let out = run(&["pipeline", "--plant", p(&plant), "--req", p(&req), "--max-iter", "3", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 1);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn nn1_like_fixture_exits_two_with_best_design() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "pipeline",
        "--plant",
        p(&fixture("nn1_like.json")),
        "--req",
        p(&fixture("nn1_requirements.txt")),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("NN1_like_run.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], false);
    let kinds: Vec<_> = report["final_report"]["violations"].as_array().unwrap().iter().map(|v| v["kind"].clone()).collect();
    assert_eq!(kinds, [serde_json::json!("overshoot")]);
    assert!(tmp.path().join("NN1_like_controller.py").exists());
}

#[test]
fn missing_plant_flag_is_usage_error() {
    assert_eq!(code(&run(&["pipeline", "--req", "x"])), 64);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn gen_suite_respects_unstable_fraction_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(&["gen-suite", "--count", "14", "--seed", "3", "--unstable-frac", "0.142857", "--out", p(dir)]);
        assert_eq!(code(&out), 0);
    }
    let suite: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("suite.json")).unwrap()).unwrap();
    let entries = suite["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 14);
    let mut unstable = 0;
    for e in entries {
        let file = e["plant"].as_str().unwrap();
        let text = std::fs::read_to_string(a.join(file)).unwrap();
        assert_eq!(text, std::fs::read_to_string(b.join(file)).unwrap());
        let plant = hinfsyn_core::model::parse_plant(&text).unwrap();
        let spec = hinfsyn_core::analysis::eigvals(&plant.a).unwrap();
        unstable += (spec.max_real_part > 0.0) as usize;
    }
    assert_eq!(unstable, 2);
}

#[test]
fn gen_suite_zero_count_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["gen-suite", "--count", "0", "--out", p(tmp.path())])), 64);
}

#[test]
fn empty_suite_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = write(tmp.path(), "suite.json", r#"{"schema_version": 1, "entries": []}"#);
    assert_eq!(code(&run(&["bench", "--suite", p(&suite), "--out", p(&tmp.path().join("o"))])), 64);
}

#[test]
fn single_method_bench_has_one_column() {
    let tmp = tempfile::tempdir().unwrap();
    let suite_dir = tmp.path().join("s");
    assert_eq!(code(&run(&["gen-suite", "--count", "2", "--seed", "1", "--out", p(&suite_dir)])), 0);
    let out_dir = tmp.path().join("o");
    let out = run(&["bench", "--suite", p(&suite_dir.join("suite.json")), "--methods", "lqr_h2", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("aggregate.json")).unwrap()).unwrap();
    let methods = report["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 1);
    assert_eq!(methods[0]["method"], "lqr_h2");
    let csv = std::fs::read_to_string(out_dir.join("rows.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert_eq!(
        csv.lines().next().unwrap(),
        "problem,method,success,iterations,gamma,gamma_over_target,decay_sat,dist_rej,settling_median,overshoot_median"
    );
}

#[test]
fn bench_rows_and_medians_recompute() {
    let tmp = tempfile::tempdir().unwrap();
    let suite_dir = tmp.path().join("s");
    assert_eq!(code(&run(&["gen-suite", "--count", "4", "--seed", "8", "--unstable-frac", "0.25", "--out", p(&suite_dir)])), 0);
    let out_dir = tmp.path().join("o");
    assert_eq!(code(&run(&["bench", "--suite", p(&suite_dir.join("suite.json")), "--out", p(&out_dir), "--jobs", "2"])), 0);
    let csv = std::fs::read_to_string(out_dir.join("rows.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 4 * 5);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("aggregate.json")).unwrap()).unwrap();
    for summary in report["methods"].as_array().unwrap() {
        let method = summary["method"].as_str().unwrap();
        let mine: Vec<_> = rows.iter().filter(|r| r[1] == method).collect();
        let rate = mine.iter().filter(|r| r[2] == "true").count() as f64 / mine.len() as f64;
        assert_eq!(summary["success_rate"].as_f64().unwrap(), rate);
        let mut ratios: Vec<f64> = mine.iter().filter(|r| !r[5].is_empty()).map(|r| r[5].parse().unwrap()).collect();
        ratios.sort_by(f64::total_cmp);
        let k = ratios.len();
        if k > 0 {
            let median = if k % 2 == 1 { ratios[k / 2] } else { 0.5 * (ratios[k / 2 - 1] + ratios[k / 2]) };
            let reported = summary["gamma_over_target_median"].as_f64().unwrap();
            assert!((median - reported).abs() <= 1e-15 * median.abs().max(1.0), "{method}: {median} vs {reported}");
        }
    }
    assert!(out_dir.join("panels/panel_a_success_rate.csv").exists());
}

#[test]
fn d2c_discrete_fixture_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let out_file = tmp.path().join("c.json");
    assert_eq!(code(&run(&["d2c", "--plant", p(&fixture("discrete_ts1.json")), "--out", p(&out_file)])), 0);
    let plant = hinfsyn_core::model::load_plant(&out_file).unwrap();
    assert_eq!(plant.domain, hinfsyn_core::TimeDomain::Continuous);
    assert!(hinfsyn_core::analysis::eigvals(&plant.a).unwrap().max_real_part < 0.0);
}

#[test]
fn d2c_rejects_continuous_input() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["d2c", "--plant", p(&fixture("nn1_like.json")), "--out", p(&tmp.path().join("c.json"))]);
    assert_eq!(code(&out), 64);
}

#[test]
fn d2c_singular_shift_exits_one_with_condition_number() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["d2c", "--plant", p(&fixture("singular_discrete.json")), "--out", p(&tmp.path().join("c.json"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("condition number"));
}
