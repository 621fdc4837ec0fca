use std::process::Command;

use hinfsyn_core::codegen::{generate, reverify, GeneratedArtifact, Target};
use hinfsyn_core::model::parse_plant;
use hinfsyn_core::pipeline::{run_specs, RunConfig};
use hinfsyn_core::{PlantModel, Priority, SpecEntry, SpecSet};

fn artifact(target: Target) -> (GeneratedArtifact, PlantModel) {
    let plant = parse_plant(
        r#"{"name": "lint demo", "domain": "continuous",
            "A": [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, -2.0, 0.5]],
            "B": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            "E": [[1.0], [0.0], [0.0]],
            "Cz": [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            "Dz": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]}"#,
    )
    .unwrap();
    let specs = SpecSet {
        hinf: SpecEntry::new(20.0, 2.0, Priority::High),
        hinf_min: 0.0,
        settling_time: SpecEntry::new(10.0, 2.0, Priority::Medium),
        overshoot: SpecEntry::new(0.9, 0.05, Priority::Low),
        decay_rate: None,
    };
    let r = run_specs(&plant, &specs, &RunConfig { max_iter: 2, ..Default::default() }, None).unwrap();
    let rec = r.history.iter().find(|h| h.iteration == r.selected_iteration).unwrap();
    (generate(rec, &r.plant, target).unwrap(), r.plant)
}

fn tool_available(cmd: &str, arg: &str) -> bool {
    Command::new(cmd).arg(arg).output().is_ok_and(|o| o.status.success())
}

#[test]
fn python_source_parses_and_runs() {
    let (art, plant) = artifact(Target::Python);
    assert!(reverify(&art, &plant).unwrap());
    if !tool_available("python3", "--version") {
        eprintln!("python3 not found; grammar check skipped");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(art.source_file_name());
    std::fs::write(&path, &art.controller_source).unwrap();
    let script = format!(
        "import ast, importlib.util\n\
         src = open({path:?}).read()\n\
         ast.parse(src)\n\
         spec = importlib.util.spec_from_file_location('ctrl', {path:?})\n\
         m = importlib.util.module_from_spec(spec); spec.loader.exec_module(m)\n\
         print(repr(m.HInfController().compute([1.0, 2.0, 3.0])))\n",
        path = path.to_str().unwrap()
    );
    let out = Command::new("python3").arg("-c").arg(script).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let k = &art.certificate_manifest.k;
    let x = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let u = k * x;
    let printed = String::from_utf8(out.stdout).unwrap();
    let values: Vec<f64> = printed.trim().trim_matches(['[', ']']).split(',').map(|s| s.trim().parse().unwrap()).collect();
    assert_eq!(values.len(), u.len());
    for (a, b) in values.iter().zip(u.iter()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn c_header_compiles() {
    let (art, plant) = artifact(Target::CHeader);
    assert!(reverify(&art, &plant).unwrap());
    if !tool_available("cc", "--version") {
        eprintln!("cc not found; grammar check skipped");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(art.source_file_name()), &art.controller_source).unwrap();
    let main = dir.path().join("main.c");
    std::fs::write(
        &main,
        format!(
            "#include \"{}\"\nint main(void) {{ double x[3] = {{1, 2, 3}}; double u[2]; lint_demo_compute(x, u); return 0; }}\n",
            art.source_file_name()
        ),
    )
    .unwrap();
    let out = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&main).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
