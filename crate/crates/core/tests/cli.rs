use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlirt::commands::{simulated_config, FitReport, SweepReport, TruthFile, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK};
use mlirt::io::{load_dataset, read_json, to_json_rounded, ModelConfig};
use mlirt::simulate::{default_design, generate_dataset, SimulationDesign};
use tempfile::TempDir;

fn mlirt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlirt"))
        .args(args)
        .env("RAYON_NUM_THREADS", "2")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_design(seed: u64) -> SimulationDesign {
    let mut d = default_design(seed);
    d.n_groups = 40;
    d
}

struct Sim {
    _dir: TempDir,
    root: PathBuf,
}

impl Sim {
    fn new(seed: u64) -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let design = root.join("design.toml");
        fs::write(&design, toml::to_string(&small_design(seed)).unwrap()).unwrap();
        let o = mlirt(&["simulate", "--design", s(&design), "--out", s(&root.join("data"))]);
        assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
        Self { _dir: dir, root }
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn data_args(&self) -> Vec<String> {
        ["students.csv", "schools.csv", "model.toml"]
            .iter()
            .zip(["--students", "--schools", "--config"])
            .flat_map(|(f, flag)| [flag.to_string(), self.data(f).display().to_string()])
            .collect()
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.data_args());
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        mlirt(&refs)
    }
}

fn rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulated_files_load_back_to_the_generated_dataset() {
    let sim = Sim::new(3);
    let design = small_design(3);
    let (expected, labels) = generate_dataset(&design).unwrap();
    let cfg = ModelConfig::from_path(&sim.data("model.toml")).unwrap();
    assert_eq!(cfg, simulated_config(&design));
    let loaded = load_dataset(&sim.data("students.csv"), &sim.data("schools.csv"), &cfg).unwrap();
    assert_eq!(loaded, expected);
    let truth: TruthFile = read_json(&sim.data("truth.json")).unwrap();
    assert_eq!(truth.school_types, labels.types.iter().map(|u| u + 1).collect::<Vec<_>>());
    assert_eq!(truth.spec, design.spec);
}

#[test]
fn fit_then_classify_reproduces_assignments() {
    let sim = Sim::new(4);
    let fit_dir = sim.root.join("fit");
    let o = sim.run("fit", &["--starts", "2", "--out", s(&fit_dir)]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let report_path = fit_dir.join("fit.json");
    let cls_dir = sim.root.join("classify");
    let o = sim.run("classify", &["--report", s(&report_path), "--out", s(&cls_dir)]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    // The report stores parameters to 12 significant digits, so posteriors agree closely but not bitwise.
    for f in ["student_classes.csv", "school_types.csv"] {
        let (a, b) = (rows(&fit_dir.join(f)), rows(&cls_dir.join(f)));
        assert_eq!(a.len(), b.len());
        assert_eq!(a[0], b[0]);
        for (x, y) in a.iter().zip(&b).skip(1) {
            let n = x.len() - 1;
            assert_eq!(x[..n], y[..n], "{f}");
            let (px, py): (f64, f64) = (x[n].parse().unwrap(), y[n].parse().unwrap());
            assert!((px - py).abs() < 1e-9, "{f}");
        }
    }

    let text = fs::read_to_string(&report_path).unwrap();
    let report: FitReport = serde_json::from_str(&text).unwrap();
    assert_eq!(to_json_rounded(&report), text);
    assert_eq!(report.trace.len(), report.n_iter + 1);
    assert!(report.trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
    assert!((report.average_class_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((report.average_type_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn one_pl_has_r_minus_s_fewer_parameters() {
    let sim = Sim::new(5);
    let mut n_par = Vec::new();
    let mut loglik = Vec::new();
    for p in ["1pl", "2pl"] {
        let out = sim.root.join(p);
        let o = sim.run("fit", &["--parameterization", p, "--starts", "2", "--out", s(&out)]);
        assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
        let r: FitReport = read_json(&out.join("fit.json")).unwrap();
        n_par.push(r.n_par);
        loglik.push(r.loglik);
    }
    assert_eq!(n_par[1] - n_par[0], 15 - 1);
    assert!(loglik[1] >= loglik[0] - 1e-6);
}

#[test]
fn sweep_over_a_single_type_count() {
    let sim = Sim::new(6);
    let out = sim.root.join("sweep");
    let o = sim.run("sweep", &["--ku", "2", "--starts", "2", "--out", s(&out)]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let r: SweepReport = read_json(&out.join("sweep.json")).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.chosen_types, Some(2));
    assert_eq!(r.bic_n, 800);
}

#[test]
fn sweep_rejects_malformed_range() {
    let sim = Sim::new(6);
    let o = sim.run("sweep", &["--ku", "3..1", "--out", s(&sim.root.join("x"))]);
    assert_eq!(code(&o), EXIT_INPUT);
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let sim = Sim::new(7);
    let o = sim.run("fit", &["--max-iter", "2", "--starts", "1", "--out", s(&sim.root.join("fit"))]);
    assert_eq!(code(&o), EXIT_NOT_CONVERGED);
    let r: FitReport = read_json(&sim.root.join("fit").join("fit.json")).unwrap();
    assert!(!r.converged);
}

#[test]
fn missing_input_file_is_an_input_error() {
    let sim = Sim::new(8);
    fs::remove_file(sim.data("schools.csv")).unwrap();
    let o = sim.run("fit", &["--out", s(&sim.root.join("fit"))]);
    assert_eq!(code(&o), EXIT_INPUT);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schools.csv"));
}

#[test]
fn bad_response_token_names_its_location() {
    let sim = Sim::new(9);
    let path = sim.data("students.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut cells: Vec<&str> = lines[3].split(',').collect();
    cells[4] = "2";
    lines[3] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = sim.run("fit", &["--out", s(&sim.root.join("fit"))]);
    assert_eq!(code(&o), EXIT_INPUT);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("item_3"), "{err}");
}

#[test]
fn classify_rejects_a_report_with_different_items() {
    let sim = Sim::new(10);
    let fit_dir = sim.root.join("fit");
    assert_eq!(code(&sim.run("fit", &["--starts", "1", "--out", s(&fit_dir)])), EXIT_OK);
    let cfg_path = sim.data("model.toml");
    let text = fs::read_to_string(&cfg_path).unwrap();
    let two_dims = "dimensions = [1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2]\nreference_items = [1, 9]";
    let edited = text
        .lines()
        .filter(|l| !l.starts_with("reference_items"))
        .map(|l| if l.starts_with("dimensions") { two_dims } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&cfg_path, edited + "\n").unwrap();
    let o = sim.run("classify", &["--report", s(&fit_dir.join("fit.json")), "--out", s(&sim.root.join("c"))]);
    assert_eq!(code(&o), EXIT_INPUT);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = Sim::new(11);
    let b = Sim::new(11);
    for f in ["students.csv", "schools.csv", "model.toml", "truth.json"] {
        assert_eq!(fs::read(a.data(f)).unwrap(), fs::read(b.data(f)).unwrap(), "{f}");
    }
    let mut outs = Vec::new();
    for sim in [&a, &b] {
        let out = sim.root.join("fit");
        assert_eq!(code(&sim.run("fit", &["--starts", "3", "--seed", "9", "--out", s(&out)])), EXIT_OK);
        outs.push(out);
    }
    for f in ["fit.json", "student_classes.csv", "school_types.csv"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(code(&mlirt(&["--help"])), EXIT_OK);
    assert_eq!(code(&mlirt(&["fit", "--bogus"])), EXIT_INPUT);
}
