use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"seed = 5

[medium]
gamma_plus = 4.0
gamma_minus = 1.0

[source]
ball = { center = [0.0, 0.0, 1.0], radius = 0.4 }
profile = { kind = "bump", amplitude = 1.0, inner_fraction = 0.6 }

[[inclusion]]
shape = { kind = "ball", center = [0.0, 0.0, -0.6], radius = 0.3 }
h = 1.0
sign_class = "a_plus"

[grid]
spacing = 0.08

[simulation]
duration_factor = 2.0

[tau_ladder]
count = 16

[region]
lo = [-1.0, -1.0, -1.5]
hi = [1.0, 1.0, -0.1]
n = [6, 6, 6]

[optics]
fermat_samples = 10
fermat_grid = 201
modified_samples = 1000
localization_samples = 2
localization_grid = 101

[green]
taus = [20.0, 40.0]
supercritical_taus = [10.0, 20.0, 40.0]
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_enclosure"))
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--threads")
        .arg("2")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn hash_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("config_hash ")).unwrap().to_string()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join("out").join(name)).unwrap()
}

#[test]
fn repeated_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        for cmd in ["optics", "green", "reconstruct"] {
            let o = run(d.path(), CONFIG, &[cmd]);
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    for f in ["optics_distances.csv", "green_ratio.csv", "green_supercritical.csv", "run_inclusion0.csv", "curve_inclusion0.csv", "region_inclusion0.bin"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn reconstruct_reuses_matching_curves() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), CONFIG, &["indicator", "--check"]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let trace = d.path().join("out/run_background.trc");
    std::fs::remove_file(&trace).unwrap();
    let o = run(d.path(), CONFIG, &["reconstruct"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!trace.exists());
    assert!(stdout(&o).contains("PASS inclusion0: contrast class"));
    let o = run(d.path(), CONFIG, &["reconstruct", "--seed", "6"]);
    assert!(o.status.success());
    assert!(trace.exists());
}

#[test]
fn parse_errors_exit_with_status_two() {
    let d = tempfile::tempdir().unwrap();
    let bad = CONFIG.replace("spacing = 0.08", "spacing = 0.08\nspacnig = 1");
    let o = run(d.path(), &bad, &["optics"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let line = bad.lines().position(|l| l.starts_with("spacnig")).unwrap() + 1;
    assert!(err.contains(&format!("line {line}")), "{err}");

    let o = Command::new(env!("CARGO_BIN_EXE_enclosure")).arg("optics").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_flag_sets_the_exit_status() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), CONFIG, &["optics", "--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let short = CONFIG.replace("duration_factor = 2.0", "duration_factor = 0.8");
    let o = run(d.path(), &short, &["reconstruct", "--check"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
    let o = run(d.path(), &short, &["reconstruct"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn seed_override_changes_the_hash() {
    let d = tempfile::tempdir().unwrap();
    let a = hash_line(&run(d.path(), CONFIG, &["optics"]));
    let b = hash_line(&run(d.path(), CONFIG, &["optics", "--seed", "5"]));
    let c = hash_line(&run(d.path(), CONFIG, &["optics", "--seed", "6"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
