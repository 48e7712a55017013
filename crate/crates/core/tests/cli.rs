use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmdesign"))
}

const SMALL: &str = "\
# three designs on a small panel
responses = continuous, proportion
p = 1, 2
designs = BCRD, PM, PB
n_subjects = 12
reps = 500
bootstrap_reps = 40
pb_restarts = 10
";

#[test]
fn same_seed_gives_identical_csv_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let run = |workers: &str, name: &str| {
        let out = dir.path().join(name);
        let status = bin()
            .arg(&cfg)
            .args(["--seed", "31", "--workers", workers, "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(out).unwrap()
    };
    let a = run("1", "a.csv");
    let b = run("3", "b.csv");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 3);
    assert!(text.lines().skip(1).all(|l| l.ends_with(',')), "no cell should report an error");
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.cfg");
    fs::write(&cfg, format!("{SMALL}seed = 1\n")).unwrap();
    let out = bin().arg(&cfg).args(["--seed", "2", "--reps", "50"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[5], row[6]), ("50", "2"));
}

#[test]
fn panel_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let panels = dir.path().join("panels");
    let status = bin()
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(dir.path().join("rows.csv"))
        .arg("--panels")
        .arg(&panels)
        .status()
        .unwrap();
    assert!(status.success());
    let mut names: Vec<String> =
        fs::read_dir(&panels).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["continuous_p1.tsv", "continuous_p2.tsv", "proportion_p1.tsv", "proportion_p2.tsv"]);
}

#[test]
fn invalid_configs_exit_nonzero_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "preset = fig1\nseed = 3\nB = 1, 7\n").unwrap();
    let out = bin().arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 3") && err.contains("2n=96, B=7"), "{err}");

    let out = bin().output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("no preset or explicit grid"));

    let out = bin().args(["--preset", "fig2"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("seed is required"));
}
