use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chargejump::io;
use chargejump::rates::SpectrumHistogram;
use chargejump::synth::{qubit_seed, random_phase};
use chargejump::CurveModel;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chargejump"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

const EFFICIENCIES: &str = r#"
[[qubits]]
id = 1
position_um = [0.0, 0.0]
efficiency = { SO = 0.83, SC = 0.83 }
[[qubits]]
id = 2
position_um = [637.0, 0.0]
efficiency = { SO = 0.79, SC = 0.79 }
[[qubits]]
id = 3
position_um = [738.0, 3143.0]
efficiency = { SO = 0.87, SC = 0.87 }
[[qubits]]
id = 4
position_um = [430.0, 3269.0]
efficiency = { SO = 0.74, SC = 0.72 }
"#;

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn single_noiseless_scan_tiles_the_curve() {
    let d = tempfile::tempdir().unwrap();
    let body = "seed = 9\n[simulation]\nn_scans = 1\n[[qubits]]\nid = 2\nsigma_p1 = 0.0\n";
    config(d.path(), "c.toml", body);
    ok(
        d.path(),
        &["--config", "c.toml", "simulate", "--out", "sim"],
    );
    let scans = io::read_scans(&d.path().join("sim/scans_SO.jsonl")).unwrap();
    assert_eq!(scans.len(), 1);
    let s = &scans[0];
    assert_eq!((s.qubit_id, s.len()), (2, 74));
    let theta = random_phase(qubit_seed(9, 2), 0);
    let m = CurveModel::default();
    for p in &s.points {
        assert!((p.p1 - m.p1(p.bias + theta)).abs() < 1e-12);
    }
    let inj = std::fs::read_to_string(d.path().join("sim/injections_SO.csv")).unwrap();
    assert_eq!(inj.trim(), "scan_id,qubit_id,t_s,index,delta_q_e");
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let body = "[simulation]\nn_scans = 20\nshared_rate_mhz = 2.0\nshared_qubits = [1, 2]\n";
    config(d.path(), "c.toml", body);
    ok(
        d.path(),
        &[
            "--config", "c.toml", "--seed", "4", "simulate", "--out", "a",
        ],
    );
    ok(
        d.path(),
        &[
            "--config", "c.toml", "--seed", "4", "simulate", "--out", "b",
        ],
    );
    ok(
        d.path(),
        &[
            "--config", "c.toml", "--seed", "5", "simulate", "--out", "c",
        ],
    );
    let (a, b, c) = (
        files(&d.path().join("a")),
        files(&d.path().join("b")),
        files(&d.path().join("c")),
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
    let m = DatasetManifestView::load(&d.path().join("a/manifest_SO.json"));
    assert_eq!(m.qubit_ids, vec![1, 2, 3, 4]);
    assert!(
        (m.livetime - 20.0 * chargejump::ScanSchedule::default().scan_duration() / 3600.0).abs()
            < 1e-9
    );
}

struct DatasetManifestView {
    qubit_ids: Vec<u8>,
    livetime: f64,
}

impl DatasetManifestView {
    fn load(p: &Path) -> Self {
        let m = io::DatasetManifest::load(p).unwrap();
        Self {
            qubit_ids: m.qubit_ids,
            livetime: m.livetime,
        }
    }
}

fn write_spectrum(path: &Path, above: u64, livetime: f64, tag: &str) {
    let h = SpectrumHistogram::new(
        vec![0.0, 50.0, 100.0, 150.0, 300.0, 600.0],
        vec![5000, 3000, 2000, above / 2, above - above / 2],
        livetime,
        tag,
    )
    .unwrap();
    io::write_spectrum(path, &h).unwrap();
}

/// Open and closed replicas with a common excess rate and a gamma part
/// twenty times larger with the shield open.
fn two_datasets(dir: &Path) {
    let so = format!(
        "seed = 21\nshield_config_tag = \"SO\"\n[simulation]\nn_scans = 243\nshared_rate_mhz = 0.35\nshared_qubits = [1, 2]\n{EFFICIENCIES}"
    );
    let sc = format!(
        "seed = 22\nshield_config_tag = \"SC\"\n[simulation]\nn_scans = 224\nshared_rate_mhz = 0.15\nshared_qubits = [1, 2]\n{EFFICIENCIES}"
    );
    config(dir, "so.toml", &so);
    config(dir, "sc.toml", &sc);
    ok(dir, &["--config", "so.toml", "simulate", "--out", "data"]);
    ok(dir, &["--config", "sc.toml", "simulate", "--out", "data"]);
    write_spectrum(&dir.join("data/so.csv"), 2000, 1.0, "SO");
    write_spectrum(&dir.join("data/sc.csv"), 100, 1.0, "SC");
    let run = format!(
        "seed = 3\n[paths]\ndatasets = [\"data/manifest_SO.json\", \"data/manifest_SC.json\"]\nspectra = {{ SO = \"data/so.csv\", SC = \"data/sc.csv\" }}\n{EFFICIENCIES}"
    );
    config(dir, "run.toml", &run);
}

#[test]
fn pipeline_two_datasets_reports_tables_and_excess() {
    let d = tempfile::tempdir().unwrap();
    two_datasets(d.path());
    let stdout = ok(
        d.path(),
        &["--config", "run.toml", "pipeline", "--out", "r1"],
    );
    let rates = std::fs::read_to_string(d.path().join("r1/rates.txt")).unwrap();
    let labels: Vec<&str> = rates
        .lines()
        .skip(2)
        .map(|l| l.split("  ").next().unwrap().trim())
        .collect();
    assert_eq!(labels, ["Livetime (h)", "Q1", "Q2", "Q3", "Q4", "Average"]);
    assert!(rates.lines().next().unwrap().contains("SO"));
    assert!(rates.lines().next().unwrap().contains("SC"));
    assert!(stdout.contains("R_excess"));

    let ratio: chargejump::rates::FluxRatio =
        io::read_json(&d.path().join("r1/lmo_ratio.json")).unwrap();
    assert_eq!(ratio.ratio, 20.0);
    let sol: chargejump::rates::ExcessSolution =
        io::read_json(&d.path().join("r1/excess.json")).unwrap();
    let so = io::read_rates_csv(&d.path().join("r1/rates_SO.csv")).unwrap();
    let sc = io::read_rates_csv(&d.path().join("r1/rates_SC.csv")).unwrap();
    let (s, c) = (so.last().unwrap().rate, sc.last().unwrap().rate);
    assert!((sol.r_so_gamma.value + sol.r_excess.value - s).abs() < 1e-12);
    assert!((sol.r_sc_gamma.value + sol.r_excess.value - c).abs() < 1e-12);

    // Jumps only ever hit qubits 1 and 2 together.
    let pairs = std::fs::read_to_string(d.path().join("r1/pair_rates.txt")).unwrap();
    for l in pairs.lines().skip(2) {
        if l.starts_with("Q1-Q2") {
            assert!(!l.contains('<'), "{l}");
        } else {
            assert_eq!(l.matches("< ").count(), 2, "{l}");
        }
    }
}

#[test]
fn pipeline_is_rerun_idempotent() {
    let d = tempfile::tempdir().unwrap();
    two_datasets(d.path());
    ok(
        d.path(),
        &["--config", "run.toml", "pipeline", "--out", "r1"],
    );
    ok(
        d.path(),
        &[
            "--config",
            "run.toml",
            "--workers",
            "2",
            "pipeline",
            "--out",
            "r2",
        ],
    );
    let (a, b) = (files(&d.path().join("r1")), files(&d.path().join("r2")));
    assert!(a.len() > 10);
    assert_eq!(a, b);
}

#[test]
fn quiet_dataset_gives_upper_limits() {
    let d = tempfile::tempdir().unwrap();
    let body = format!("shield_config_tag = \"SC\"\n[simulation]\nn_scans = 60\n{EFFICIENCIES}");
    config(d.path(), "c.toml", &body);
    for q in 1..=4 {
        let p = d.path().join("c.toml");
        let t = std::fs::read_to_string(&p).unwrap();
        std::fs::write(
            &p,
            t.replacen(
                &format!("id = {q}\n"),
                &format!("id = {q}\nsigma_p1 = 0.0\n"),
                1,
            ),
        )
        .unwrap();
    }
    ok(
        d.path(),
        &["--config", "c.toml", "simulate", "--out", "data"],
    );
    ok(
        d.path(),
        &[
            "--config",
            "c.toml",
            "pipeline",
            "--dataset",
            "data/manifest_SC.json",
            "--out",
            "r",
        ],
    );
    let ev = std::fs::read_to_string(d.path().join("r/events_SC.csv")).unwrap();
    assert_eq!(ev.lines().count(), 1);
    let rates = io::read_rates_csv(&d.path().join("r/rates_SC.csv")).unwrap();
    assert_eq!(rates.len(), 5);
    assert!(rates
        .iter()
        .all(|r| r.rate == 0.0 && r.ci_high > 0.0 && r.is_upper_limit()));
    let txt = std::fs::read_to_string(d.path().join("r/pair_rates.txt")).unwrap();
    assert_eq!(txt.matches("< ").count(), 6);
}

#[test]
fn single_step_commands_chain() {
    let d = tempfile::tempdir().unwrap();
    let body = format!("[simulation]\nn_scans = 120\nshared_rate_mhz = 1.0\nshared_qubits = [3, 4]\n{EFFICIENCIES}");
    config(d.path(), "c.toml", &body);
    let p = d.path();
    ok(p, &["--config", "c.toml", "simulate", "--out", "data"]);
    let out = ok(
        p,
        &[
            "--config",
            "c.toml",
            "build-template",
            "--scans",
            "data/scans_SO.jsonl",
            "--out",
            "t",
        ],
    );
    assert_eq!(out.lines().count(), 4);
    let templates: Vec<String> = (1..=4)
        .map(|q| format!("t/template_q{q}_SO.json"))
        .collect();
    let mut args = vec![
        "--config",
        "c.toml",
        "find-jumps",
        "--scans",
        "data/scans_SO.jsonl",
        "--out",
        "ev/events.csv",
        "--template",
    ];
    args.extend(templates.iter().map(String::as_str));
    ok(p, &args);
    assert_eq!(
        io::read_events(&p.join("ev/events.csv")).unwrap(),
        io::read_events(&p.join("ev/events.jsonl")).unwrap()
    );
    let lt = format!(
        "{}",
        120.0 * chargejump::ScanSchedule::default().scan_duration() / 3600.0
    );
    let txt = ok(
        p,
        &[
            "--config",
            "c.toml",
            "rates",
            "--events",
            "ev/events.csv",
            "--livetime",
            &lt,
            "--efficiency",
            "1=0.9",
            "--out",
            "rates",
        ],
    );
    assert!(txt.contains("Average"));
    let r = io::read_rates_csv(&p.join("rates/rates_SO.csv")).unwrap();
    assert_eq!(r[0].efficiency, 0.9);
    assert_eq!(r[1].efficiency, 0.79);
    let txt = ok(
        p,
        &[
            "--config",
            "c.toml",
            "coincidence",
            "--events",
            "ev/events.csv",
            "--livetime",
            &lt,
            "--window",
            "44",
            "--out",
            "co",
        ],
    );
    assert!(txt
        .lines()
        .any(|l| l.starts_with("Q3-Q4") && !l.contains('<')));

    ok(
        p,
        &[
            "--config",
            "c.toml",
            "efficiency",
            "--template",
            "t/template_q1_SO.json",
            "--n-scans",
            "100",
            "--out",
            "eff",
        ],
    );
    let rep: chargejump::synth::EfficiencyReport =
        io::read_json(&p.join("eff/efficiency_q1_SO.json")).unwrap();
    assert_eq!(rep.n_scans, 100);
    assert!(rep.efficiency > 0.5 && rep.efficiency <= 1.0);
    assert!(p.join("eff/truth_q1_SO.csv").exists());

    write_spectrum(&p.join("so.csv"), 2000, 1.0, "SO");
    write_spectrum(&p.join("sc.csv"), 100, 1.0, "SC");
    let txt = ok(
        p,
        &[
            "lmo-ratio",
            "--open",
            "so.csv",
            "--closed",
            "sc.csv",
            "--out",
            "ratio.json",
        ],
    );
    assert!(txt.contains("A_LMO = 20.000"));
    let txt = ok(
        p,
        &[
            "excess",
            "--open",
            "0.51,0.47,0.56",
            "--closed",
            "0.19,0.16,0.23",
            "--ratio",
            "ratio.json",
            "--out",
            "x/excess.json",
        ],
    );
    assert!(txt.contains("R_excess"));
    let sol: chargejump::rates::ExcessSolution = io::read_json(&p.join("x/excess.json")).unwrap();
    assert_eq!(format!("{:.2}", sol.r_excess.value), "0.17");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(p, &["--help"]), 0);
    assert_eq!(code(p, &["no-such-command"]), 1);
    assert_eq!(code(p, &["rates", "--livetime", "x"]), 1);
    config(p, "bad.toml", "coverage = 2.0\n");
    assert_eq!(
        code(p, &["--config", "bad.toml", "simulate", "--out", "s"]),
        1
    );
    assert_eq!(
        code(p, &["--config", "missing.toml", "simulate", "--out", "s"]),
        1
    );
    assert_eq!(
        code(
            p,
            &["find-jumps", "--scans", "missing.jsonl", "--out", "e.csv"]
        ),
        2
    );
    std::fs::write(p.join("garbage.jsonl"), "{oops\n").unwrap();
    assert_eq!(
        code(
            p,
            &["build-template", "--scans", "garbage.jsonl", "--out", "t"]
        ),
        2
    );
    assert_eq!(
        code(
            p,
            &[
                "excess",
                "--open",
                "0.5,0.4,0.6",
                "--closed",
                "0.2,0.1,0.3",
                "--a-lmo",
                "1.0",
                "--a-lmo-sigma",
                "0.1",
                "--out",
                "x.json"
            ]
        ),
        3
    );
    let err = run(
        p,
        &["find-jumps", "--scans", "missing.jsonl", "--out", "e.csv"],
    );
    let msg = String::from_utf8_lossy(&err.stderr);
    assert!(
        msg.contains("read scans") && msg.contains("missing.jsonl"),
        "{msg}"
    );
}

#[test]
fn manifest_livetime_must_match_scans() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    config(
        p,
        "c.toml",
        &format!("[simulation]\nn_scans = 10\n{EFFICIENCIES}"),
    );
    ok(p, &["--config", "c.toml", "simulate", "--out", "data"]);
    let mpath = p.join("data/manifest_SO.json");
    let mut m = io::DatasetManifest::load(&mpath).unwrap();
    m.scan_files = vec!["scans_SO.jsonl".into()];
    m.livetime *= 1.02;
    m.save(&mpath).unwrap();
    let out = run(
        p,
        &[
            "--config",
            "c.toml",
            "pipeline",
            "--dataset",
            "data/manifest_SO.json",
            "--out",
            "r",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    m.livetime /= 1.02 * 1.005;
    m.save(&mpath).unwrap();
    ok(
        p,
        &[
            "--config",
            "c.toml",
            "pipeline",
            "--dataset",
            "data/manifest_SO.json",
            "--out",
            "r",
        ],
    );
}
