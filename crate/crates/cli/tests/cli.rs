use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pamlab::config::parse_config;
use pamlab::output::format_f64;
use pamlab::Failure;
use proptest::prelude::*;

const SMALL: &str = "
[model]
d = 3
kappa = 0.4

[discretization]
epsilon = 0.5
n_per_side = 16
box_length = 3.2
t_end = 0.25
";

fn pamlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pamlab")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("in.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn checksums(dir: &Path) -> BTreeMap<String, String> {
    let text = std::fs::read_to_string(dir.join("manifest.toml")).unwrap();
    let m: toml::Table = text.parse().unwrap();
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| {
            let o = o.as_table().unwrap();
            (o["file"].as_str().unwrap().to_string(), o["sha256"].as_str().unwrap().to_string())
        })
        .collect()
}

fn column(csv_text: &str, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn minimal_config_derives_alpha() {
    let cfg = parse_config("[model]\nd = 3\nkappa = 0.4\n").unwrap();
    assert!((cfg.model.alpha.unwrap() - 0.2).abs() < 1e-15);
    assert!(cfg.discretization.dt.is_some());
    assert!(cfg.init.is_some());
}

#[test]
fn supercritical_kappa_is_rejected() {
    let err = parse_config("[model]\nd = 3\nkappa = 0.6\n").unwrap_err();
    let Failure::Config(msg) = &err else { panic!("{err:?}") };
    assert!(msg.contains("0 < kappa < (d-2)/2"), "{msg}");
    assert_eq!(err.exit_code(), 2);

    let out = pamlab(&["simulate", "--d", "3", "--kappa", "0.6", "--out", scratch("kappa06").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kappa = 0.6 violates"));
}

#[test]
fn inconsistent_alpha_is_rejected() {
    assert!(parse_config("[model]\nd = 3\nkappa = 0.4\nalpha = 0.3\n").is_err());
    assert!(parse_config("[model]\nd = 3\nkappa = 0.4\nalpha = 0.2\n").is_ok());
}

#[test]
fn unknown_keys_are_errors() {
    for text in [
        "colour = 1\n[model]\nd = 3\nkappa = 0.4\n",
        "[model]\nd = 3\nkappa = 0.4\nextra = 1\n",
        "[model]\nd = 3\nkappa = 0.4\n[discretization]\neps = 0.1\n",
        "[model]\nd = 3\nkappa = 0.4\n[init]\nkind = \"lebesgue\"\nintensity = 1.0\ndelta = 0.0\nbogus = 2\n",
        "[model]\nd = 3\nkappa = 0.4\n[experiment]\nname = \"total_mass\"\nsteps = 3\n",
    ] {
        assert!(matches!(parse_config(text), Err(Failure::Config(_))), "{text}");
    }
}

#[test]
fn constraint_violations_name_the_constraint() {
    let e = parse_config("[model]\nd = 3\nkappa = 0.4\n[discretization]\nepsilon = 0.05\n").unwrap_err();
    assert!(e.to_string().contains("discretization"), "{e}");
    let e = parse_config("[model]\nd = 3\nkappa = 0.4\n[bridge]\neta = [0.2]\n").unwrap_err();
    assert!(e.to_string().contains("bridge.eta"), "{e}");
}

#[test]
fn render_parse_roundtrip() {
    let texts = [
        "[model]\nd = 3\nkappa = 0.4\n".to_string(),
        format!("{SMALL}\n[init]\nkind = \"atom_cloud\"\ndelta = 0.5\n[[init.atoms]]\nposition = [0.1, 0.0, 0.0]\nweight = 2.0\n[[init.atoms]]\nposition = [-0.3, 0.2, 0.0]\nweight = 0.5\n[experiment]\nname = \"death\"\nn_ensemble = 10\n"),
        "seed = 99\n[model]\nd = 4\nkappa = 0.7\n[discretization]\nn_per_side = 8\nbox_length = 4.0\nepsilon = 1.2\ndt = 0.03\n[observables]\ntrack_bracket = true\n[[observables.balls]]\ncenter = [0.0, 0.0, 0.0, 0.0]\nradius = 1.0\n".to_string(),
    ];
    for text in &texts {
        let a = parse_config(text).unwrap();
        let rendered = a.render();
        let b = parse_config(&rendered).unwrap();
        assert_eq!(a, b, "{rendered}");
        assert_eq!(rendered, b.render());
    }
}

#[test]
fn exact_alpha_prints_the_closed_form() {
    let out = pamlab(&["exact", "alpha", "--d", "3", "--eta", "0.08"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.2");
    let out = pamlab(&["exact", "alpha", "--d", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pamlab(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn null_model_total_mass_is_constant() {
    let dir = scratch("null-simulate");
    let cfg = write_config(&dir, &SMALL.replace("kappa = 0.4", "kappa = 0.0"));
    let out_dir = dir.join("out");
    let out = pamlab(&["simulate", "--config", &cfg, "--n-ensemble", "3", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("total_mass.csv")).unwrap();
    let mass = column(&text, "total_mass");
    assert_eq!(mass.len(), 6);
    // The lattice heat flow conserves mass up to FFT roundoff.
    for m in &mass {
        assert!((m - mass[0]).abs() < 1e-12, "{mass:?}");
    }
}

#[test]
fn reruns_reproduce_checksums_across_worker_counts() {
    let dir = scratch("rerun");
    let cfg = write_config(&dir, &format!("{SMALL}\n[[observables.test_functions]]\nkind = \"gaussian\"\ncenter = [0.0, 0.0, 0.0]\nsigma = 0.4\namplitude = 1.0\n"));
    let run = |name: &str, workers: &str, seed: &str| {
        let o = dir.join(name);
        let out = pamlab(&[
            "simulate", "--config", &cfg, "--n-ensemble", "5", "--seed", seed, "--workers", workers, "--out", o.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        checksums(&o)
    };
    let a = run("w1", "1", "7");
    let b = run("w3", "3", "7");
    let c = run("seed8", "1", "8");
    assert_eq!(a, b);
    assert!(a.contains_key("test_integrals.csv"));
    assert_ne!(a["total_mass.csv"], c["total_mass.csv"]);
}

#[test]
fn manifest_lists_every_output() {
    let dir = scratch("manifest");
    let cfg = write_config(&dir, &format!("{SMALL}\n[noise]\nn_increments = 40\nsnapshot = true\n"));
    let o = dir.join("out");
    let out = pamlab(&["noise-check", "--config", &cfg, "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let listed = checksums(&o);
    let mut on_disk: Vec<String> = std::fs::read_dir(&o)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.toml")
        .collect();
    on_disk.sort();
    assert_eq!(listed.keys().cloned().collect::<Vec<_>>(), on_disk);
    assert!(listed.contains_key("noise_increment.bin"));
    let text = std::fs::read_to_string(o.join("covariance.csv")).unwrap();
    assert!(text.starts_with("lag_cells,expected,estimate,std_error,z\n"));
}

#[test]
fn failed_assertion_exits_with_one() {
    let dir = scratch("assert-fail");
    // A zero-width acceptance band cannot hold for a finite sample.
    let cfg = write_config(&dir, &format!("{SMALL}\n[noise]\nn_increments = 40\nmax_abs_z = 1e-9\n"));
    let o = dir.join("out");
    let out = pamlab(&["noise-check", "--config", &cfg, "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(o.join("manifest.toml").exists());
}

#[test]
fn experiment_section_must_match_the_requested_name() {
    let dir = scratch("exp-mismatch");
    let cfg = write_config(&dir, &format!("{SMALL}\n[experiment]\nname = \"death\"\n"));
    let out = pamlab(&["experiment", "scaling", "--config", &cfg, "--out", dir.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = pamlab(&["experiment", "nonsense", "--config", &cfg, "--out", dir.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_experiment_writes_report_and_series() {
    let dir = scratch("exp-total-mass");
    let cfg = write_config(&dir, "[model]\nd = 3\nkappa = 0.4\n[experiment]\nname = \"total_mass\"\nn_ensemble = 40\n");
    let o = dir.join("out");
    let out = pamlab(&["experiment", "total-mass", "--config", &cfg, "--out", o.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("null_mass_constant"), "{stdout}");
    assert!(matches!(out.status.code(), Some(0 | 1)));
    assert!(o.join("report.txt").exists());
    assert!(o.join("total_mass.csv").exists());
}

proptest! {
    #[test]
    fn csv_numbers_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let s = format_f64(x);
        prop_assert_eq!(s.parse::<f64>().unwrap(), x);
        let digits = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count();
        prop_assert_eq!(digits, 17);
    }
}
