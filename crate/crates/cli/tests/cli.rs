use std::fs;
use std::path::{Path, PathBuf};

use biparam::config::RunConfig;
use biparam::error::{EXIT_CONFIG, EXIT_OK};
use biparam::{io, run, Cli, Command};
use biparam_core::journe::{OmegaAnalysis, Weights};
use biparam_core::verify::BIPARAM_CARLESON;

const SMALL: &str = "
seed = 3
[grid]
level_max = 4
r = 3
[omega]
count = 8
max_rectangles = 4
[verify]
samples = 40
carleson_levels = [1]
[mc]
inputs = 2
trials = 40
[decompose]
inputs = 1
[pi_good]
level = 3
trials = 200
";

fn cli(command: Command, config: Option<PathBuf>, out: &Path, seed: Option<u64>, jobs: usize) -> Cli {
    Cli { command, config, out: out.to_path_buf(), seed, jobs }
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{SMALL}\n{extra}")).unwrap();
    p
}

/// Appends keys to a section of `SMALL` by rewriting the section header.
fn with_section(section: &str, keys: &str) -> String {
    SMALL.replace(&format!("[{section}]\n"), &format!("[{section}]\n{keys}\n"))
}

fn run_with(dir: &Path, command: Command, toml: &str, jobs: usize) -> (i32, PathBuf) {
    let cfg = dir.join(format!("{command:?}-{jobs}.toml"));
    fs::write(&cfg, toml).unwrap();
    let out = dir.join(format!("out-{command:?}-{jobs}"));
    (run(&cli(command, Some(cfg), &out, None, jobs)), out)
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn reports_are_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out1) = run_with(dir.path(), Command::Journe, SMALL, 1);
    let (b, out3) = run_with(dir.path(), Command::Journe, SMALL, 3);
    assert_eq!((a, b), (EXIT_OK, EXIT_OK));
    assert_eq!(fs::read(out1.join("journe.csv")).unwrap(), fs::read(out3.join("journe.csv")).unwrap());

    let cfg = write_config(dir.path(), "vk.toml", "");
    let (o1, o2) = (dir.path().join("vk1"), dir.path().join("vk2"));
    assert_eq!(run(&cli(Command::VerifyKernel, Some(cfg.clone()), &o1, None, 1)), EXIT_OK);
    assert_eq!(run(&cli(Command::VerifyKernel, Some(cfg), &o2, None, 2)), EXIT_OK);
    assert_eq!(fs::read(o1.join("reports.json")).unwrap(), fs::read(o2.join("reports.json")).unwrap());
}

#[test]
fn cancellative_kernel_has_vanishing_biparam_carleson() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_with(dir.path(), Command::VerifyKernel, SMALL, 1);
    assert_eq!(code, EXIT_OK);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("reports.json")).unwrap()).unwrap();
    let reports = json.as_array().unwrap();
    assert_eq!(reports.len(), 9);
    for r in reports {
        for key in ["assumption_id", "constant", "samples", "witness", "config_hash", "seed", "version"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    let bi = reports.iter().find(|r| r["assumption_id"] == BIPARAM_CARLESON).unwrap();
    assert!(bi["constant"].as_f64().unwrap() < 1e-20);
}

#[test]
fn rows_carry_hash_seed_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let out = dir.path().join("o");
    assert_eq!(run(&cli(Command::PiGood, Some(cfg.clone()), &out, Some(99), 1)), EXIT_OK);
    let mut expected = RunConfig::load(&cfg).unwrap();
    expected.seed = 99;
    let rows = read_csv(&out.join("pi_good.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r[0], expected.hash());
        assert_eq!(r[1], "99");
        assert_eq!(r[2], env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn malformed_config_exits_2_without_files() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in ["[grid\nr = 3", "[grid]\nr = \"three\"", "[grid]\nlevel_min = 5\nlevel_max = 2", "bogus = 1"]
        .iter()
        .enumerate()
    {
        let cfg = dir.path().join(format!("bad{i}.toml"));
        fs::write(&cfg, text).unwrap();
        let out = dir.path().join(format!("out{i}"));
        assert_eq!(run(&cli(Command::Journe, Some(cfg), &out, None, 1)), EXIT_CONFIG, "{text}");
        assert!(!out.exists());
    }
    let out = dir.path().join("missing");
    assert_eq!(run(&cli(Command::Journe, Some(dir.path().join("nope.toml")), &out, None, 1)), EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn empty_family_gives_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_with(dir.path(), Command::Journe, &SMALL.replace("count = 8", "count = 0"), 1);
    assert_eq!(code, EXIT_OK);
    assert!(read_csv(&out.join("journe.csv")).is_empty());
}

#[test]
fn increasing_weights_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for w in ["kind = \"table\"\nvalues = [0.5, 1.0]", "kind = \"geometric\"\nscale = 1.0\nratio = 2.0"] {
        let toml = format!("{SMALL}\n[journe.weights]\n{w}\n");
        let (code, out) = run_with(dir.path(), Command::Journe, &toml, 1);
        assert_eq!(code, EXIT_CONFIG);
        assert!(!out.exists());
    }
}

#[test]
fn too_few_trials_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_with(dir.path(), Command::McAverage, &SMALL.replace("trials = 40", "trials = 29"), 1);
    assert_eq!(code, EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn zero_input_passes_trivially() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_with(dir.path(), Command::McAverage, &with_section("mc", "input = \"zero\""), 1);
    assert_eq!(code, EXIT_OK);
    let rows = read_csv(&out.join("mc_average.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0][4].as_str(), rows[0][5].as_str(), rows[0][12].as_str()), ("0.0", "0.0", "true"));
}

#[test]
fn r_beyond_window_sets_exact_flag() {
    let dir = tempfile::tempdir().unwrap();
    let toml = SMALL.replace("r = 3", "r = 9");
    let (code, out) = run_with(dir.path(), Command::McAverage, &toml, 1);
    assert_eq!(code, EXIT_OK);
    for row in read_csv(&out.join("mc_average.csv")) {
        assert_eq!(row[8], "true");
        assert!(row[9].parse::<f64>().unwrap() <= 1e-10 * row[4].parse::<f64>().unwrap());
    }
}

#[test]
fn mesh_function_file_input() {
    let dir = tempfile::tempdir().unwrap();
    let cells = 16 * 16;
    let values: Vec<f64> = (0..cells).map(|k| ((k * 37) % 11) as f64 - 5.0).collect();
    let bin = dir.path().join("f.bin");
    let csv = dir.path().join("f.csv");
    fs::write(&bin, io::mesh_values_to_binary(&values)).unwrap();
    fs::write(&csv, io::mesh_values_to_csv(&values)).unwrap();
    let mut lhs = Vec::new();
    for (k, p) in [&bin, &csv].iter().enumerate() {
        let toml = with_section("mc", &format!("input = \"file\"\npath = {:?}", p.to_str().unwrap()));
        let out = dir.path().join(format!("o{k}"));
        let cfg = dir.path().join(format!("c{k}.toml"));
        fs::write(&cfg, toml).unwrap();
        assert_eq!(run(&cli(Command::McAverage, Some(cfg), &out, None, 1)), EXIT_OK);
        lhs.push(read_csv(&out.join("mc_average.csv"))[0][4].clone());
    }
    assert_eq!(lhs[0], lhs[1]);

    fs::write(&bin, io::mesh_values_to_binary(&values[1..])).unwrap();
    let toml = with_section("mc", &format!("input = \"file\"\npath = {:?}", bin.to_str().unwrap()));
    let (code, _) = run_with(dir.path(), Command::McAverage, &toml, 1);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn journe_table_matches_direct_invocation() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_with(dir.path(), Command::Journe, &with_section("omega", "dump_sets = true"), 1);
    assert_eq!(code, EXIT_OK);
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let (g1, g2) = cfg.grids().unwrap();
    let rows = read_csv(&out.join("journe.csv"));
    assert_eq!(rows.len(), 8);
    for (k, row) in rows.iter().enumerate() {
        let omega = io::read_omega(&out.join(format!("omega_{k:03}.csv")), &g1, &g2).unwrap();
        let direct = OmegaAnalysis::new(&omega, cfg.shadow_c())
            .unwrap()
            .journe_check(&Weights::Geometric { scale: 1.0, ratio: 0.5 })
            .unwrap();
        assert_eq!(row[9], format!("{:?}", direct.lhs));
        assert_eq!(row[10], format!("{:?}", direct.rhs));
        let shadows = read_csv(&out.join(format!("shadows_{k:03}.csv")));
        assert_eq!(shadows.len(), 256);
    }
}

#[test]
fn necessity_with_tensor_paraproduct_is_translation_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!(
        "{SMALL}\n[kernel]\nkind = \"tensor-paraproduct\"\n[kernel.multiplier]\nkind = \"random-signs\"\nlevel = 2\nperiod_level = 1\nseed = 4\n"
    );
    let (code, out) = run_with(dir.path(), Command::Necessity, &toml, 2);
    assert_eq!(code, EXIT_OK);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("necessity.json")).unwrap()).unwrap();
    assert!(json["sup_ratio"].as_f64().unwrap() > 0.0);
    assert!(json["relative_difference"].as_f64().unwrap() < 1e-9);
}

#[test]
fn non_tensor_kernel_rejected_by_decompose() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_with(dir.path(), Command::Decompose, &format!("{SMALL}\n[kernel]\nkind = \"paraproduct\"\n"), 1);
    assert_eq!(code, EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn decompose_ledger_holds() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_with(dir.path(), Command::Decompose, SMALL, 1);
    assert_eq!(code, EXIT_OK);
    assert_eq!(read_csv(&out.join("ledger.csv")).len(), 64);
    assert!(read_csv(&out.join("ledger_checks.csv")).iter().all(|r| r[7] == "true"));
    assert!(out.join("ledger.gp").exists());
}

#[test]
fn tabulated_kernel_from_profile_csv() {
    let dir = tempfile::tempdir().unwrap();
    let prof = dir.path().join("p.csv");
    let mut text = String::from("rho,value\n");
    for k in 0..=20 {
        let r = k as f64 * 0.25;
        text.push_str(&format!("{r},{}\n", (1.0 - r) * (-r).exp()));
    }
    fs::write(&prof, text).unwrap();
    let p = prof.to_str().unwrap();
    let toml = format!("{SMALL}\n[kernel]\nkind = \"tabulated\"\nprofile1 = {p:?}\nprofile2 = {p:?}\n");
    let (code, out) = run_with(dir.path(), Command::VerifyKernel, &toml, 1);
    assert_eq!(code, EXIT_OK);
    assert!(out.join("summary.txt").exists());

    let bad = format!("{SMALL}\n[kernel]\nkind = \"tabulated\"\nprofile1 = {p:?}\n");
    assert_eq!(run_with(dir.path(), Command::VerifyKernel, &bad, 1).0, EXIT_CONFIG);
}

#[test]
fn pi_good_reference_passes() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "[grid]\nr = 5\nlevel_max = 8\n[pi_good]\nlevel = 6\ncubes = [[5], [37]]\ntrials = 2000\n";
    let (code, out) = run_with(dir.path(), Command::PiGood, toml, 1);
    assert_eq!(code, EXIT_OK);
    let rows = read_csv(&out.join("pi_good.csv"));
    assert_eq!(rows[0][8], "0.125");
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let cfg = RunConfig::load(&entry.unwrap().path()).unwrap();
        cfg.validate().unwrap();
        let (g1, g2) = cfg.grids().unwrap();
        cfg.kernel(&g1, &g2).unwrap();
        n += 1;
    }
    assert_eq!(n, 6);
}
