use std::process::Command;

fn biparam(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_biparam")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let out = dir.path().join("out");
    let (o, c) = (out.to_str().unwrap(), cfg.to_str().unwrap());

    std::fs::write(&cfg, "[grid]\nr = 5\nlevel_max = 8\n[pi_good]\nlevel = 6\ntrials = 400\n").unwrap();
    let (code, stdout) = biparam(&["pi-good", "--config", c, "--out", o, "--seed", "4"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("estimate"));
    assert!(out.join("pi_good.csv").exists());

    std::fs::write(&cfg, "[mc]\ntrials = 10\n").unwrap();
    let other = dir.path().join("other");
    assert_eq!(biparam(&["mc-average", "--config", c, "--out", other.to_str().unwrap()]).0, 2);
    assert!(!other.exists());

    assert_eq!(biparam(&["no-such-command"]).0, 2);
}
