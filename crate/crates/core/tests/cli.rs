use std::process::Command;

fn ctxgen(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ctxgen")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn synth_writes_a_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let r = ctxgen(&["data", "synth", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["train.json", "dev.json", "test.json", "vocab.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let again = dir.path().join("again");
    assert!(ctxgen(&["data", "synth", "--seed", "3", "--out", again.to_str().unwrap()]).status.success());
    for f in ["train.json", "vocab.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    assert_eq!(ctxgen(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ctxgen(&["--help"]).status.code(), Some(0));

    let r = ctxgen(&["encoder", "pretrain", "--data", &p("missing"), "--out", &p("enc.ckpt")]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error: "));

    std::fs::write(p("bad.json"), "{\"no_such_key\": 1}").unwrap();
    assert_eq!(ctxgen(&["pipeline", "--config", &p("bad.json")]).status.code(), Some(1));
    let r = ctxgen(&["data", "prepare", "--in", &p("bad.json"), "--format", "csv", "--out", &p("d")]);
    assert_eq!(r.status.code(), Some(1));
}
