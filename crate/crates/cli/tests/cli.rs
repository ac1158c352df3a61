use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mobiscope"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mobiscope")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", s(dir), "--duration-s", "150"];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_reports_counts_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let sess = tmp.path().join("s");
    synth(&sess, &["--seed", "3"]);
    let o = run(&["validate", "--session", s(&sess), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let gps = v["streams"].as_array().unwrap().iter().find(|r| r["kind"] == "gps").unwrap();
    assert_eq!(gps["samples"], 150);

    // corrupt one row
    let eda = sess.join("eda.csv");
    let text = std::fs::read_to_string(&eda).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[5] = "garbage,row";
    std::fs::write(&eda, lines.join("\n")).unwrap();
    let o = run(&["validate", "--session", s(&sess)]);
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("eda.csv:6"), "{out}");

    std::fs::remove_file(sess.join("gaze.csv")).unwrap();
    let o = run(&["validate", "--session", s(&sess)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ingest.ManifestError"));
}

#[test]
fn fuse_is_deterministic_and_reproducible_from_report() {
    let tmp = tempfile::tempdir().unwrap();
    let sess = tmp.path().join("s");
    synth(&sess, &["--seed", "5"]);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for out in [&a, &b] {
        let o = run(&["fuse", "--session", s(&sess), "--out", s(out), "--set", "z_thresh=1.5", "--segments", "distance:20"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report = a.join("run_report.json");
    let o = run(&["fuse", "--session", s(&sess), "--out", s(&c), "--params-file", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for doc in ["bundle.json", "trajectory.json", "events.json", "windows.json", "segments.geojson", "run_report.json"] {
        let x = std::fs::read(a.join(doc)).unwrap();
        assert_eq!(x, std::fs::read(b.join(doc)).unwrap(), "{doc}");
        assert_eq!(x, std::fs::read(c.join(doc)).unwrap(), "{doc} via --params-file");
    }
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["parameters"]["z_thresh"], 1.5);
    assert_eq!(r["parameters"]["segment_length"], 20.0);
}

#[test]
fn fuse_rejects_unknown_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let sess = tmp.path().join("s");
    synth(&sess, &[]);
    let o = run(&["fuse", "--session", s(&sess), "--out", s(&tmp.path().join("o")), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_geojson_copies_and_checks_version() {
    let tmp = tempfile::tempdir().unwrap();
    let sess = tmp.path().join("s");
    synth(&sess, &["--noiseless"]);
    let out = tmp.path().join("b");
    assert!(run(&["fuse", "--session", s(&sess), "--out", s(&out)]).status.success());
    let file = tmp.path().join("x.geojson");
    let o = run(&["export-geojson", "--bundle", s(&out), "--out", s(&file)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&file).unwrap(), std::fs::read(out.join("segments.geojson")).unwrap());

    let o = run(&["export-geojson", "--bundle", s(&tmp.path().join("nope")), "--out", s(&file)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("io.IoError"));

    let idx = out.join("bundle.json");
    let text = std::fs::read_to_string(&idx).unwrap().replace("mobiscope-bundle/1", "mobiscope-bundle/9");
    std::fs::write(&idx, text).unwrap();
    let o = run(&["export-geojson", "--bundle", s(&out), "--out", s(&file)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fusion.VersionError"));
}

#[test]
fn score_noiseless_session() {
    let tmp = tempfile::tempdir().unwrap();
    let sess = tmp.path().join("s");
    synth(&sess, &["--noiseless", "--seed", "9"]);
    let out = tmp.path().join("b");
    assert!(run(&["fuse", "--session", s(&sess), "--out", s(&out)]).status.success());
    let o = run(&["score", "--bundle", s(&out), "--truth", s(&sess.join("ground_truth.json")), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["fixations", "scr_peaks", "heel_strikes"] {
        assert_eq!(v[k]["precision"], 1.0, "{k}");
        assert_eq!(v[k]["recall"], 1.0, "{k}");
    }
}

fn get(port: u16, method: &str, path: &str) -> (u16, String, Vec<u8>) {
    let mut sock = TcpStream::connect(("127.0.0.1", port)).unwrap();
    write!(sock, "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = Vec::new();
    sock.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, head, raw[split + 4..].to_vec())
}

#[test]
fn serve_bundle_files() {
    let tmp = tempfile::tempdir().unwrap();
    let sess = tmp.path().join("s");
    synth(&sess, &["--noiseless"]);
    let out = tmp.path().join("b");
    assert!(run(&["fuse", "--session", s(&sess), "--out", s(&out)]).status.success());

    let mut child = bin().args(["serve", "--bundle", s(&out), "--port", "0"]).stdout(Stdio::piped()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let port: u16 = line.trim().rsplit(':').next().unwrap().parse().unwrap();

    let (st, head, body) = get(port, "GET", "/bundle.json");
    assert_eq!(st, 200);
    assert_eq!(body, std::fs::read(out.join("bundle.json")).unwrap());
    let lower = head.to_ascii_lowercase();
    assert!(lower.contains("content-type: application/json"), "{head}");
    assert!(lower.contains("access-control-allow-origin: *"), "{head}");
    let (st, head, _) = get(port, "GET", "/segments.geojson");
    assert_eq!(st, 200);
    assert!(head.to_ascii_lowercase().contains("content-type: application/geo+json"), "{head}");
    assert_eq!(get(port, "GET", "/nonexistent").0, 404);
    assert_eq!(get(port, "GET", "/../s/session.json").0, 404);
    assert_eq!(get(port, "POST", "/bundle.json").0, 405);
    let (st, _, body) = get(port, "HEAD", "/bundle.json");
    assert_eq!((st, body.len()), (200, 0));

    // a second server on the same port fails to bind
    let o = run(&["serve", "--bundle", s(&out), "--port", &port.to_string()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cli.BindError"));
    child.kill().unwrap();
    child.wait().unwrap();
}
