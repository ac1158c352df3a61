use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mobiscope_core::fusion::{canonical_json, load_bundle, load_bundle_index, validate_geojson};
use mobiscope_core::ingest::{load_label_rasters, AnyStream};
use mobiscope_core::pipeline::{fuse_session, load_streams, write_output, RunReport};
use mobiscope_core::synth::{generate_session, score_against_truth, GroundTruth, SynthScenario};
use mobiscope_core::{parse_manifest, Error, Parameters, StreamKind};

mod serve;

#[derive(Parser)]
#[command(name = "mobiscope", version, about = "Fuse multimodal walking sessions into geo-referenced segments")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse the manifest and every stream; report counts, ranges and errors.
    Validate {
        #[arg(long)]
        session: PathBuf,
    },
    /// Run the full pipeline and write a bundle directory.
    Fuse(FuseArgs),
    /// Copy a bundle's segments.geojson to a standalone file.
    ExportGeojson {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic session with ground truth.
    Synth {
        /// Scenario JSON; defaults apply to anything it leaves out.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Zero every noise source, dropout and drift.
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a bundle against a synthetic session's ground truth.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Serve a bundle directory read-only over HTTP.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Parameter override `key=value`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Segment spec such as `distance:10` or `time:30`.
    #[arg(long)]
    segments: Option<String>,
    /// Re-apply the parameters recorded in an earlier run_report.json.
    #[arg(long)]
    params_file: Option<PathBuf>,
}

/// A failed command: exit status plus what to print.
struct Failure {
    exit: u8,
    code: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match e {
            Error::Manifest { .. }
            | Error::Parse { .. }
            | Error::StreamOrder { .. }
            | Error::EmptyStream
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Version { .. }
            | Error::ScenarioMismatch { .. } => 1,
            _ => 2,
        };
        Failure { exit, code: e.code().to_string(), message: e.to_string() }
    }
}

impl Failure {
    fn new(exit: u8, code: &str, message: impl Into<String>) -> Self {
        Failure { exit, code: code.into(), message: message.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn print_json(v: &Value) {
    match canonical_json(v) {
        Ok(bytes) => print!("{}", String::from_utf8_lossy(&bytes)),
        Err(e) => eprintln!("error: {e}"),
    }
}

fn validate(session: &Path, as_json: bool) -> CmdResult {
    let manifest = match parse_manifest(session) {
        Ok(m) => m,
        Err(e) => {
            if as_json {
                print_json(&json!({"ok": false, "errors": [{"code": e.code(), "message": e.to_string()}]}));
            }
            return Err(e.into());
        }
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (decl, parsed) in load_streams(&manifest) {
        match parsed {
            Ok(s) => {
                if let AnyStream::LabelRaster(index) = &s {
                    let path = manifest.resolve(&decl.path);
                    if let Err(e) = load_label_rasters(index, path.parent().unwrap_or(&manifest.dir)) {
                        errors.push(json!({"stream": decl.kind, "code": e.code(), "message": e.to_string()}));
                    }
                }
                let (n, first, last) = s.summary();
                rows.push(json!({"kind": decl.kind, "path": decl.path, "samples": n, "t_first": first, "t_last": last}));
            }
            Err(e) => errors.push(json!({"stream": decl.kind, "code": e.code(), "message": e.to_string()})),
        }
    }
    if as_json {
        print_json(&json!({"ok": errors.is_empty(), "session_id": manifest.session_id, "streams": rows, "errors": errors}));
    } else {
        println!("session {}", manifest.session_id);
        for r in &rows {
            let t = |k: &str| r[k].as_i64().map_or("-".to_string(), |v| v.to_string());
            println!("  {:<20} {:>9} samples  {} .. {}", r["kind"].as_str().unwrap_or(""), r["samples"], t("t_first"), t("t_last"));
        }
        for e in &errors {
            println!("  error[{}] {}", e["code"].as_str().unwrap_or(""), e["message"].as_str().unwrap_or(""));
        }
        println!("{}", if errors.is_empty() { "ok" } else { "FAILED" });
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, "cli.ValidationFailed", format!("{} stream error(s)", errors.len())))
    }
}

fn effective_parameters(base: &Parameters, a: &FuseArgs) -> Result<Parameters, Failure> {
    let mut p = base.clone();
    if let Some(file) = &a.params_file {
        p = p.with_overrides(&RunReport::parameters_from_file(file)?, "/parameters")?;
    }
    if let Some(spec) = &a.segments {
        let (mode, len) = spec
            .split_once(':')
            .ok_or_else(|| Failure::new(1, "cli.UsageError", format!("--segments `{spec}`: expected MODE:LENGTH")))?;
        p = p.with_assignment(&format!("segment_mode={mode}"))?;
        p = p.with_assignment(&format!("segment_length={len}"))?;
    }
    for s in &a.set {
        p = p.with_assignment(s)?;
    }
    Ok(p)
}

fn fuse(a: &FuseArgs, as_json: bool) -> CmdResult {
    let manifest = parse_manifest(&a.session)?;
    let params = effective_parameters(&manifest.parameters, a)?;
    let out = fuse_session(&manifest, &params)?;
    write_output(&out, &a.out)?;
    if as_json {
        print_json(&serde_json::to_value(&out.report).unwrap_or(Value::Null));
    } else {
        let s = &out.report.summary;
        println!("session {} -> {}", out.report.session_id, a.out.display());
        println!(
            "  {:.1} m, {} segments, {} fixations, {} SCR peaks, {} strides, {} widths",
            s.total_arc_m, s.n_segments, s.n_fixations, s.n_scr_peaks, s.n_strides, s.n_widths
        );
        let hot = out.bundle.index.hotspots.segments.iter().filter(|f| f.hotspot).count();
        println!("  {hot} hotspot segments");
        for w in &out.report.warnings {
            println!("  warning: {w}");
        }
    }
    Ok(())
}

fn export_geojson(bundle: &Path, out: &Path) -> CmdResult {
    load_bundle_index(bundle)?;
    let src = bundle.join("segments.geojson");
    let bytes = std::fs::read(&src).map_err(|e| Error::Io { path: src.clone(), source: e })?;
    let doc: Value = serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: src.display().to_string(), source: e })?;
    let problems = validate_geojson(&doc);
    if !problems.is_empty() {
        return Err(Failure::new(1, "fusion.GeoJsonError", problems.join("; ")));
    }
    std::fs::write(out, &bytes).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    Ok(())
}

fn synth(scenario: Option<&Path>, seed: Option<u64>, noiseless: bool, duration_s: Option<f64>, out: &Path, as_json: bool) -> CmdResult {
    let mut s = match scenario {
        Some(p) => SynthScenario::from_json_file(p)?,
        None if noiseless => SynthScenario::noiseless(seed.unwrap_or(7)),
        None => SynthScenario::default(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(d) = duration_s {
        s.duration_s = d;
    }
    let (m, truth) = generate_session(&s, out)?;
    if as_json {
        print_json(&json!({
            "session_id": m.session_id,
            "dir": out.display().to_string(),
            "streams": m.streams.iter().map(|d| d.kind).collect::<Vec<StreamKind>>(),
            "fixations": truth.fixations.len(),
            "scr_peaks": truth.scr_peaks.len(),
            "heel_strikes": truth.heel_strikes_left.len() + truth.heel_strikes_right.len(),
        }));
    } else {
        println!("wrote session {} ({} streams) to {}", m.session_id, m.streams.len(), out.display());
    }
    Ok(())
}

fn score(bundle: &Path, truth: &Path, as_json: bool) -> CmdResult {
    let b = load_bundle(bundle)?;
    let t = GroundTruth::load(truth)?;
    let r = score_against_truth(&b, &t)?;
    if as_json {
        print_json(&serde_json::to_value(&r).unwrap_or(Value::Null));
    } else {
        let f = |x: Option<f64>| x.map_or("absent".to_string(), |v| format!("{v:.4}"));
        for (name, d) in [("fixations", &r.fixations), ("scr_peaks", &r.scr_peaks), ("heel_strikes", &r.heel_strikes)] {
            println!("{name:<14} precision {} recall {} ({}/{} matched)", f(d.precision), f(d.recall), d.matched, d.truth);
        }
        println!("trajectory rmse {} m", f(r.trajectory_rmse_m));
        println!("scale error {} rotation error {} deg", f(r.scale_rel_error), f(r.rotation_error_deg));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Validate { session } => validate(session, cli.json),
        Cmd::Fuse(a) => fuse(a, cli.json),
        Cmd::ExportGeojson { bundle, out } => export_geojson(bundle, out),
        Cmd::Synth { scenario, seed, noiseless, duration_s, out } => {
            synth(scenario.as_deref(), *seed, *noiseless, *duration_s, out, cli.json)
        }
        Cmd::Score { bundle, truth } => score(bundle, truth, cli.json),
        Cmd::Serve { bundle, port } => serve::run(bundle, *port),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message);
            ExitCode::from(f.exit)
        }
    }
}
