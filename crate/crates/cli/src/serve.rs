//! Read-only static server for a bundle directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use tiny_http::{Header, Method, Request, Response, Server, StatusCode};

use mobiscope_core::fusion::load_bundle_index;

use crate::{CmdResult, Failure};

pub fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("geojson") => "application/geo+json",
        Some("json") => "application/json",
        Some("csv") => "text/csv; charset=utf-8",
        Some("txt") => "text/plain; charset=utf-8",
        Some("html") => "text/html; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Maps a request target onto a file inside `root`, or `None` when it is
/// outside the bundle or not a regular file.
pub fn resolve(root: &Path, target: &str) -> Option<PathBuf> {
    let path = target.split(['?', '#']).next().unwrap_or("");
    let rel = path.trim_start_matches('/');
    let rel = if rel.is_empty() { "bundle.json" } else { rel };
    if rel.split('/').any(|c| c.is_empty() || c == "." || c == "..") || rel.contains('\\') || rel.contains('%') {
        return None;
    }
    let full = root.join(rel);
    let canon = full.canonicalize().ok()?;
    let root = root.canonicalize().ok()?;
    (canon.starts_with(&root) && canon.is_file()).then_some(canon)
}

fn header(k: &str, v: &str) -> Header {
    Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("static header")
}

fn cors(mut r: Response<std::io::Cursor<Vec<u8>>>) -> Response<std::io::Cursor<Vec<u8>>> {
    r.add_header(header("Access-Control-Allow-Origin", "*"));
    r.add_header(header("Access-Control-Allow-Methods", "GET, HEAD, OPTIONS"));
    r.add_header(header("Access-Control-Allow-Headers", "*"));
    r
}

fn respond(root: &Path, req: Request) {
    let method = req.method().clone();
    let resp = match method {
        Method::Options => cors(Response::from_data(Vec::new()).with_status_code(StatusCode(204))),
        Method::Get | Method::Head => match resolve(root, req.url()) {
            Some(p) => match std::fs::read(&p) {
                Ok(bytes) => {
                    let body = if method == Method::Head { Vec::new() } else { bytes };
                    cors(Response::from_data(body).with_header(header("Content-Type", content_type(&p))))
                }
                Err(_) => cors(Response::from_string("not found\n").with_status_code(StatusCode(404))),
            },
            None => cors(Response::from_string("not found\n").with_status_code(StatusCode(404))),
        },
        _ => cors(
            Response::from_string("method not allowed\n")
                .with_status_code(StatusCode(405))
                .with_header(header("Allow", "GET, HEAD, OPTIONS")),
        ),
    };
    let _ = req.respond(resp);
}

pub fn run(bundle: &Path, port: u16) -> CmdResult {
    load_bundle_index(bundle)?;
    let server = Server::http(("127.0.0.1", port))
        .map_err(|e| Failure::new(2, "cli.BindError", format!("cannot bind 127.0.0.1:{port}: {e}")))?;
    let bound = server.server_addr().to_ip().map_or(port, |a| a.port());
    println!("listening on http://127.0.0.1:{bound}");
    let _ = std::io::stdout().flush();
    for req in server.incoming_requests() {
        respond(bundle, req);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_only_inside_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bundle.json"), "{}").unwrap();
        assert!(resolve(dir.path(), "/bundle.json").is_some());
        assert!(resolve(dir.path(), "/").is_some());
        assert!(resolve(dir.path(), "/bundle.json?x=1").is_some());
        assert!(resolve(dir.path(), "/../etc/passwd").is_none());
        assert!(resolve(dir.path(), "/%2e%2e/x").is_none());
        assert!(resolve(dir.path(), "/missing.json").is_none());
    }

    #[test]
    fn content_types() {
        assert_eq!(content_type(Path::new("segments.geojson")), "application/geo+json");
        assert_eq!(content_type(Path::new("bundle.json")), "application/json");
    }
}
