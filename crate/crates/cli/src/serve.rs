//! Static file server for decomposition packages.
//!
//! Every response carries permissive CORS headers so an editor served from
//! another origin can fetch the manifest and images.

use std::io::Write;
use std::path::{Component, Path, PathBuf};

use anyhow::{anyhow, Result};
use tiny_http::{Header, Method, Response, Server};

pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

pub const CORS_HEADERS: [(&str, &str); 5] = [
    ("Access-Control-Allow-Origin", "*"),
    ("Access-Control-Allow-Methods", "GET, HEAD, OPTIONS"),
    ("Access-Control-Allow-Headers", "*"),
    ("Cross-Origin-Resource-Policy", "cross-origin"),
    ("Cache-Control", "no-cache"),
];

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("txt") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Maps a request path onto `root`, refusing anything that would escape it.
fn resolve(root: &Path, url: &str) -> Option<PathBuf> {
    let path = url.split(['?', '#']).next().unwrap_or("");
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let full = root.join(rel);
    Some(if full.is_dir() { full.join("index.html") } else { full })
}

fn text(status: u16, msg: &str) -> Reply {
    Reply { status, content_type: "text/plain; charset=utf-8", body: msg.as_bytes().to_vec() }
}

/// Response for one request; `HEAD` replies carry the body length only.
pub fn respond(root: &Path, method: &Method, url: &str) -> Reply {
    match method {
        Method::Options => return Reply { status: 204, content_type: "text/plain", body: Vec::new() },
        Method::Get | Method::Head => {}
        _ => return text(405, "method not allowed"),
    }
    let Some(path) = resolve(root, url) else { return text(403, "forbidden") };
    match std::fs::read(&path) {
        Ok(body) => Reply { status: 200, content_type: content_type(&path), body },
        Err(_) => text(404, "not found"),
    }
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("static header")
}

/// Serves `root` until the process is stopped. The bound address is
/// printed first so callers can use port 0.
pub fn serve(root: &Path, host: &str, port: u16) -> Result<()> {
    if !root.is_dir() {
        anyhow::bail!("{} is not a directory", root.display());
    }
    let server = Server::http((host, port)).map_err(|e| anyhow!("cannot listen on {host}:{port}: {e}"))?;
    let addr = server.server_addr().to_ip().ok_or_else(|| anyhow!("server has no IP address"))?;
    println!("serving {} at http://{addr}/", root.display());
    std::io::stdout().flush()?;
    for request in server.incoming_requests() {
        let reply = respond(root, request.method(), request.url());
        let head = *request.method() == Method::Head;
        let len = reply.body.len();
        let body = if head { Vec::new() } else { reply.body };
        let mut response = Response::from_data(body)
            .with_status_code(reply.status)
            .with_header(header("Content-Type", reply.content_type));
        if head {
            response = response.with_header(header("Content-Length", &len.to_string()));
        }
        for (name, value) in CORS_HEADERS {
            response = response.with_header(header(name, value));
        }
        // A client hanging up mid-response is not a server failure.
        let _ = request.respond(response);
    }
    Ok(())
}
