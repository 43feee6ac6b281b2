//! HTTP front end of a [`LabelQueue`] for human annotators.
//!
//! * `GET /queue`: ids awaiting a label.
//! * `GET /tile/{id}`: the tile's two images as base64 PNGs.
//! * `POST /label/{id}`: a mask PNG as the body, 0 = unchanged, 255 = changed.
//! * `GET /status`: queue counters.

use std::collections::HashMap;
use std::io::Read;
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::Serialize;
use tiny_http::{Header, Method as HttpMethod, Request, Response, Server};

use crate::active_loop::{LabelQueue, Rejection};
use crate::corpus::{image_to_png, mask_from_png};
use crate::error::{Error, Result};
use crate::synthdata::{TileId, TilePair};

/// Largest accepted label body.
pub const MAX_BODY_BYTES: u64 = 4 << 20;

/// A running server; dropping it stops the listener.
pub struct OracleServer {
    server: Arc<Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl OracleServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Serialize)]
struct QueueBody {
    iteration: usize,
    pending: Vec<TileId>,
}

#[derive(Serialize)]
struct TileBody<'a> {
    id: TileId,
    side: usize,
    t0: &'a str,
    t1: &'a str,
}

#[derive(Serialize)]
struct Accepted {
    accepted: TileId,
}

#[derive(Serialize)]
struct Refused {
    error: String,
}

struct Encoded {
    side: usize,
    t0: String,
    t1: String,
}

/// Serves `tiles` (masks are never exposed) and feeds submitted masks into
/// `queue`. Port 0 picks a free port; see [`OracleServer::addr`].
pub fn serve_oracle(queue: LabelQueue, tiles: &[TilePair], addr: impl ToSocketAddrs) -> Result<OracleServer> {
    let mut encoded = HashMap::with_capacity(tiles.len());
    for t in tiles {
        let enc = Encoded {
            side: t.side(),
            t0: STANDARD.encode(image_to_png(&t.t0)?),
            t1: STANDARD.encode(image_to_png(&t.t1)?),
        };
        if encoded.insert(t.id, enc).is_some() {
            return Err(Error::DuplicateTile(t.id));
        }
    }
    let server = Arc::new(Server::http(addr).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?);
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Io(std::io::Error::other("server is not bound to an IP address")))?;
    let worker = {
        let server = Arc::clone(&server);
        std::thread::spawn(move || {
            for request in server.incoming_requests() {
                handle(request, &queue, &encoded);
            }
        })
    };
    Ok(OracleServer {
        server,
        addr,
        worker: Some(worker),
    })
}

fn json<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).unwrap_or_default();
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
        .with_header(Header::from_bytes("Access-Control-Allow-Origin", "*").expect("static header"))
}

fn refuse(status: u16, reason: impl Into<String>) -> Response<std::io::Cursor<Vec<u8>>> {
    json(status, &Refused { error: reason.into() })
}

fn handle(mut request: Request, queue: &LabelQueue, tiles: &HashMap<TileId, Encoded>) {
    let url = request.url().split('?').next().unwrap_or("").to_string();
    let parts: Vec<&str> = url.trim_matches('/').split('/').collect();
    let response = match (request.method(), parts.as_slice()) {
        (HttpMethod::Options, _) => json(204, &()).with_header(
            Header::from_bytes("Access-Control-Allow-Methods", "GET, POST, OPTIONS").expect("static header"),
        ),
        (HttpMethod::Get, ["queue"]) => json(
            200,
            &QueueBody {
                iteration: queue.status().iteration,
                pending: queue.pending(),
            },
        ),
        (HttpMethod::Get, ["status"]) => json(200, &queue.status()),
        (HttpMethod::Get, ["tile", id]) => {
            match id.parse::<TileId>().ok().and_then(|id| tiles.get(&id).map(|t| (id, t))) {
                Some((id, t)) => json(
                    200,
                    &TileBody {
                        id,
                        side: t.side,
                        t0: &t.t0,
                        t1: &t.t1,
                    },
                ),
                None => refuse(404, format!("no tile `{id}`")),
            }
        }
        (HttpMethod::Post, ["label", id]) => label(&mut request, id, queue, tiles),
        (_, ["queue" | "status"] | ["tile" | "label", _]) => refuse(405, "method not allowed"),
        _ => refuse(404, format!("no route for {url}")),
    };
    let _ = request.respond(response);
}

fn label(
    request: &mut Request,
    id: &str,
    queue: &LabelQueue,
    tiles: &HashMap<TileId, Encoded>,
) -> Response<std::io::Cursor<Vec<u8>>> {
    let Some((id, tile)) = id.parse::<TileId>().ok().and_then(|id| tiles.get(&id).map(|t| (id, t))) else {
        return refuse(404, format!("no tile `{id}`"));
    };
    let mut body = Vec::new();
    if let Err(e) = request.as_reader().take(MAX_BODY_BYTES + 1).read_to_end(&mut body) {
        return refuse(400, format!("could not read body: {e}"));
    }
    if body.len() as u64 > MAX_BODY_BYTES {
        return refuse(413, format!("body exceeds {MAX_BODY_BYTES} bytes"));
    }
    let mask = match mask_from_png(&body, tile.side) {
        Ok(m) => m,
        Err(e) => return refuse(400, e.to_string()),
    };
    match queue.submit(id, mask) {
        Ok(()) => json(200, &Accepted { accepted: id }),
        Err(r @ (Rejection::NotPending(_) | Rejection::AlreadyLabelled(_))) => refuse(409, r.to_string()),
        Err(r @ Rejection::Malformed(_)) => refuse(400, r.to_string()),
    }
}
