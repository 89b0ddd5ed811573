//! The small HTTP/1.1 subset the services speak.
//!
//! Handlers see plain [`Request`]/[`Response`] values. In-process runs call
//! them directly at the current simulation time; networked runs put the same
//! handlers behind a `tiny_http` listener and reach them with `ureq`.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    /// Path including any query string.
    pub target: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    /// Whether the peer is on the loopback interface. Always true in-process.
    pub from_loopback: bool,
}

impl Request {
    pub fn get(target: impl Into<String>) -> Self {
        Self { method: Method::Get, target: target.into(), headers: Vec::new(), body: Vec::new(), from_loopback: true }
    }

    pub fn post_json<T: Serialize>(target: impl Into<String>, body: &T) -> Self {
        Self {
            method: Method::Post,
            target: target.into(),
            headers: vec![("Content-Type".into(), "application/json".into())],
            body: serde_json::to_vec(body).expect("serializable body"),
            from_loopback: true,
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_string(), value.into()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn bearer_token(&self) -> Option<&str> {
        self.header("Authorization")?.strip_prefix("Bearer ").map(str::trim)
    }

    pub fn path(&self) -> &str {
        self.target.split('?').next().unwrap_or("")
    }

    pub fn query_param(&self, name: &str) -> Option<&str> {
        let query = self.target.split_once('?')?.1;
        query.split('&').find_map(|pair| {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            (k == name).then_some(v)
        })
    }

    pub fn json<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json<T: Serialize>(status: u16, body: &T) -> Self {
        Self { status, content_type: "application/json", body: serde_json::to_vec(body).expect("serializable body") }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, &serde_json::json!({ "error": message.into() }))
    }

    pub fn not_found() -> Self {
        Self::error(404, "not found")
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, TransportError> {
        serde_json::from_slice(&self.body).map_err(|e| TransportError::Body(e.to_string()))
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("service unreachable: {0}")]
    Unreachable(String),
    #[error("malformed response body: {0}")]
    Body(String),
}

/// Something that serves requests at a given time in milliseconds.
pub trait Service: Send {
    fn handle(&mut self, req: &Request, now: u64) -> Response;
}

/// Client side of an HTTP exchange.
pub trait Transport: Send {
    fn send(&mut self, req: &Request) -> Result<Response, TransportError>;
}

/// Millisecond clock shared between a driver and its services.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Clock advanced explicitly by the simulation driver.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Calls a shared service directly, stamping requests with the clock.
pub struct LocalTransport<S> {
    service: Arc<Mutex<S>>,
    clock: Arc<dyn Clock>,
    /// When false every request fails as if the service were down.
    pub online: bool,
}

impl<S: Service> LocalTransport<S> {
    pub fn new(service: Arc<Mutex<S>>, clock: Arc<dyn Clock>) -> Self {
        Self { service, clock, online: true }
    }
}

impl<S: Service> Transport for LocalTransport<S> {
    fn send(&mut self, req: &Request) -> Result<Response, TransportError> {
        if !self.online {
            return Err(TransportError::Unreachable("service offline".into()));
        }
        let now = self.clock.now_ms();
        Ok(self.service.lock().expect("service lock").handle(req, now))
    }
}

/// Blocking client for a base URL such as `http://127.0.0.1:8080`.
pub struct HttpClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(5)).max_idle_connections(0).build();
        Self { base: base.into().trim_end_matches('/').to_string(), agent }
    }
}

impl Transport for HttpClient {
    fn send(&mut self, req: &Request) -> Result<Response, TransportError> {
        let url = format!("{}{}", self.base, req.target);
        let mut call = self.agent.request(req.method.as_str(), &url);
        for (k, v) in &req.headers {
            call = call.set(k, v);
        }
        let result = match req.method {
            Method::Get => call.call(),
            Method::Post => call.send_bytes(&req.body),
        };
        let resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(TransportError::Unreachable(e.to_string())),
        };
        let status = resp.status();
        let mut body = Vec::new();
        resp.into_reader()
            .read_to_end(&mut body)
            .map_err(|e| TransportError::Body(e.to_string()))?;
        Ok(Response { status, content_type: "application/json", body })
    }
}

/// A service exposed on a TCP listener until dropped or shut down.
pub struct HttpServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
}

impl HttpServer {
    pub fn spawn<S: Service + 'static>(
        bind: &str,
        service: Arc<Mutex<S>>,
        clock: Arc<dyn Clock>,
    ) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let server = tiny_http::Server::from_listener(listener, None).map_err(std::io::Error::other)?;
        let server = Arc::new(server);
        let worker = {
            let server = Arc::clone(&server);
            std::thread::spawn(move || {
                for mut raw in server.incoming_requests() {
                    let response = match convert(&mut raw) {
                        Ok(req) => {
                            let now = clock.now_ms();
                            service.lock().expect("service lock").handle(&req, now)
                        }
                        Err(msg) => Response::error(400, msg),
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", response.content_type)
                        .expect("static header");
                    let out = tiny_http::Response::from_data(response.body)
                        .with_status_code(response.status)
                        .with_header(header);
                    if let Err(e) = raw.respond(out) {
                        tracing::warn!(error = %e, "failed to write response");
                    }
                }
            })
        };
        Ok(Self { addr, server, worker: Some(worker) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn convert(raw: &mut tiny_http::Request) -> Result<Request, String> {
    let method = match raw.method() {
        tiny_http::Method::Get => Method::Get,
        tiny_http::Method::Post => Method::Post,
        other => return Err(format!("method {other} not supported")),
    };
    let headers = raw
        .headers()
        .iter()
        .map(|h| (h.field.as_str().to_string(), h.value.as_str().to_string()))
        .collect();
    let from_loopback = raw.remote_addr().is_some_and(|a| a.ip().is_loopback());
    let mut body = Vec::new();
    raw.as_reader().read_to_end(&mut body).map_err(|e| e.to_string())?;
    Ok(Request { method, target: raw.url().to_string(), headers, body, from_loopback })
}
