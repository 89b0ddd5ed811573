//! Mock social feed and the client that polls it.
//!
//! The service issues bearer tokens through a client-credentials exchange and
//! returns posts newer than a cursor. `POST /feed/inject` is a loopback-only
//! hook standing in for a person posting.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::http::{Method, Request, Response, Service, Transport, TransportError};

pub const MAX_POST_CHARS: usize = 280;
pub const DEFAULT_TOKEN_LIFETIME_MS: u64 = 3_600_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedPost {
    pub id: u64,
    pub author: String,
    pub text: String,
    pub posted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthToken {
    pub token: String,
    pub expires_at: u64,
}

impl AuthToken {
    pub fn is_live(&self, now: u64) -> bool {
        now < self.expires_at
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeedCursor {
    pub since_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeedError {
    #[error("authentication rejected")]
    AuthRejected,
    #[error("invalid post: {0}")]
    Validation(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected response {status}: {body}")]
    Protocol { status: u16, body: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedConfig {
    /// Registered client id -> secret.
    pub clients: BTreeMap<String, String>,
    pub token_lifetime_ms: u64,
}

impl Default for FeedConfig {
    fn default() -> Self {
        Self {
            clients: BTreeMap::from([("hub-app".to_string(), "hub-secret".to_string())]),
            token_lifetime_ms: DEFAULT_TOKEN_LIFETIME_MS,
        }
    }
}

#[derive(Debug, Default)]
pub struct FeedService {
    config: FeedConfig,
    posts: Vec<FeedPost>,
    tokens: HashMap<String, u64>,
}

fn fresh_token() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

impl FeedService {
    pub fn new(config: FeedConfig) -> Self {
        Self { config, posts: Vec::new(), tokens: HashMap::new() }
    }

    pub fn authenticate(&mut self, client_id: &str, client_secret: &str, now: u64) -> Result<AuthToken, FeedError> {
        match self.config.clients.get(client_id) {
            Some(secret) if secret == client_secret => {}
            _ => return Err(FeedError::AuthRejected),
        }
        self.tokens.retain(|_, exp| *exp > now);
        let token = fresh_token();
        let expires_at = now + self.config.token_lifetime_ms;
        self.tokens.insert(token.clone(), expires_at);
        Ok(AuthToken { token, expires_at })
    }

    fn check_token(&self, token: &str, now: u64) -> Result<(), FeedError> {
        match self.tokens.get(token) {
            Some(&exp) if now < exp => Ok(()),
            _ => Err(FeedError::AuthRejected),
        }
    }

    /// Posts with id above the cursor, ascending. Read-only.
    pub fn fetch_latest(&self, token: &str, cursor: FeedCursor, now: u64) -> Result<(Vec<FeedPost>, FeedCursor), FeedError> {
        self.check_token(token, now)?;
        // Ids are 1..=len and dense, so the tail after since_id is a slice.
        let start = usize::try_from(cursor.since_id).unwrap_or(usize::MAX).min(self.posts.len());
        let posts = self.posts[start..].to_vec();
        let since_id = posts.last().map_or(cursor.since_id, |p| p.id);
        Ok((posts, FeedCursor { since_id }))
    }

    pub fn inject_post(&mut self, author: &str, text: &str, now: u64) -> Result<FeedPost, FeedError> {
        let chars = text.chars().count();
        if chars > MAX_POST_CHARS {
            return Err(FeedError::Validation(format!("text is {chars} characters, limit {MAX_POST_CHARS}")));
        }
        let post = FeedPost {
            id: self.posts.len() as u64 + 1,
            author: author.to_string(),
            text: text.to_string(),
            posted_at: now,
        };
        self.posts.push(post.clone());
        Ok(post)
    }

    pub fn posts(&self) -> &[FeedPost] {
        &self.posts
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenRequest {
    client_id: String,
    client_secret: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenResponse {
    token: String,
    expires_in: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PostsResponse {
    posts: Vec<FeedPost>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InjectRequest {
    author: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InjectResponse {
    id: u64,
}

impl Service for FeedService {
    fn handle(&mut self, req: &Request, now: u64) -> Response {
        match (req.method, req.path()) {
            (Method::Post, "/oauth/token") => {
                let Ok(body) = req.json::<TokenRequest>() else {
                    return Response::error(400, "expected client_id and client_secret");
                };
                match self.authenticate(&body.client_id, &body.client_secret, now) {
                    Ok(tok) => Response::json(
                        200,
                        &TokenResponse { token: tok.token, expires_in: self.config.token_lifetime_ms / 1000 },
                    ),
                    Err(_) => Response::error(401, "invalid client credentials"),
                }
            }
            (Method::Get, "/feed/latest") => {
                let since_id = match req.query_param("since_id").map(str::parse::<u64>) {
                    None => 0,
                    Some(Ok(n)) => n,
                    Some(Err(_)) => return Response::error(400, "since_id must be a non-negative integer"),
                };
                let token = req.bearer_token().unwrap_or("");
                match self.fetch_latest(token, FeedCursor { since_id }, now) {
                    Ok((posts, _)) => Response::json(200, &PostsResponse { posts }),
                    Err(_) => Response::error(401, "missing, unknown or expired token"),
                }
            }
            (Method::Post, "/feed/inject") => {
                if !req.from_loopback {
                    return Response::error(403, "inject is loopback only");
                }
                let Ok(body) = req.json::<InjectRequest>() else {
                    return Response::error(400, "expected author and text");
                };
                match self.inject_post(&body.author, &body.text, now) {
                    Ok(post) => Response::json(201, &InjectResponse { id: post.id }),
                    Err(e) => Response::error(400, e.to_string()),
                }
            }
            _ => Response::not_found(),
        }
    }
}

/// Client half: holds credentials and the current token, re-authenticating
/// when the token expires or is refused.
#[derive(Debug, Clone)]
pub struct FeedClient {
    client_id: String,
    client_secret: String,
    token: Option<AuthToken>,
}

impl FeedClient {
    pub fn new(client_id: impl Into<String>, client_secret: impl Into<String>) -> Self {
        Self { client_id: client_id.into(), client_secret: client_secret.into(), token: None }
    }

    pub fn authenticate(&mut self, transport: &mut dyn Transport, now: u64) -> Result<AuthToken, FeedError> {
        let req = Request::post_json(
            "/oauth/token",
            &TokenRequest { client_id: self.client_id.clone(), client_secret: self.client_secret.clone() },
        );
        let resp = transport.send(&req)?;
        match resp.status {
            200 => {
                let body: TokenResponse = resp.parse()?;
                let tok = AuthToken { token: body.token, expires_at: now + body.expires_in * 1000 };
                self.token = Some(tok.clone());
                Ok(tok)
            }
            401 => Err(FeedError::AuthRejected),
            status => Err(FeedError::Protocol { status, body: String::from_utf8_lossy(&resp.body).into_owned() }),
        }
    }

    pub fn fetch_latest(
        &mut self,
        transport: &mut dyn Transport,
        cursor: FeedCursor,
        now: u64,
    ) -> Result<(Vec<FeedPost>, FeedCursor), FeedError> {
        for attempt in 0..2 {
            let token = match &self.token {
                Some(t) if t.is_live(now) => t.token.clone(),
                _ => self.authenticate(transport, now)?.token,
            };
            let req = Request::get(format!("/feed/latest?since_id={}", cursor.since_id))
                .with_header("Authorization", format!("Bearer {token}"));
            let resp = transport.send(&req)?;
            match resp.status {
                200 => {
                    let body: PostsResponse = resp.parse()?;
                    let since_id = body.posts.iter().map(|p| p.id).max().unwrap_or(cursor.since_id).max(cursor.since_id);
                    return Ok((body.posts, FeedCursor { since_id }));
                }
                401 if attempt == 0 => self.token = None,
                401 => return Err(FeedError::AuthRejected),
                status => {
                    return Err(FeedError::Protocol { status, body: String::from_utf8_lossy(&resp.body).into_owned() })
                }
            }
        }
        unreachable!("second attempt always returns")
    }

    /// Loopback test hook.
    pub fn inject(transport: &mut dyn Transport, author: &str, text: &str) -> Result<u64, FeedError> {
        let req = Request::post_json("/feed/inject", &InjectRequest { author: author.into(), text: text.into() });
        let resp = transport.send(&req)?;
        match resp.status {
            201 => Ok(resp.parse::<InjectResponse>()?.id),
            400 => Err(FeedError::Validation(String::from_utf8_lossy(&resp.body).into_owned())),
            status => Err(FeedError::Protocol { status, body: String::from_utf8_lossy(&resp.body).into_owned() }),
        }
    }
}
