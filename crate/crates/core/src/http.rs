//! Blocking JSON-over-HTTP plumbing shared by the embedding and LLM backends:
//! retry with exponential backoff and a cap on concurrent requests.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub url: String,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub retries: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
    pub bearer_token: Option<String>,
}

/// Counting semaphore bounding the number of in-flight requests.
#[derive(Debug)]
pub struct InFlightLimit {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(cap: usize) -> Self {
        Self {
            available: Mutex::new(cap.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fatal(String),
}

pub struct JsonClient {
    name: &'static str,
    settings: HttpSettings,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl JsonClient {
    pub fn new(name: &'static str, settings: HttpSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let limit = InFlightLimit::new(settings.max_in_flight);
        Self {
            name,
            settings,
            agent,
            limit,
        }
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    /// POSTs `body` and decodes the reply, retrying transport failures,
    /// 429 and 5xx responses, and undecodable bodies.
    pub fn post<B: Serialize, T: DeserializeOwned>(&self, body: &B) -> Result<T> {
        let _permit = self.limit.acquire();
        let attempts = self.settings.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let factor = 1u32 << (attempt - 1).min(10);
                std::thread::sleep(self.settings.backoff_base * factor);
            }
            match self.try_once(body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(msg) => {
                    tracing::warn!(backend = self.name, attempt, "request failed: {msg}");
                    last = msg;
                }
                Attempt::Fatal(msg) => {
                    return Err(Error::Backend {
                        backend: self.name,
                        attempts: attempt + 1,
                        message: msg,
                    })
                }
            }
        }
        Err(Error::Backend {
            backend: self.name,
            attempts,
            message: last,
        })
    }

    fn try_once<B: Serialize, T: DeserializeOwned>(&self, body: &B) -> Attempt<T> {
        let mut req = self.agent.post(&self.settings.url);
        if let Some(token) = &self.settings.bearer_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(format!("HTTP {status}"));
        }
        match resp.body_mut().read_json::<T>() {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Retry(format!("bad response body: {e}")),
        }
    }
}

/// Minimal single-threaded HTTP/1.1 responder for backend tests.
#[cfg(test)]
pub(crate) mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    pub struct MockServer {
        pub url: String,
        pub hits: Arc<AtomicUsize>,
    }

    /// `handler` maps (request number, body) to (status, response body).
    pub fn serve<F>(handler: F) -> MockServer
    where
        F: Fn(usize, &str) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = handler(n, &String::from_utf8_lossy(&body));
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        MockServer { url, hits }
    }
}
