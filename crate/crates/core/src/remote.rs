//! Blocking JSON-over-HTTP plumbing shared by the remote embedder, generator,
//! judge and segmenter clients.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum CallError {
    Timeout,
    Unavailable(String),
    BadResponse(String),
}

/// Counting semaphore bounding concurrent in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct PermitGuard<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

pub(crate) struct JsonClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    timeout: Duration,
    permits: Permits,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient")
            .field("endpoint", &self.endpoint)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl JsonClient {
    pub(crate) fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let http = reqwest::blocking::Client::builder()
            .build()
            .expect("reqwest client without TLS backends always builds");
        Self {
            http,
            endpoint: endpoint.into(),
            timeout,
            permits: Permits::new(max_in_flight),
        }
    }

    pub(crate) fn post<Req, Resp>(&self, body: &Req) -> Result<Resp, CallError>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        self.post_with_timeout(body, self.timeout)
    }

    pub(crate) fn post_with_timeout<Req, Resp>(&self, body: &Req, timeout: Duration) -> Result<Resp, CallError>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        if timeout.is_zero() {
            return Err(CallError::Timeout);
        }
        let _permit = self.permits.acquire();
        let resp = self
            .http
            .post(&self.endpoint)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(classify)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(CallError::Unavailable(format!("{} returned {status}", self.endpoint)));
        }
        let bytes = resp.bytes().map_err(classify)?;
        serde_json::from_slice(&bytes).map_err(|e| CallError::BadResponse(e.to_string()))
    }
}

fn classify(e: reqwest::Error) -> CallError {
    if e.is_timeout() {
        CallError::Timeout
    } else {
        CallError::Unavailable(e.to_string())
    }
}
