//! Shared HTTP plumbing for the remote embedding and generation clients.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    /// Delay before the first retry; doubles each retry.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightPermit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut used = self.used.lock().expect("limit lock");
        while *used >= self.max {
            used = self.freed.wait(used).expect("limit lock");
        }
        *used += 1;
        InFlightPermit(self)
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().expect("limit lock");
        *used -= 1;
        self.0.freed.notify_one();
    }
}

pub(crate) fn api_key(env_var: Option<&str>) -> Option<String> {
    env_var
        .and_then(|v| std::env::var(v).ok())
        .filter(|k| !k.is_empty())
}

/// POSTs a JSON body, retrying transport failures, 429 and 5xx responses.
pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
    policy: RetryPolicy,
) -> Result<serde_json::Value> {
    let mut last = String::new();
    for attempt in 0..=policy.retries {
        if attempt > 0 {
            std::thread::sleep(policy.delay(attempt - 1));
        }
        let mut req = client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        match req.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp
                        .json()
                        .map_err(|e| Error::Contract(format!("malformed response body: {e}")));
                }
                let text = resp.text().unwrap_or_default();
                last = format!(
                    "HTTP {status}: {}",
                    text.chars().take(200).collect::<String>()
                );
                if !(status.as_u16() == 429 || status.is_server_error()) {
                    return Err(Error::Transport {
                        retries: attempt,
                        message: last,
                    });
                }
            }
            Err(e) => last = e.to_string(),
        }
        log::debug!("request to {url} failed (attempt {}): {last}", attempt + 1);
    }
    Err(Error::Transport {
        retries: policy.retries,
        message: last,
    })
}

#[cfg(test)]
pub(crate) mod testing {
    //! Minimal HTTP responder for client tests.
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    pub struct MockServer {
        pub url: String,
        pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
    }

    /// Serves each response in turn (`(status, body)`), then closes.
    pub fn serve(responses: Vec<(u16, String)>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let l = line.trim_end().to_ascii_lowercase();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut buf = vec![0u8; len];
                let _ = reader.read_exact(&mut buf);
                if let Ok(v) = serde_json::from_slice(&buf) {
                    log.lock().unwrap().push(v);
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        MockServer { url, requests }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            retries: 3,
            base_delay_ms: 10,
        };
        assert_eq!(p.delay(0), Duration::from_millis(10));
        assert_eq!(p.delay(2), Duration::from_millis(40));
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let server = testing::serve(vec![(503, "{}".into()), (200, r#"{"ok": true}"#.into())]);
        let client = reqwest::blocking::Client::new();
        let policy = RetryPolicy {
            retries: 3,
            base_delay_ms: 1,
        };
        let v = post_json(&client, &server.url, None, &serde_json::json!({}), policy).unwrap();
        assert_eq!(v["ok"], true);
    }

    #[test]
    fn exhausted_retries_report_count() {
        let server = testing::serve(vec![(500, "{}".into()); 3]);
        let client = reqwest::blocking::Client::new();
        let policy = RetryPolicy {
            retries: 2,
            base_delay_ms: 1,
        };
        let err =
            post_json(&client, &server.url, None, &serde_json::json!({}), policy).unwrap_err();
        assert!(matches!(err, Error::Transport { retries: 2, .. }), "{err}");
    }

    #[test]
    fn in_flight_limit_bounds_concurrency() {
        let limit = Arc::new(InFlightLimit::new(2));
        let peak = Arc::new(Mutex::new((0usize, 0usize)));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limit, peak) = (limit.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = limit.acquire();
                    {
                        let mut g = peak.lock().unwrap();
                        g.0 += 1;
                        g.1 = g.1.max(g.0);
                    }
                    std::thread::sleep(Duration::from_millis(5));
                    peak.lock().unwrap().0 -= 1;
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.lock().unwrap().1 <= 2);
    }
}
