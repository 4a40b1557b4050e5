//! Blocking JSON POST with exponential backoff, shared by the remote chat and
//! embedding clients.

use std::thread;
use std::time::Duration;

use serde_json::Value;

/// Exponential backoff schedule: `base * 2^(retry-1)`, capped at `max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub base: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(250),
            max: Duration::from_secs(8),
        }
    }
}

impl Backoff {
    /// Delay before the given retry (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32
            .checked_shl(retry.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.max)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Backoff,
}

#[derive(Debug)]
pub(crate) enum PostError {
    /// Retries exhausted on transient failures.
    Transport { attempts: u32, message: String },
    /// Non-retryable status.
    Rejected { status: u16, body: String },
    /// Malformed response body.
    Decode(String),
}

pub(crate) fn build_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn is_transient(status: u16) -> bool {
    status == 429 || status == 408 || (500..600).contains(&status)
}

/// POSTs `body` as JSON and returns the decoded JSON response with the number
/// of attempts made.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<(Value, u32), PostError> {
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let failure = match request.send_json(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| PostError::Decode(e.to_string()));
                if (200..300).contains(&status) {
                    let text = text?;
                    let value: Value = serde_json::from_str(&text)
                        .map_err(|e| PostError::Decode(format!("{e}: {text}")))?;
                    return Ok((value, attempt));
                }
                let text = text.unwrap_or_default();
                if !is_transient(status) {
                    return Err(PostError::Rejected { status, body: text });
                }
                format!("HTTP {status}: {text}")
            }
            Err(ureq::Error::BadUri(uri)) => {
                return Err(PostError::Rejected {
                    status: 0,
                    body: format!("bad uri {uri}"),
                })
            }
            Err(e) => e.to_string(),
        };
        if attempt > policy.max_retries {
            return Err(PostError::Transport {
                attempts: attempt,
                message: failure,
            });
        }
        let delay = policy.backoff.delay(attempt);
        log::debug!("{url}: attempt {attempt} failed ({failure}); retrying in {delay:?}");
        thread::sleep(delay);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_then_caps() {
        let b = Backoff {
            base: Duration::from_millis(100),
            max: Duration::from_millis(500),
        };
        let delays: Vec<u128> = (1..=6).map(|r| b.delay(r).as_millis()).collect();
        assert_eq!(delays, vec![100, 200, 400, 500, 500, 500]);
    }

    #[test]
    fn backoff_is_nondecreasing_for_large_retry_counts() {
        let b = Backoff::default();
        let mut prev = Duration::ZERO;
        for r in 1..200 {
            let d = b.delay(r);
            assert!(d >= prev);
            prev = d;
        }
    }
}
