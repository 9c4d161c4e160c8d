//! Retry, rate-limiting, and concurrency control wrapped around a backend.
//!
//! Time is abstracted behind [`Clock`] so the sliding-window limiter and the
//! exponential backoff can be tested with a virtual clock.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::{BackendError, BackendPolicy, ChatBackend, ChatRequest, ImageBackend, ImageArtifact, T2iRequest};

/// Monotonic time source in milliseconds.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep(&self, d: Duration);
}

/// Wall-clock implementation.
pub struct SystemClock {
    start: std::time::Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { start: std::time::Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock for tests: `sleep` advances time instantly.
#[derive(Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn advance(&self, d: Duration) {
        self.now.fetch_add(d.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Counting semaphore bounding in-flight requests.
pub struct Semaphore {
    permits: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits), cond: Condvar::new() }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cond.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cond.notify_one();
    }
}

/// Sliding-window rate limiter: at most `limit` requests in any 60s window.
struct RateLimiter {
    window: VecDeque<u64>,
    limit: u32,
}

const WINDOW_MS: u64 = 60_000;

impl RateLimiter {
    fn new(limit: u32) -> Self {
        RateLimiter { window: VecDeque::new(), limit }
    }

    /// Returns how long to wait before the next request may be issued.
    fn wait_needed(&mut self, now_ms: u64) -> Option<Duration> {
        while let Some(&t) = self.window.front() {
            if now_ms.saturating_sub(t) >= WINDOW_MS {
                self.window.pop_front();
            } else {
                break;
            }
        }
        if self.window.len() < self.limit as usize {
            None
        } else {
            let oldest = *self.window.front().expect("window non-empty at limit");
            Some(Duration::from_millis(oldest + WINDOW_MS - now_ms))
        }
    }

    fn record(&mut self, now_ms: u64) {
        self.window.push_back(now_ms);
    }
}

/// A backend wrapped with policy enforcement. Retries transient failures with
/// exponential backoff, throttles to `requests_per_minute`, and bounds
/// in-flight calls with a semaphore.
pub struct Gateway<B: ?Sized> {
    backend: Box<B>,
    policy: BackendPolicy,
    clock: Box<dyn Clock>,
    limiter: Mutex<RateLimiter>,
    semaphore: Semaphore,
    calls: AtomicU64,
    retries: AtomicU64,
    #[cfg(test)]
    issue_times: Mutex<Vec<u64>>,
}

impl<B: ?Sized> Gateway<B> {
    pub fn with_clock(backend: Box<B>, policy: BackendPolicy, clock: Box<dyn Clock>) -> Self {
        let limiter = Mutex::new(RateLimiter::new(policy.requests_per_minute));
        let semaphore = Semaphore::new(policy.max_concurrent);
        Gateway {
            backend,
            policy,
            clock,
            limiter,
            semaphore,
            calls: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            #[cfg(test)]
            issue_times: Mutex::new(Vec::new()),
        }
    }

    pub fn new(backend: Box<B>, policy: BackendPolicy) -> Self {
        Self::with_clock(backend, policy, Box::new(SystemClock::default()))
    }

    /// Total calls issued to the underlying backend (including retries).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    fn throttle(&self) {
        loop {
            let wait = {
                let mut limiter = self.limiter.lock().unwrap();
                let now = self.clock.now_ms();
                match limiter.wait_needed(now) {
                    None => {
                        limiter.record(now);
                        #[cfg(test)]
                        self.issue_times.lock().unwrap().push(now);
                        return;
                    }
                    Some(d) => d,
                }
            };
            self.clock.sleep(wait);
        }
    }

    fn run_with_retries<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let _guard = self.semaphore.acquire();
        let mut last: Option<BackendError> = None;
        let attempts = self.policy.max_retries + 1;
        for i in 0..attempts {
            if i > 0 {
                let backoff = self.policy.backoff_base() * 2u32.saturating_pow(i - 1);
                self.clock.sleep(backoff);
                self.retries.fetch_add(1, Ordering::SeqCst);
            }
            self.throttle();
            self.calls.fetch_add(1, Ordering::SeqCst);
            match attempt() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Exhausted {
            attempts,
            last: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }
}

impl Gateway<dyn ChatBackend> {
    /// Sends a chat request, retrying transient failures per policy.
    pub fn chat_complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.run_with_retries(|| self.backend.complete(req))
    }
}

impl Gateway<dyn ImageBackend> {
    pub fn txt2img(&self, req: &T2iRequest) -> Result<ImageArtifact, BackendError> {
        self.run_with_retries(|| self.backend.generate(req))
    }
}
