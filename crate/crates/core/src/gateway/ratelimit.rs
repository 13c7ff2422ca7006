use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Token bucket refilled continuously at `requests_per_minute`.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    /// Burst capacity equals one second's worth of requests, at least one.
    pub fn per_minute(requests_per_minute: u32) -> Self {
        let per_sec = f64::from(requests_per_minute.max(1)) / 60.0;
        let capacity = per_sec.max(1.0);
        Self {
            capacity,
            per_sec,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// How long the caller must wait before a token is available; takes it.
    fn reserve(&self) -> Duration {
        let mut st = self.state.lock().unwrap();
        let now = Instant::now();
        let elapsed = now.duration_since(st.1).as_secs_f64();
        st.0 = (st.0 + elapsed * self.per_sec).min(self.capacity);
        st.1 = now;
        st.0 -= 1.0;
        if st.0 >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-st.0 / self.per_sec)
        }
    }

    pub fn acquire(&self) {
        let wait = self.reserve();
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burst_then_wait() {
        let rl = RateLimiter::per_minute(120); // 2/s, capacity 2
        assert_eq!(rl.reserve(), Duration::ZERO);
        assert_eq!(rl.reserve(), Duration::ZERO);
        let w = rl.reserve();
        assert!(w > Duration::from_millis(400) && w <= Duration::from_millis(500), "{w:?}");
    }
}
