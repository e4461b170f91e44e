//! Running a blocking call against a wall-clock deadline.

use std::sync::mpsc;
use std::thread;
use std::time::Instant;

#[derive(Debug, PartialEq, Eq)]
pub enum Outcome<T> {
    Done(T),
    TimedOut,
    /// The call panicked or its worker thread could not be started.
    Failed,
}

/// Runs `f` on a worker thread and waits until `deadline` at most.
///
/// A call that overruns keeps running detached; its result is dropped.
pub fn run_until<T, F>(deadline: Instant, f: F) -> Outcome<T>
where
    T: Send + 'static,
    F: FnOnce() -> T + Send + 'static,
{
    let now = Instant::now();
    if now >= deadline {
        return Outcome::TimedOut;
    }
    let (tx, rx) = mpsc::sync_channel(1);
    let spawned = thread::Builder::new()
        .name("looksync-stage".into())
        .spawn(move || {
            let _ = tx.send(f());
        });
    if spawned.is_err() {
        return Outcome::Failed;
    }
    match rx.recv_timeout(deadline.saturating_duration_since(now)) {
        Ok(v) => Outcome::Done(v),
        Err(mpsc::RecvTimeoutError::Timeout) => Outcome::TimedOut,
        Err(mpsc::RecvTimeoutError::Disconnected) => Outcome::Failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn completes_in_time() {
        let d = Instant::now() + Duration::from_secs(2);
        assert_eq!(run_until(d, || 7), Outcome::Done(7));
    }

    #[test]
    fn overrun_times_out_promptly() {
        let start = Instant::now();
        let d = start + Duration::from_millis(30);
        let out = run_until(d, || {
            thread::sleep(Duration::from_millis(500));
            1
        });
        assert_eq!(out, Outcome::TimedOut);
        assert!(start.elapsed() < Duration::from_millis(200));
    }

    #[test]
    fn past_deadline_never_runs() {
        assert_eq!(run_until(Instant::now(), || 1), Outcome::TimedOut);
    }

    #[test]
    fn panic_is_failure() {
        let d = Instant::now() + Duration::from_secs(2);
        let out: Outcome<()> = run_until(d, || panic!("boom"));
        assert_eq!(out, Outcome::Failed);
    }
}
