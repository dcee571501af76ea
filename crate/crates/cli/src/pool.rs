//! Bounded worker pool for independent experiment cells.
//!
//! Jobs are pulled from a shared counter, so workers stay busy regardless of
//! how cell runtimes vary, and results are returned in submission order so
//! downstream output never depends on scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SHORTCUT_PROBE_THREADS";

/// Worker count: available parallelism, capped by [`THREADS_ENV`] when set to
/// a positive integer.
pub fn thread_cap() -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(n) if n >= 1 => hw.min(n),
        _ => hw,
    }
}

/// Runs every job on up to `threads` workers and returns the results in the
/// order the jobs were given. A panicking job propagates the panic.
pub fn run_jobs<J, R>(jobs: &[J], threads: usize, worker: impl Fn(&J) -> R + Sync) -> Vec<R>
where
    J: Sync,
    R: Send,
{
    let n = jobs.len();
    if threads <= 1 || n <= 1 {
        return jobs.iter().map(worker).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = worker(&jobs[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("every job index below n was claimed")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_submission_order() {
        let jobs: Vec<usize> = (0..37).collect();
        let out = run_jobs(&jobs, 4, |&i| i * i);
        assert_eq!(out, (0..37).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn single_thread_path_matches() {
        let jobs = vec![1u64, 2, 3];
        assert_eq!(run_jobs(&jobs, 1, |&x| x + 10), vec![11, 12, 13]);
    }

    #[test]
    fn env_caps_workers() {
        // Touching the process environment is global; this is the only test
        // that does so.
        std::env::set_var(THREADS_ENV, "1");
        assert_eq!(thread_cap(), 1);
        std::env::set_var(THREADS_ENV, "not a number");
        let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        assert_eq!(thread_cap(), hw);
        std::env::remove_var(THREADS_ENV);
    }
}
