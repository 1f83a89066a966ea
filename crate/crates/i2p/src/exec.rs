//! Data-parallel batch execution.

use std::thread;

use i2p_core::train::{BatchExecutor, SampleGrad};
use i2p_core::Result;

/// Runs per-sample jobs on up to `threads` scoped workers. Results come back
/// in index order, so the gradient reduction is identical for any thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threaded {
    pub threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Threaded {
            threads: threads.max(1),
        }
    }

    /// Reads `I2P_THREADS`; unset or unparsable means one thread.
    pub fn from_env() -> Self {
        let n = std::env::var("I2P_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(1);
        Self::new(n)
    }
}

impl BatchExecutor for Threaded {
    fn map(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<SampleGrad> + Sync),
    ) -> Vec<Result<SampleGrad>> {
        let workers = self.threads.min(n);
        if workers <= 1 {
            return (0..n).map(job).collect();
        }
        let mut slots: Vec<Option<Result<SampleGrad>>> = (0..n).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || {
                        (w..n)
                            .step_by(workers)
                            .map(|i| (i, job(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|r| r.expect("every index ran"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_index_order() {
        let job = |i: usize| {
            Ok(SampleGrad {
                grads: vec![vec![i as f64]],
                loss_3d: 0.0,
                loss_2d: 0.0,
                loss_total: i as f64,
            })
        };
        for t in [1, 2, 3, 8] {
            let out = Threaded::new(t).map(5, &job);
            let got: Vec<f64> = out.into_iter().map(|r| r.unwrap().loss_total).collect();
            assert_eq!(got, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        }
    }
}
