//! Color-class sweep executor shared by both solvers.
//!
//! Blocks inside one class are computed concurrently against an immutable
//! snapshot of the state, then written back in class order. Results are
//! therefore independent of the worker count.

use std::time::Instant;

use rayon::prelude::*;

/// Timing of one full sweep over all color classes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepTiming {
    /// Sum over classes of the slowest block in the class, seconds.
    pub parallel: f64,
    /// Sum of every block time, seconds.
    pub serial: f64,
}

impl std::ops::AddAssign for SweepTiming {
    fn add_assign(&mut self, o: Self) {
        self.parallel += o.parallel;
        self.serial += o.serial;
    }
}

/// Runs `compute` for every block of each class in parallel, then `apply`
/// sequentially in block order before moving on to the next class.
pub fn sweep<S, R, C, A>(classes: &[Vec<usize>], state: &mut S, compute: C, mut apply: A) -> SweepTiming
where
    S: Sync,
    R: Send,
    C: Fn(&S, usize) -> R + Sync,
    A: FnMut(&mut S, usize, R),
{
    let mut timing = SweepTiming::default();
    for class in classes {
        let snapshot: &S = state;
        let results: Vec<(usize, R, f64)> = class
            .par_iter()
            .map(|&b| {
                let t0 = Instant::now();
                let r = compute(snapshot, b);
                (b, r, t0.elapsed().as_secs_f64())
            })
            .collect();
        let mut class_max = 0.0f64;
        for (b, r, dt) in results {
            class_max = class_max.max(dt);
            timing.serial += dt;
            apply(state, b, r);
        }
        timing.parallel += class_max;
    }
    timing
}

/// Thread pool with a fixed worker count.
pub fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_time_never_exceeds_serial() {
        let classes = vec![vec![0, 1, 2], vec![3]];
        let mut state = vec![0u64; 4];
        let t = sweep(
            &classes,
            &mut state,
            |s, b| s.iter().sum::<u64>() + b as u64,
            |s, b, r| s[b] = r,
        );
        assert!(t.parallel <= t.serial + 1e-12);
        // Class members read the same snapshot.
        assert_eq!(state, vec![0, 1, 2, 6]);
    }
}
