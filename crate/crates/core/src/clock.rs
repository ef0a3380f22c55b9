//! CPU and wall-clock timers.

use std::time::Instant;

fn cpu_seconds(clock: libc::clockid_t) -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(clock, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    cpu_seconds(libc::CLOCK_THREAD_CPUTIME_ID)
}

/// CPU time consumed by the whole process.
pub fn process_cpu_seconds() -> f64 {
    cpu_seconds(libc::CLOCK_PROCESS_CPUTIME_ID)
}

/// Which CPU clock a [`Stopwatch`] reads. Thread time is unaffected by other
/// work in the process but misses work done on pool threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpuClock {
    Thread,
    Process,
}

impl CpuClock {
    /// Thread time for single-threaded runs, process time otherwise.
    pub fn for_threads(threads: usize) -> Self {
        if threads <= 1 {
            CpuClock::Thread
        } else {
            CpuClock::Process
        }
    }

    pub fn now(self) -> f64 {
        match self {
            CpuClock::Thread => thread_cpu_seconds(),
            CpuClock::Process => process_cpu_seconds(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stopwatch {
    clock: CpuClock,
    cpu: f64,
    wall: Instant,
}

impl Stopwatch {
    pub fn start(clock: CpuClock) -> Self {
        Self {
            clock,
            cpu: clock.now(),
            wall: Instant::now(),
        }
    }

    pub fn cpu_seconds(&self) -> f64 {
        (self.clock.now() - self.cpu).max(0.0)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.wall.elapsed().as_secs_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_clock_advances_with_work() {
        let sw = Stopwatch::start(CpuClock::Thread);
        let mut x = 0u64;
        for i in 0..5_000_000u64 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(i);
        }
        std::hint::black_box(x);
        assert!(sw.cpu_seconds() > 0.0);
        assert!(sw.wall_seconds() > 0.0);
    }
}
