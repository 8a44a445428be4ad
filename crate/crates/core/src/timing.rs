//! Process CPU time, used for the offline/online cost split.

/// CPU seconds consumed by the whole process so far.
pub fn cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Runs `f` and returns its result with the CPU seconds it took.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t0 = cpu_seconds();
    let out = f();
    (out, (cpu_seconds() - t0).max(0.0))
}

/// Runs `f` once, then repeats it until `min_seconds` of CPU time have been
/// spent, and returns the first result with the mean time per call.
pub fn timed_repeat<T>(min_seconds: f64, mut f: impl FnMut() -> T) -> (T, f64) {
    let t0 = cpu_seconds();
    let out = f();
    let mut calls = 1usize;
    while cpu_seconds() - t0 < min_seconds {
        std::hint::black_box(f());
        calls += 1;
    }
    (out, ((cpu_seconds() - t0) / calls as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_is_monotone() {
        let a = cpu_seconds();
        let mut s = 0.0f64;
        for i in 0..200_000 {
            s += (i as f64).sqrt();
        }
        std::hint::black_box(s);
        assert!(cpu_seconds() >= a);
    }

    #[test]
    fn repeat_returns_first_result() {
        let mut n = 0;
        let (v, t) = timed_repeat(0.001, || {
            n += 1;
            n
        });
        assert_eq!(v, 1);
        assert!(t >= 0.0);
    }
}
