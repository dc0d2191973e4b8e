//! Best-effort CPU pinning.
//!
//! On Linux the calling thread's affinity mask is set with
//! `sched_setaffinity`; threads it spawns afterwards inherit the mask, so
//! pinning an instance's controller thread also confines its GEMM workers.
//! Elsewhere pinning reports failure and runs continue unpinned.

/// CPUs this process may run on, in ascending order.
pub fn allowed_cpus() -> Vec<usize> {
    imp::allowed_cpus().unwrap_or_else(|| {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get());
        (0..n).collect()
    })
}

/// Restricts the calling thread to `cpus`. Returns whether the kernel
/// accepted the mask.
pub fn pin_current_thread(cpus: &[usize]) -> bool {
    !cpus.is_empty() && imp::pin(cpus)
}

/// The `threads` CPUs given to instance `index`: consecutive entries of
/// `allowed`, wrapping around when the host runs out.
pub fn instance_cpus(allowed: &[usize], index: usize, threads: usize) -> Vec<usize> {
    if allowed.is_empty() {
        return Vec::new();
    }
    (0..threads)
        .map(|j| allowed[(index * threads + j) % allowed.len()])
        .collect()
}

#[cfg(target_os = "linux")]
mod imp {
    use std::mem::{size_of, zeroed};

    pub fn allowed_cpus() -> Option<Vec<usize>> {
        // SAFETY: cpu_set_t is plain data; the kernel fills at most its size.
        unsafe {
            let mut set: libc::cpu_set_t = zeroed();
            if libc::sched_getaffinity(0, size_of::<libc::cpu_set_t>(), &mut set) != 0 {
                return None;
            }
            let cpus: Vec<usize> = (0..libc::CPU_SETSIZE as usize)
                .filter(|&c| libc::CPU_ISSET(c, &set))
                .collect();
            (!cpus.is_empty()).then_some(cpus)
        }
    }

    pub fn pin(cpus: &[usize]) -> bool {
        // SAFETY: as above; pid 0 addresses the calling thread.
        unsafe {
            let mut set: libc::cpu_set_t = zeroed();
            for &c in cpus {
                if c >= libc::CPU_SETSIZE as usize {
                    return false;
                }
                libc::CPU_SET(c, &mut set);
            }
            libc::sched_setaffinity(0, size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod imp {
    pub fn allowed_cpus() -> Option<Vec<usize>> {
        None
    }

    pub fn pin(_cpus: &[usize]) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_cpus_wrap() {
        assert_eq!(instance_cpus(&[0, 1, 2, 3], 1, 2), vec![2, 3]);
        assert_eq!(instance_cpus(&[0, 1, 2], 1, 2), vec![2, 0]);
        assert!(instance_cpus(&[], 0, 2).is_empty());
    }

    #[test]
    fn pinning_to_an_allowed_cpu() {
        let cpus = allowed_cpus();
        assert!(!cpus.is_empty());
        let ok = std::thread::spawn(move || pin_current_thread(&cpus[..1]))
            .join()
            .unwrap();
        if cfg!(target_os = "linux") {
            assert!(ok);
        }
    }
}
