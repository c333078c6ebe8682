//! Optional real-time scheduling for the wall-clock cycle thread.

/// Puts one thread under `SCHED_FIFO` and restores its previous policy on
/// drop.
pub(crate) struct RealtimeGuard {
    #[cfg(target_os = "linux")]
    tid: libc::pid_t,
    #[cfg(target_os = "linux")]
    policy: libc::c_int,
    #[cfg(target_os = "linux")]
    param: libc::sched_param,
}

impl RealtimeGuard {
    #[cfg(target_os = "linux")]
    pub fn enter(priority: u8) -> std::io::Result<Self> {
        // SAFETY: plain syscalls on the calling thread with valid pointers.
        unsafe {
            let tid = libc::syscall(libc::SYS_gettid) as libc::pid_t;
            let policy = libc::sched_getscheduler(tid);
            if policy < 0 {
                return Err(std::io::Error::last_os_error());
            }
            let mut param: libc::sched_param = std::mem::zeroed();
            if libc::sched_getparam(tid, &mut param) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            let rt = libc::sched_param {
                sched_priority: i32::from(priority),
            };
            if libc::sched_setscheduler(tid, libc::SCHED_FIFO, &rt) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(RealtimeGuard { tid, policy, param })
        }
    }

    #[cfg(not(target_os = "linux"))]
    pub fn enter(_priority: u8) -> std::io::Result<Self> {
        Err(std::io::Error::new(
            std::io::ErrorKind::Unsupported,
            "real-time scheduling is only wired up on Linux",
        ))
    }
}

impl Drop for RealtimeGuard {
    fn drop(&mut self) {
        #[cfg(target_os = "linux")]
        // SAFETY: restores the values read in `enter` on the same thread id.
        unsafe {
            libc::sched_setscheduler(self.tid, self.policy, &self.param);
        }
    }
}
