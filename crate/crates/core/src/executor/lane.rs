//! The P2 worker: a single lane executing low-priority stage-2 tasks on
//! private frame copies.
//!
//! Tasks travel to the lane by value and come back with their results, so
//! the executive never shares a task with the lane. A task that is still
//! running when its cycle's wait window closes simply returns later; its
//! output is discarded as late.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{ClockMode, SyncTask, TaskContext, TaskFault};
use crate::ring::{Cycle, SignalFrame, StageId, TaskId};

pub(crate) struct P2Job {
    pub cycle: Cycle,
    pub frame: SignalFrame,
    pub tasks: Vec<(TaskId, Box<dyn SyncTask>)>,
}

pub(crate) struct P2Item {
    pub id: TaskId,
    pub task: Box<dyn SyncTask>,
    pub result: Result<(), TaskFault>,
    pub duration: Duration,
    pub frame: SignalFrame,
}

pub(crate) struct P2Done {
    pub cycle: Cycle,
    pub items: Vec<P2Item>,
}

pub(crate) struct P2Thread {
    jobs: Option<Sender<P2Job>>,
    done: Receiver<P2Done>,
    handle: Option<JoinHandle<()>>,
}

impl P2Thread {
    pub fn spawn() -> std::io::Result<Self> {
        let (job_tx, job_rx) = mpsc::channel::<P2Job>();
        let (done_tx, done_rx) = mpsc::channel::<P2Done>();
        let handle = std::thread::Builder::new().name("p2-lane".into()).spawn(move || {
            lower_thread_priority();
            while let Ok(job) = job_rx.recv() {
                let mut items = Vec::with_capacity(job.tasks.len());
                for (id, mut task) in job.tasks {
                    let mut frame = job.frame;
                    let start = Instant::now();
                    let result = {
                        let mut cx =
                            TaskContext::new(job.cycle, StageId::Control, ClockMode::WallClock, &mut frame, None);
                        task.execute(&mut cx)
                    };
                    items.push(P2Item {
                        id,
                        task,
                        result,
                        duration: start.elapsed(),
                        frame,
                    });
                }
                if done_tx
                    .send(P2Done {
                        cycle: job.cycle,
                        items,
                    })
                    .is_err()
                {
                    break;
                }
            }
        })?;
        Ok(P2Thread {
            jobs: Some(job_tx),
            done: done_rx,
            handle: Some(handle),
        })
    }

    // The job comes back by value on failure; boxing it would cost an
    // allocation every cycle.
    #[allow(clippy::result_large_err)]
    pub fn dispatch(&self, job: P2Job) -> Result<(), P2Job> {
        match &self.jobs {
            Some(tx) => tx.send(job).map_err(|e| e.0),
            None => Err(job),
        }
    }

    pub fn recv_until(&self, deadline: Instant) -> Option<P2Done> {
        let now = Instant::now();
        let wait = deadline.saturating_duration_since(now);
        match self.done.recv_timeout(wait) {
            Ok(d) => Some(d),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn try_recv(&self) -> Option<P2Done> {
        self.done.try_recv().ok()
    }

    /// Stops accepting jobs and collects everything still in flight.
    pub fn shutdown(mut self, grace: Duration) -> Vec<P2Done> {
        self.jobs = None;
        let deadline = Instant::now() + grace;
        let mut out = Vec::new();
        while let Some(d) = self.recv_until(deadline) {
            out.push(d);
        }
        if let Some(h) = self.handle.take() {
            if h.is_finished() || Instant::now() < deadline {
                let _ = h.join();
            }
        }
        out
    }
}

#[cfg(target_os = "linux")]
fn lower_thread_priority() {
    // Best effort: nice +10 for this thread only.
    unsafe {
        let tid = libc::syscall(libc::SYS_gettid) as libc::id_t;
        libc::setpriority(libc::PRIO_PROCESS, tid, 10);
    }
}

#[cfg(not(target_os = "linux"))]
fn lower_thread_priority() {}
