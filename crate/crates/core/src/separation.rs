//! Detector for management calls made from the synchronous stage path.
//!
//! The executor marks the current thread while it runs stage 1..=3 work.
//! Management entry points call [`SeparationProbe::check`]; a call from a
//! marked thread is counted as a violation instead of silently mixing
//! management work into the operation plane.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

thread_local! {
    static IN_OPERATION: Cell<bool> = const { Cell::new(false) };
}

/// Marks the current thread as executing operation-plane stage work.
pub struct OperationScope {
    prev: bool,
}

impl OperationScope {
    pub fn enter() -> Self {
        let prev = IN_OPERATION.with(|f| f.replace(true));
        OperationScope { prev }
    }
}

impl Drop for OperationScope {
    fn drop(&mut self) {
        IN_OPERATION.with(|f| f.set(self.prev));
    }
}

pub fn in_operation() -> bool {
    IN_OPERATION.with(Cell::get)
}

#[derive(Clone, Default)]
pub struct SeparationProbe {
    violations: Arc<AtomicU64>,
    offenders: Arc<Mutex<Vec<&'static str>>>,
}

impl SeparationProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Call at every management entry point.
    pub fn check(&self, operation: &'static str) {
        if in_operation() {
            self.violations.fetch_add(1, Ordering::Relaxed);
            if let Ok(mut o) = self.offenders.lock() {
                o.push(operation);
            }
        }
    }

    pub fn violations(&self) -> u64 {
        self.violations.load(Ordering::Relaxed)
    }

    pub fn offenders(&self) -> Vec<&'static str> {
        self.offenders.lock().map(|o| o.clone()).unwrap_or_default()
    }
}
