//! Training-time access guard.
//!
//! Fine-tuning is transductive: it may look at query *images* but never at
//! query *labels*. Every query mask is wrapped in a guard
//! ([`crate::data::GuardedMask`]) that records any read happening inside a
//! training section. Tests assert the flag never trips; the wrapper makes the
//! contract checkable instead of aspirational.
//!
//! Sections are tracked per thread so evaluation running concurrently on
//! another thread can read masks freely.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

thread_local! {
    static TRAINING_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Process-wide count of guarded reads observed inside training sections,
/// kept for diagnostics and logging.
static TOTAL_TRIPS: AtomicUsize = AtomicUsize::new(0);

/// RAII marker: while alive, the current thread is inside a training section
/// and guarded mask reads count as violations. Sections nest.
#[derive(Debug)]
pub struct TrainingSection {
    _not_send: std::marker::PhantomData<*const ()>,
}

/// Enters a training section on the current thread.
pub fn training_section() -> TrainingSection {
    TRAINING_DEPTH.with(|d| d.set(d.get() + 1));
    TrainingSection { _not_send: std::marker::PhantomData }
}

impl Drop for TrainingSection {
    fn drop(&mut self) {
        TRAINING_DEPTH.with(|d| d.set(d.get().saturating_sub(1)));
    }
}

/// True while the current thread holds at least one [`TrainingSection`].
pub fn in_training_section() -> bool {
    TRAINING_DEPTH.with(|d| d.get() > 0)
}

/// Called by guarded masks when read inside a training section.
pub(crate) fn record_trip() {
    TOTAL_TRIPS.fetch_add(1, Ordering::Relaxed);
    log::error!("query mask read during a training section");
}

/// Total guarded-read violations seen by this process.
pub fn total_trips() -> usize {
    TOTAL_TRIPS.load(Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_nest_and_unwind() {
        assert!(!in_training_section());
        {
            let _outer = training_section();
            assert!(in_training_section());
            {
                let _inner = training_section();
                assert!(in_training_section());
            }
            assert!(in_training_section());
        }
        assert!(!in_training_section());
    }

    #[test]
    fn sections_are_per_thread() {
        let _s = training_section();
        let other = std::thread::spawn(in_training_section).join().unwrap();
        assert!(!other);
        assert!(in_training_section());
    }
}
