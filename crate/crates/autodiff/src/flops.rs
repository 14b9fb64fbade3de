//! Instrumented FLOP counter.
//!
//! Forward kernels report the multiply-accumulates they actually execute
//! (two FLOPs each). Counting is thread-local and off unless a
//! [`FlopScope`] is alive, so training pays nothing for it.

use std::cell::{Cell, RefCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    MatMul,
    Conv,
    /// Weight generation from spline knots.
    SplineGen,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounts {
    pub matmul: u64,
    pub conv: u64,
    pub spline_gen: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.matmul + self.conv + self.spline_gen
    }
}

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static COUNTS: RefCell<FlopCounts> = RefCell::new(FlopCounts::default());
}

pub fn record(kind: Kind, flops: usize) {
    if !ACTIVE.with(|a| a.get()) {
        return;
    }
    COUNTS.with(|c| {
        let mut c = c.borrow_mut();
        let f = flops as u64;
        match kind {
            Kind::MatMul => c.matmul += f,
            Kind::Conv => c.conv += f,
            Kind::SplineGen => c.spline_gen += f,
        }
    });
}

/// Counts FLOPs recorded on this thread while alive.
pub struct FlopScope {
    _private: (),
}

impl FlopScope {
    pub fn start() -> Self {
        COUNTS.with(|c| *c.borrow_mut() = FlopCounts::default());
        ACTIVE.with(|a| a.set(true));
        Self { _private: () }
    }

    pub fn counts(&self) -> FlopCounts {
        COUNTS.with(|c| c.borrow().clone())
    }
}

impl Drop for FlopScope {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(false));
    }
}
