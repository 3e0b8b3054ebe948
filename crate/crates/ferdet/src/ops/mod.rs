//! The fixed operator set the architecture needs, each with a backward rule.
//!
//! Shape rules are checked on entry and reported with the offending axis.
//! Broadcasting is deliberately restricted to scalar-with-tensor and
//! `[B,C,1,1]`-with-`[B,C,H,W]`.

mod basic;
mod conv;
mod loss;
mod norm;
mod pool;
mod shape;

pub use basic::*;

/// Multiply-accumulate accounting for cost reports. Convolutions, linear
/// layers, and scan kernels add their MAC counts here; FLOPs are reported
/// as twice the MAC total.
pub mod cost {
    use std::sync::atomic::{AtomicU64, Ordering};

    static MACS: AtomicU64 = AtomicU64::new(0);

    pub fn reset() {
        MACS.store(0, Ordering::Relaxed);
    }

    pub fn add(n: u64) {
        MACS.fetch_add(n, Ordering::Relaxed);
    }

    pub fn total_macs() -> u64 {
        MACS.load(Ordering::Relaxed)
    }
}
pub use conv::*;
pub use loss::*;
pub use norm::*;
pub use pool::*;
pub use shape::*;
