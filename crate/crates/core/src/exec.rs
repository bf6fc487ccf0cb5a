//! Execution strategy for the numeric kernels.
//!
//! Every kernel decomposes its work into a fixed set of chunks that is
//! independent of thread count. With the `parallel` feature the chunks are
//! scheduled on the rayon pool; without it (or after [`set_parallel`]`(false)`)
//! they run in order on the calling thread. Because chunk boundaries and the
//! per-chunk accumulation order never change, both strategies produce
//! bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Globally enable or disable parallel scheduling. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

/// Whether kernels currently schedule their chunks on the rayon pool.
pub fn parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Run `body` over an indexed iterator either in parallel or sequentially,
/// depending on the global flag. The parallel expression must enumerate the
/// same items in the same chunking as the sequential one.
#[macro_export]
macro_rules! maybe_par_for_each {
    ($seq:expr, $par:expr, $body:expr) => {{
        #[cfg(feature = "parallel")]
        {
            if $crate::exec::parallel() {
                use rayon::prelude::*;
                $par.for_each($body);
            } else {
                $seq.for_each($body);
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            $seq.for_each($body);
        }
    }};
}
