//! Floating-point operation counters.
//!
//! Kernels that matter for the cost model take an `&mut impl OpCounter`. The
//! no-op `()` implementation compiles away; [`FlopCounter`] tracks raw and
//! practical counts side by side so a single run can be compared against
//! either convention without mixing them.

/// Sink for operation counts emitted by instrumented kernels.
pub trait OpCounter {
    /// `n` fused multiply-add pairs: two raw operations, one practical.
    fn fma(&mut self, n: u64);
    /// `n` standalone operations (add, multiply, divide, sqrt).
    fn op(&mut self, n: u64);
}

impl OpCounter for () {
    #[inline(always)]
    fn fma(&mut self, _n: u64) {}
    #[inline(always)]
    fn op(&mut self, _n: u64) {}
}

/// Per-run accumulator of floating-point operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub raw: u64,
    pub practical: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

impl OpCounter for FlopCounter {
    #[inline]
    fn fma(&mut self, n: u64) {
        self.raw += 2 * n;
        self.practical += n;
    }

    #[inline]
    fn op(&mut self, n: u64) {
        self.raw += n;
        self.practical += n;
    }
}
