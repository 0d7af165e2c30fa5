//! Scoped control of subnormal handling for `f32`/`f64` arithmetic.
//!
//! Gradients of a saturating network drift into the subnormal range, where
//! x86 arithmetic takes a slow microcode path. [`FlushSubnormals`] sets the
//! flush-to-zero and denormals-are-zero bits of the SSE control register for
//! the current thread and restores the previous state when dropped. On other
//! targets it does nothing.

#[cfg(target_arch = "x86_64")]
mod imp {
    #[allow(deprecated)]
    use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};

    const FTZ_DAZ: u32 = 0x8040;

    pub fn get() -> u32 {
        // SAFETY: reading MXCSR has no preconditions on x86-64, where SSE is
        // part of the baseline.
        #[allow(deprecated)]
        unsafe {
            _mm_getcsr()
        }
    }

    pub fn set(v: u32) {
        // SAFETY: only the rounding-control-independent FTZ/DAZ bits are
        // changed relative to a value read from the register.
        #[allow(deprecated)]
        unsafe {
            _mm_setcsr(v)
        }
    }

    pub fn enabled(v: u32) -> u32 {
        v | FTZ_DAZ
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub fn get() -> u32 {
        0
    }

    pub fn set(_: u32) {}

    pub fn enabled(v: u32) -> u32 {
        v
    }
}

/// Flushes subnormal inputs and results to zero until dropped.
#[must_use = "the previous mode is restored when the guard is dropped"]
pub struct FlushSubnormals {
    saved: u32,
}

impl FlushSubnormals {
    pub fn enable() -> Self {
        let saved = imp::get();
        imp::set(imp::enabled(saved));
        FlushSubnormals { saved }
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        imp::set(self.saved);
    }
}
