//! Subnormal handling for the calling thread.
//!
//! Saturated sigmoids and vanishing gradients push values into the subnormal
//! range, where x86 arithmetic is microcoded and a training step can run more
//! than twice as slow. Training and scoring run with flush-to-zero and
//! denormals-are-zero set; results differ from IEEE only for magnitudes below
//! `f32::MIN_POSITIVE`.

/// Sets FTZ/DAZ on the current thread until dropped, then restores the
/// previous control word. A no-op on targets other than x86_64.
#[must_use = "the mode is reset when the guard is dropped"]
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

#[cfg(target_arch = "x86_64")]
fn read_mxcsr() -> u32 {
    let mut csr = 0u32;
    // SAFETY: stmxcsr stores the 32-bit control/status register to a valid address.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags)) };
    csr
}

#[cfg(target_arch = "x86_64")]
fn write_mxcsr(csr: u32) {
    // SAFETY: only the FTZ/DAZ bits differ from a value previously read back.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly, preserves_flags)) };
}

impl FlushDenormals {
    pub fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = read_mxcsr();
            write_mxcsr(saved | FTZ_DAZ);
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_mxcsr(self.saved);
    }
}
