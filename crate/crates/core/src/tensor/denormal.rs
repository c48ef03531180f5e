//! Scoped flush-to-zero for subnormal floats.
//!
//! Squashed capsules with small norms and their gradients drift into the
//! subnormal range, where x86 arithmetic is many times slower. Flushing them
//! changes results only below `f32::MIN_POSITIVE`.

/// Enables flush-to-zero and denormals-are-zero on the current thread until
/// dropped, then restores the previous mode. A no-op off x86-64.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    pub fn new() -> Self {
        let saved = read_csr();
        write_csr(saved | FTZ_DAZ);
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn new() -> Self {
        Self {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_csr(self.saved);
    }
}

#[cfg(target_arch = "x86_64")]
fn read_csr() -> u32 {
    let mut csr = 0u32;
    // SAFETY: stmxcsr only stores the SSE control register to the given address.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack)) };
    csr
}

#[cfg(target_arch = "x86_64")]
fn write_csr(csr: u32) {
    // SAFETY: only the FTZ/DAZ bits differ from a value read back from the register.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack)) };
}

#[cfg(test)]
mod tests {
    use super::*;

    // Each product is opaque so it is computed under the current MXCSR.
    fn product() -> f32 {
        std::hint::black_box(f32::MIN_POSITIVE) * std::hint::black_box(0.5f32)
    }

    #[test]
    fn flushes_inside_scope_only() {
        assert!(product() > 0.0);
        {
            let _g = FlushDenormals::new();
            #[cfg(target_arch = "x86_64")]
            assert_eq!(product(), 0.0);
        }
        assert!(product() > 0.0);
    }
}
