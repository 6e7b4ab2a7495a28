//! Thread-local tallies of work done by the conv and norm kernels, used to
//! cross-check the analytic cost model against real forward passes.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply–adds issued by convolution GEMMs.
    pub conv_macs: u64,
    /// Element passes made by normalization kernels.
    pub norm_passes: u64,
}

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { conv_macs: 0, norm_passes: 0 }) };
}

/// Runs `f` with counting enabled and returns what its kernels did.
pub fn count_ops<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let was = ACTIVE.with(|a| a.replace(true));
    let before = COUNTS.with(|c| c.replace(OpCounts::default()));
    let out = f();
    let counted = COUNTS.with(|c| c.get());
    ACTIVE.with(|a| a.set(was));
    COUNTS.with(|c| {
        c.set(OpCounts {
            conv_macs: before.conv_macs + if was { counted.conv_macs } else { 0 },
            norm_passes: before.norm_passes + if was { counted.norm_passes } else { 0 },
        })
    });
    (out, counted)
}

pub(crate) fn add_conv_macs(n: usize) {
    if ACTIVE.with(Cell::get) {
        COUNTS.with(|c| {
            let mut v = c.get();
            v.conv_macs += n as u64;
            c.set(v);
        });
    }
}

pub(crate) fn add_norm_passes(n: usize) {
    if ACTIVE.with(Cell::get) {
        COUNTS.with(|c| {
            let mut v = c.get();
            v.norm_passes += n as u64;
            c.set(v);
        });
    }
}
