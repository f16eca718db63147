//! Allocator tuning for tape workloads.
//!
//! Every step allocates and frees many multi-megabyte buffers. glibc serves
//! those with fresh `mmap`s by default, so each step pays page faults for
//! memory it just released. Keeping large blocks on the heap avoids that.

use std::sync::Once;

static TUNE: Once = Once::new();

pub(crate) fn tune() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds; it is called
        // once, before this crate allocates any tape buffers.
        unsafe {
            libc::mallopt(libc::M_MMAP_MAX, 0);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
