//! Operation and memory instrumentation.
//!
//! `OpCounters` measures two things across a window of tensor work:
//! scalar multiply-add counts (one multiply plus one add per product term,
//! so a dense `m x k` by `k x n` product contributes `2mkn`) and the peak
//! number of live tracked payload bytes (8 bytes per f64 scalar, allocator
//! overhead excluded).

pub const BYTES_PER_SCALAR: u64 = 8;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub mul_adds: u64,
    pub current_live_bytes: u64,
    pub peak_live_bytes: u64,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add_ops(&mut self, n: u64) {
        self.mul_adds += n;
    }

    #[inline]
    pub fn alloc_bytes(&mut self, n: u64) {
        self.current_live_bytes += n;
        if self.current_live_bytes > self.peak_live_bytes {
            self.peak_live_bytes = self.current_live_bytes;
        }
    }

    #[inline]
    pub fn free_bytes(&mut self, n: u64) {
        debug_assert!(self.current_live_bytes >= n, "freeing more bytes than live");
        self.current_live_bytes = self.current_live_bytes.saturating_sub(n);
    }

    #[inline]
    pub fn alloc_scalars(&mut self, n: u64) {
        self.alloc_bytes(n * BYTES_PER_SCALAR);
    }

    #[inline]
    pub fn free_scalars(&mut self, n: u64) {
        self.free_bytes(n * BYTES_PER_SCALAR);
    }
}
