//! Operation-count and transient-allocation instrumentation.
//!
//! Complexity claims in this crate are validated by counting primitive
//! operations instead of timing wall clocks, so the results are exact,
//! deterministic, and hardware independent. The cost model:
//!
//! - one `compare` per comparison (max candidates, absolute values),
//! - one `add` per accumulation,
//! - one `multiply` per multiplication, division, or unary transcendental
//!   (`sqrt`, `exp` each count as one multiply),
//! - one `move` per element written into a result buffer or into an
//!   intermediate buffer the *method itself* prescribes (e.g. the legacy
//!   pooling baseline's per-rotation slice). Plain reads and loop-local
//!   staging are not tallied.
//!
//! Transient allocation is tracked logically, in bytes of `f64` payload, by
//! the code that creates each buffer: 8 bytes per element of every scratch
//! buffer and every result tensor an instrumented call allocates. This
//! mirrors what a heap profiler would report for the algorithm while staying
//! bit-for-bit reproducible across platforms.

/// Per-invocation tally of primitive operations.
///
/// Returned by value from every instrumented op; never global state, so
/// concurrent invocations cannot interfere.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OpCounter {
    pub compares: u64,
    pub adds: u64,
    pub multiplies: u64,
    pub moves: u64,
}

impl OpCounter {
    pub const ZERO: OpCounter = OpCounter {
        compares: 0,
        adds: 0,
        multiplies: 0,
        moves: 0,
    };

    /// Sum of all four tallies.
    pub fn total(&self) -> u64 {
        self.compares + self.adds + self.multiplies + self.moves
    }

    pub fn is_zero(&self) -> bool {
        self.total() == 0
    }
}

impl core::ops::AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: OpCounter) {
        self.compares += rhs.compares;
        self.adds += rhs.adds;
        self.multiplies += rhs.multiplies;
        self.moves += rhs.moves;
    }
}

impl core::ops::Add for OpCounter {
    type Output = OpCounter;
    fn add(mut self, rhs: OpCounter) -> OpCounter {
        self += rhs;
        self
    }
}

/// Logical allocation tracker: current and peak transient bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AllocTracker {
    pub current_bytes: u64,
    pub peak_bytes: u64,
}

impl AllocTracker {
    /// Record `elements` f64 values coming live.
    pub fn alloc(&mut self, elements: usize) {
        self.current_bytes += 8 * elements as u64;
        if self.current_bytes > self.peak_bytes {
            self.peak_bytes = self.current_bytes;
        }
    }

    /// Record `elements` f64 values being released.
    pub fn free(&mut self, elements: usize) {
        self.current_bytes = self.current_bytes.saturating_sub(8 * elements as u64);
    }
}

/// Bundles the op counter and the allocation tracker for one instrumented
/// invocation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Profiler {
    pub ops: OpCounter,
    pub alloc: AllocTracker,
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_accumulates_and_totals() {
        let mut c = OpCounter::ZERO;
        c += OpCounter {
            compares: 1,
            adds: 2,
            multiplies: 3,
            moves: 4,
        };
        c += OpCounter {
            compares: 1,
            ..OpCounter::ZERO
        };
        assert_eq!(c.compares, 2);
        assert_eq!(c.total(), 11);
        assert!(!c.is_zero());
        assert!(OpCounter::ZERO.is_zero());
    }

    #[test]
    fn alloc_tracker_peak_survives_free() {
        let mut a = AllocTracker::default();
        a.alloc(10);
        a.alloc(5);
        assert_eq!(a.peak_bytes, 120);
        a.free(10);
        assert_eq!(a.current_bytes, 40);
        assert_eq!(a.peak_bytes, 120);
        a.alloc(2);
        assert_eq!(a.peak_bytes, 120);
    }
}
