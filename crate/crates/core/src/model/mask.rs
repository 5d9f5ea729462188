use alloc::vec;
use alloc::vec::Vec;

/// Additive value for disallowed attention. Finite, and large enough that
/// the softmax weight underflows to exactly zero.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    Bidirectional,
    Causal,
    /// Bidirectional among the first `n` positions, causal afterwards.
    PrefixCausal(usize),
}

impl AttentionMask {
    /// Whether query `q` may attend to current-segment key `k`. Memory keys
    /// are always visible.
    pub fn allows(self, q: usize, k: usize) -> bool {
        match self {
            AttentionMask::Bidirectional => true,
            AttentionMask::Causal => k <= q,
            AttentionMask::PrefixCausal(n) => k <= q || k < n,
        }
    }

    pub fn is_bidirectional(self) -> bool {
        matches!(self, AttentionMask::Bidirectional)
    }

    /// Additive mask of shape `[queries, memory + queries]`, row-major.
    pub fn additive(self, queries: usize, memory: usize) -> Vec<f64> {
        let keys = memory + queries;
        let mut out = vec![0.0; queries * keys];
        for q in 0..queries {
            for k in 0..queries {
                if !self.allows(q, k) {
                    out[q * keys + memory + k] = MASKED;
                }
            }
        }
        out
    }
}
