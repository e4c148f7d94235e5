//! Hybrid logical clocks.
//!
//! A timestamp is the pair `(l, c)`: `l` follows physical time in milliseconds and `c` is a
//! bounded counter that orders events sharing the same `l`. Both halves are packed into one
//! `u64` (48 bits of `l`, 16 bits of `c`) so that integer order equals lexicographic order.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest representable physical component.
pub const MAX_L: u64 = (1 << 48) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HlcError {
    #[error("hlc counter overflow at l={l}: clock skew too large for a 16-bit counter")]
    CounterOverflow { l: u64 },
    #[error("physical time {0} ms does not fit in 48 bits")]
    PhysicalOutOfRange(u64),
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HlcTimestamp {
    pub l: u64,
    pub c: u16,
}

impl HlcTimestamp {
    pub const ZERO: HlcTimestamp = HlcTimestamp { l: 0, c: 0 };

    pub fn new(l: u64, c: u16) -> Self {
        debug_assert!(l <= MAX_L);
        HlcTimestamp { l, c }
    }

    pub fn pack(self) -> u64 {
        (self.l << 16) | self.c as u64
    }

    pub fn from_packed(v: u64) -> Self {
        HlcTimestamp {
            l: v >> 16,
            c: (v & 0xffff) as u16,
        }
    }

    pub fn is_zero(self) -> bool {
        self == Self::ZERO
    }
}

impl Ord for HlcTimestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.pack().cmp(&other.pack())
    }
}

impl PartialOrd for HlcTimestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for HlcTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.l, self.c)
    }
}

impl fmt::Display for HlcTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.l, self.c)
    }
}

/// Lexicographic comparison on `(l, c)`.
pub fn compare(a: HlcTimestamp, b: HlcTimestamp) -> Ordering {
    a.cmp(&b)
}

/// The clock state of one node.
#[derive(Debug, Clone, Default)]
pub struct HlcClock {
    current: HlcTimestamp,
}

impl HlcClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_state(current: HlcTimestamp) -> Self {
        HlcClock { current }
    }

    pub fn current(&self) -> HlcTimestamp {
        self.current
    }

    /// Local event: a merge with the zero timestamp.
    pub fn advance_local(&mut self, pc: u64) -> Result<HlcTimestamp, HlcError> {
        self.merge(HlcTimestamp::ZERO, pc)
    }

    /// Folds a received timestamp and the physical clock into the state and returns the new
    /// state, which is strictly greater than both the previous state and `t`.
    pub fn merge(&mut self, t: HlcTimestamp, pc: u64) -> Result<HlcTimestamp, HlcError> {
        if pc > MAX_L {
            return Err(HlcError::PhysicalOutOfRange(pc));
        }
        let prev = self.current;
        let l = prev.l.max(pc).max(t.l);
        let c: u32 = if l == prev.l && l == t.l {
            prev.c.max(t.c) as u32 + 1
        } else if l == prev.l {
            prev.c as u32 + 1
        } else if l == t.l {
            t.c as u32 + 1
        } else {
            0
        };
        if c > u16::MAX as u32 {
            return Err(HlcError::CounterOverflow { l });
        }
        self.current = HlcTimestamp { l, c: c as u16 };
        Ok(self.current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(l: u64, c: u16) -> HlcTimestamp {
        HlcTimestamp::new(l, c)
    }

    /// Independent oracle: the smallest timestamp above both the clock state and `t` whose
    /// physical part is at least `pc`, found by enumeration.
    fn oracle_merge(cur: HlcTimestamp, t: HlcTimestamp, pc: u64) -> HlcTimestamp {
        let lo = cur.max(t);
        let c_hi = cur.c.max(t.c) + 2;
        for l in 0..=(lo.l.max(pc) + 1) {
            for c in 0..=c_hi {
                let cand = ts(l, c);
                if cand > lo && l >= pc {
                    return cand;
                }
            }
        }
        unreachable!()
    }

    #[test]
    fn advance_local_examples() {
        let mut clk = HlcClock::with_state(ts(10, 3));
        assert_eq!(clk.advance_local(5).unwrap(), ts(10, 4));
        assert_eq!(oracle_merge(ts(10, 3), HlcTimestamp::ZERO, 5), ts(10, 4));

        let mut clk = HlcClock::with_state(ts(10, 3));
        assert_eq!(clk.advance_local(20).unwrap(), ts(20, 0));
        assert_eq!(oracle_merge(ts(10, 3), HlcTimestamp::ZERO, 20), ts(20, 0));

        let mut clk = HlcClock::new();
        assert_eq!(clk.advance_local(0).unwrap(), ts(0, 1));
    }

    #[test]
    fn merge_examples() {
        let cases = [
            (ts(10, 4), ts(10, 2), 5, ts(10, 5)),
            (ts(10, 7), ts(0, 0), 20, ts(20, 0)),
            (ts(5, 1), ts(9, 6), 3, ts(9, 7)),
            // PUT stamping cases
            (ts(95, 1), ts(100, 2), 90, ts(100, 3)),
            (ts(40, 0), ts(0, 0), 50, ts(50, 0)),
        ];
        for (cur, t, pc, want) in cases {
            assert_eq!(oracle_merge(cur, t, pc), want, "oracle {cur} {t} {pc}");
            let mut clk = HlcClock::with_state(cur);
            assert_eq!(clk.merge(t, pc).unwrap(), want, "impl {cur} {t} {pc}");
        }
    }

    #[test]
    fn compare_examples() {
        assert_eq!(compare(ts(5, 0), ts(5, 0)), Ordering::Equal);
        assert_eq!(compare(ts(5, 9), ts(6, 0)), Ordering::Less);
        assert_eq!(compare(ts(5, 1), ts(5, 2)), Ordering::Less);
        assert!(HlcTimestamp::ZERO <= ts(0, 0));
    }

    #[test]
    fn counter_overflow_is_an_error() {
        let mut clk = HlcClock::with_state(ts(7, u16::MAX));
        assert_eq!(clk.advance_local(1), Err(HlcError::CounterOverflow { l: 7 }));
        let mut clk = HlcClock::new();
        assert_eq!(clk.merge(ts(3, u16::MAX), 0), Err(HlcError::CounterOverflow { l: 3 }));
        assert!(matches!(
            HlcClock::new().advance_local(MAX_L + 1),
            Err(HlcError::PhysicalOutOfRange(_))
        ));
    }

    proptest! {
        #[test]
        fn merge_matches_enumeration(
            cl in 0u64..40, cc in 0u16..6, tl in 0u64..40, tc in 0u16..6, pc in 0u64..40
        ) {
            let mut clk = HlcClock::with_state(ts(cl, cc));
            let got = clk.merge(ts(tl, tc), pc).unwrap();
            prop_assert_eq!(got, oracle_merge(ts(cl, cc), ts(tl, tc), pc));
        }

        #[test]
        fn packing_preserves_order(a in 0u64..MAX_L, ac: u16, b in 0u64..MAX_L, bc: u16) {
            let (x, y) = (ts(a, ac), ts(b, bc));
            prop_assert_eq!(x.cmp(&y), (a, ac).cmp(&(b, bc)));
            prop_assert_eq!(HlcTimestamp::from_packed(x.pack()), x);
        }

        #[test]
        fn strictly_increasing_under_any_interleaving(
            ops in proptest::collection::vec((any::<bool>(), 0u64..500, 0u64..500, 0u16..20), 1..200)
        ) {
            let mut clk = HlcClock::new();
            let mut prev = clk.current();
            let mut max_pc = 0;
            let mut max_seen_l = 0;
            for (local, pc, tl, tc) in ops {
                max_pc = max_pc.max(pc);
                let out = if local {
                    clk.advance_local(pc).unwrap()
                } else {
                    max_seen_l = max_seen_l.max(tl);
                    let t = ts(tl, tc);
                    let out = clk.merge(t, pc).unwrap();
                    prop_assert!(out > t);
                    out
                };
                prop_assert!(out > prev);
                prop_assert!(out.l >= pc);
                prop_assert!(out.l <= max_pc.max(max_seen_l));
                prev = out;
            }
        }

        #[test]
        fn happens_before_across_clocks(
            steps in proptest::collection::vec((0usize..4, 0usize..4, 0u64..30), 1..150)
        ) {
            // Random message DAG over four clocks sharing one global physical timeline.
            let mut clocks = vec![HlcClock::new(); 4];
            let mut now = 0;
            for (from, to, dt) in steps {
                now += dt;
                let sent = clocks[from].advance_local(now).unwrap();
                let recv = clocks[to].merge(sent, now).unwrap();
                prop_assert!(recv > sent);
            }
        }
    }
}
