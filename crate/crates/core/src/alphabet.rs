//! The odd-integer constraint set `{-2M-1, ..., -1, +1, ..., 2M+1}` and the
//! boundary/shift bookkeeping the decomposed detectors are built on.
//!
//! Symbols are indexed in ascending order. Index `i` holds the symbol
//! `2i - 2M - 1`, and the decision boundary directly above index `i`
//! (between symbols `2i - 2M - 1` and `2i - 2M + 1`) carries the shift
//! multiplier `m = M - i`. Every index/symbol/shift conversion in the crate
//! goes through this module.

use serde::{Deserialize, Serialize};

/// Alphabet of `2M + 2` odd integers spaced by two and symmetric about zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "u32", into = "u32")]
pub struct IntegerAlphabet {
    m_half: u32,
}

impl From<u32> for IntegerAlphabet {
    fn from(m_half: u32) -> Self {
        Self { m_half }
    }
}

impl From<IntegerAlphabet> for u32 {
    fn from(a: IntegerAlphabet) -> Self {
        a.m_half
    }
}

impl IntegerAlphabet {
    pub fn from_m(m_half: u32) -> Self {
        Self { m_half }
    }

    /// The binary alphabet `{-1, +1}`.
    pub fn binary() -> Self {
        Self { m_half: 0 }
    }

    pub fn m_half(&self) -> u32 {
        self.m_half
    }

    /// Number of symbols, `2M + 2`.
    pub fn len(&self) -> usize {
        2 * self.m_half as usize + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of decision boundaries between adjacent symbols, `2M + 1`.
    pub fn boundary_count(&self) -> usize {
        2 * self.m_half as usize + 1
    }

    /// Symbol at ascending index `i`. Panics if `i` is out of range.
    pub fn symbol(&self, i: usize) -> i32 {
        assert!(i < self.len(), "symbol index {i} out of range");
        2 * i as i32 - 2 * self.m_half as i32 - 1
    }

    pub fn symbols(&self) -> Vec<i32> {
        (0..self.len()).map(|i| self.symbol(i)).collect()
    }

    pub fn min_symbol(&self) -> i32 {
        -(2 * self.m_half as i32) - 1
    }

    pub fn max_symbol(&self) -> i32 {
        2 * self.m_half as i32 + 1
    }

    pub fn index_of(&self, symbol: i32) -> Option<usize> {
        if symbol % 2 == 0 || symbol < self.min_symbol() || symbol > self.max_symbol() {
            return None;
        }
        Some(((symbol - self.min_symbol()) / 2) as usize)
    }

    pub fn contains(&self, symbol: i32) -> bool {
        self.index_of(symbol).is_some()
    }

    /// Shift multipliers `-M, ..., +M`, one per boundary, ascending.
    pub fn boundary_shifts(&self) -> Vec<i32> {
        let m = self.m_half as i32;
        (-m..=m).collect()
    }

    /// Shift multiplier of the boundary directly above symbol index `lower`.
    pub fn shift_above(&self, lower: usize) -> i32 {
        assert!(lower < self.boundary_count(), "no boundary above index {lower}");
        self.m_half as i32 - lower as i32
    }

    /// `(upper, lower)` symbols separated by the boundary with shift `m`:
    /// `(-2m + 1, -2m - 1)`.
    pub fn boundary_pair(&self, m: i32) -> Option<(i32, i32)> {
        if m.unsigned_abs() > self.m_half {
            return None;
        }
        Some((-2 * m + 1, -2 * m - 1))
    }

    /// Mean of the squared symbols, i.e. `E[x^2]` under the uniform prior.
    pub fn mean_square(&self) -> f64 {
        let s: f64 = (0..self.len()).map(|i| (self.symbol(i) as f64).powi(2)).sum();
        s / self.len() as f64
    }

    /// Size of `A^n` as a float, for search-space guards.
    pub fn space_size(&self, n: usize) -> f64 {
        (self.len() as f64).powi(n as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_alphabets() {
        assert_eq!(IntegerAlphabet::from_m(0).symbols(), vec![-1, 1]);
        assert_eq!(IntegerAlphabet::from_m(1).symbols(), vec![-3, -1, 1, 3]);
        assert_eq!(IntegerAlphabet::from_m(2).symbols(), vec![-5, -3, -1, 1, 3, 5]);
    }

    #[test]
    fn shifts() {
        assert_eq!(IntegerAlphabet::from_m(0).boundary_shifts(), vec![0]);
        assert_eq!(IntegerAlphabet::from_m(1).boundary_shifts(), vec![-1, 0, 1]);
        assert_eq!(IntegerAlphabet::from_m(2).boundary_shifts(), vec![-2, -1, 0, 1, 2]);
    }

    #[test]
    fn index_lookup_rejects_outsiders() {
        let a = IntegerAlphabet::from_m(1);
        assert_eq!(a.index_of(-3), Some(0));
        assert_eq!(a.index_of(3), Some(3));
        assert_eq!(a.index_of(0), None);
        assert_eq!(a.index_of(5), None);
        assert_eq!(a.index_of(-5), None);
        assert_eq!(a.boundary_pair(2), None);
    }

    #[test]
    fn mean_square_of_four_level() {
        assert_eq!(IntegerAlphabet::from_m(1).mean_square(), 5.0);
        assert_eq!(IntegerAlphabet::binary().mean_square(), 1.0);
    }

    #[test]
    fn serializes_as_bare_integer() {
        let a = IntegerAlphabet::from_m(3);
        assert_eq!(serde_json::to_string(&a).unwrap(), "3");
        let b: IntegerAlphabet = serde_json::from_str("3").unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn structure_invariants(m in 0u32..40) {
            let a = IntegerAlphabet::from_m(m);
            let s = a.symbols();
            prop_assert_eq!(s.len(), 2 * m as usize + 2);
            prop_assert_eq!(a.boundary_count(), s.len() - 1);
            for w in s.windows(2) {
                prop_assert_eq!(w[1] - w[0], 2);
            }
            for i in 0..s.len() {
                prop_assert_eq!(s[i], -s[s.len() - 1 - i]);
                prop_assert_eq!(a.index_of(s[i]), Some(i));
            }
            for (lower, &shift) in a.boundary_shifts().iter().rev().enumerate() {
                let (up, lo) = a.boundary_pair(shift).unwrap();
                prop_assert_eq!(a.shift_above(lower), shift);
                prop_assert_eq!(lo, s[lower]);
                prop_assert_eq!(up, s[lower + 1]);
            }
        }
    }
}
