//! Sparse parameter-derivative vectors.
//!
//! A perturbation of one GREEN threshold only reaches the queues it can
//! propagate to through joins, so most derivative vectors carry a handful of
//! nonzero entries regardless of the artery length.

use std::fmt;

/// Sorted `(parameter index, value)` pairs; absent entries are zero.
#[derive(Clone, Default, PartialEq)]
pub struct SparseGrad {
    entries: Vec<(u32, f64)>,
}

impl SparseGrad {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn unit(i: usize) -> Self {
        Self {
            entries: vec![(i as u32, 1.0)],
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        match self.entries.binary_search_by_key(&(i as u32), |e| e.0) {
            Ok(k) => self.entries[k].1,
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|&(i, v)| (i as usize, v))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn add_unit(&mut self, i: usize, value: f64) {
        match self.entries.binary_search_by_key(&(i as u32), |e| e.0) {
            Ok(k) => self.entries[k].1 += value,
            Err(k) => self.entries.insert(k, (i as u32, value)),
        }
    }

    /// `self += c * other`, merging the two sorted index lists.
    pub fn add_scaled(&mut self, other: &SparseGrad, c: f64) {
        if c == 0.0 || other.is_zero() {
            return;
        }
        if self.is_zero() {
            self.entries.extend(other.entries.iter().map(|&(i, v)| (i, c * v)));
            return;
        }
        let mut merged = Vec::with_capacity(self.entries.len() + other.entries.len());
        let (mut a, mut b) = (0, 0);
        while a < self.entries.len() && b < other.entries.len() {
            let (ia, va) = self.entries[a];
            let (ib, vb) = other.entries[b];
            if ia < ib {
                merged.push((ia, va));
                a += 1;
            } else if ib < ia {
                merged.push((ib, c * vb));
                b += 1;
            } else {
                merged.push((ia, va + c * vb));
                a += 1;
                b += 1;
            }
        }
        merged.extend_from_slice(&self.entries[a..]);
        merged.extend(other.entries[b..].iter().map(|&(i, v)| (i, c * v)));
        self.entries = merged;
    }

    pub fn scaled(&self, c: f64) -> SparseGrad {
        if c == 0.0 {
            return SparseGrad::zero();
        }
        SparseGrad {
            entries: self.entries.iter().map(|&(i, v)| (i, c * v)).collect(),
        }
    }

    /// `c * self` added into a dense vector.
    pub fn add_to_dense(&self, dense: &mut [f64], c: f64) {
        for &(i, v) in &self.entries {
            dense[i as usize] += c * v;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.add_to_dense(&mut out, 1.0);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.1.abs()))
    }
}

impl fmt::Debug for SparseGrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.entries.iter().map(|(i, v)| (i, v))).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_and_get() {
        let mut g = SparseGrad::unit(3);
        g.add_unit(1, 2.0);
        g.add_unit(3, 0.5);
        assert_eq!(g.get(3), 1.5);
        assert_eq!(g.get(1), 2.0);
        assert_eq!(g.get(0), 0.0);
        assert_eq!(g.to_dense(5), vec![0.0, 2.0, 0.0, 1.5, 0.0]);
    }

    proptest! {
        #[test]
        fn add_scaled_matches_dense(
            a in proptest::collection::vec(-3.0f64..3.0, 8),
            b in proptest::collection::vec(-3.0f64..3.0, 8),
            mask_a in proptest::collection::vec(any::<bool>(), 8),
            mask_b in proptest::collection::vec(any::<bool>(), 8),
            c in -2.0f64..2.0,
        ) {
            let da: Vec<f64> = a.iter().zip(&mask_a).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
            let db: Vec<f64> = b.iter().zip(&mask_b).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
            let mut s = SparseGrad::from_dense(&da);
            s.add_scaled(&SparseGrad::from_dense(&db), c);
            let dense = s.to_dense(8);
            for i in 0..8 {
                prop_assert!((dense[i] - (da[i] + c * db[i])).abs() < 1e-12);
            }
        }
    }
}
