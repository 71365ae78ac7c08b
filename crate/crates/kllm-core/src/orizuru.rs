//! Two-fold complete-binary-tree engine for top-k largest and smallest
//! selection with full comparison accounting.
//!
//! Two tournament trees share one leaf array: a max tree and a min tree, each
//! with its own per-internal-node direction bits and per-leaf availability
//! mask. Internal nodes are numbered 1..N in heap order (node `i` has children
//! `2i` and `2i+1`); leaf `j` sits at heap slot `N + j`. Popping follows
//! direction bits from the root (no comparisons), clears the mask bit, and
//! repairs the popped leaf's ancestors bottom-up with one comparison per
//! level. Leaf values are never modified; unavailable leaves act as -inf in
//! the max tree and +inf in the min tree during repairs.
//!
//! Building the max tree costs `N - 1` comparisons. The min tree reuses the
//! reversed leaf-level comparison results and pays only for its upper levels,
//! `N/2 - 1` comparisons, so a full build costs `1.5 N - 2`. Popping k maxima
//! and k minima stays within the `1.5 N + 2 k log2(N)` budget.

use crate::error::{Error, Result};
use std::cmp::Ordering;

/// Tournament-tree state over one activation token.
#[derive(Debug, Clone)]
pub struct TwoFoldTree {
    n_pad: usize,
    n_orig: usize,
    leaves: Vec<f64>,
    /// Direction bits for internal nodes 1..n_pad; false = left, true = right.
    /// Ties prefer the left child at every level.
    max_bits: Vec<bool>,
    min_bits: Vec<bool>,
    max_mask: Vec<bool>,
    min_mask: Vec<bool>,
    max_available: usize,
    min_available: usize,
    comparisons: u64,
    init_max_comparisons: u64,
    init_min_comparisons: u64,
}

/// Result of a combined top-k extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKExtremes {
    pub maxima: Vec<(usize, f64)>,
    pub minima: Vec<(usize, f64)>,
    pub comparisons_used: u64,
}

impl TwoFoldTree {
    /// Build both trees over `x`. Non-power-of-two inputs are padded to the
    /// next power of two (minimum 2) with sentinel slots excluded from both
    /// masks, and the comparison budget is counted on the padded size.
    pub fn build(x: &[f64]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n_orig = x.len();
        let n_pad = n_orig.next_power_of_two().max(2);

        let mut leaves = vec![0.0; n_pad];
        leaves[..n_orig].copy_from_slice(x);
        let mut mask = vec![false; n_pad];
        mask[..n_orig].fill(true);

        let mut t = Self {
            n_pad,
            n_orig,
            leaves,
            max_bits: vec![false; n_pad],
            min_bits: vec![false; n_pad],
            max_mask: mask.clone(),
            min_mask: mask,
            max_available: n_orig,
            min_available: n_orig,
            comparisons: 0,
            init_max_comparisons: 0,
            init_min_comparisons: 0,
        };

        // Max tree, leaf level: one charged comparison per parent. The
        // three-way results feed the min tree's leaf level for free.
        let mut leaf_orderings = vec![Ordering::Equal; n_pad / 2];
        for i in n_pad / 2..n_pad {
            let l = t.eff_max(2 * i - n_pad);
            let r = t.eff_max(2 * i + 1 - n_pad);
            let ord = l.partial_cmp(&r).expect("finite leaves");
            leaf_orderings[i - n_pad / 2] = ord;
            t.max_bits[i] = ord == Ordering::Less;
            t.comparisons += 1;
        }
        // Max tree, upper levels.
        for i in (1..n_pad / 2).rev() {
            let l = t.eff_max(t.selected_leaf(&t.max_bits, 2 * i));
            let r = t.eff_max(t.selected_leaf(&t.max_bits, 2 * i + 1));
            t.max_bits[i] = l < r;
            t.comparisons += 1;
        }
        t.init_max_comparisons = t.comparisons;
        debug_assert_eq!(t.init_max_comparisons, n_pad as u64 - 1);

        // Min tree, leaf level: reversed comparison results, no charges.
        // Sentinel slots are resolved by mask logic, not the comparator.
        for i in n_pad / 2..n_pad {
            let li = 2 * i - n_pad;
            let ri = 2 * i + 1 - n_pad;
            t.min_bits[i] = match (t.min_mask[li], t.min_mask[ri]) {
                (true, true) => leaf_orderings[i - n_pad / 2] == Ordering::Greater,
                (true, false) => false,
                (false, true) => true,
                (false, false) => false,
            };
        }
        // Min tree, upper levels: charged.
        for i in (1..n_pad / 2).rev() {
            let l = t.eff_min(t.selected_leaf(&t.min_bits, 2 * i));
            let r = t.eff_min(t.selected_leaf(&t.min_bits, 2 * i + 1));
            t.min_bits[i] = r < l;
            t.comparisons += 1;
        }
        t.init_min_comparisons = t.comparisons - t.init_max_comparisons;
        debug_assert_eq!(t.init_min_comparisons, n_pad as u64 / 2 - 1);

        Ok(t)
    }

    pub fn padded_len(&self) -> usize {
        self.n_pad
    }

    pub fn original_len(&self) -> usize {
        self.n_orig
    }

    /// Total charged comparisons so far.
    pub fn comparisons(&self) -> u64 {
        self.comparisons
    }

    pub fn init_max_comparisons(&self) -> u64 {
        self.init_max_comparisons
    }

    pub fn init_min_comparisons(&self) -> u64 {
        self.init_min_comparisons
    }

    fn eff_max(&self, leaf: usize) -> f64 {
        if self.max_mask[leaf] {
            self.leaves[leaf]
        } else {
            f64::NEG_INFINITY
        }
    }

    fn eff_min(&self, leaf: usize) -> f64 {
        if self.min_mask[leaf] {
            self.leaves[leaf]
        } else {
            f64::INFINITY
        }
    }

    /// Follow direction bits from `node` down to a leaf index. Bit-following
    /// only; never charged.
    fn selected_leaf(&self, bits: &[bool], mut node: usize) -> usize {
        while node < self.n_pad {
            node = 2 * node + bits[node] as usize;
        }
        node - self.n_pad
    }

    /// Current maximum among available leaves, without popping. Free of
    /// comparator charges.
    pub fn peek_max(&self) -> Result<(usize, f64)> {
        if self.max_available == 0 {
            return Err(Error::EmptyPop);
        }
        let leaf = self.selected_leaf(&self.max_bits, 1);
        Ok((leaf, self.leaves[leaf]))
    }

    /// Current minimum among available leaves, without popping.
    pub fn peek_min(&self) -> Result<(usize, f64)> {
        if self.min_available == 0 {
            return Err(Error::EmptyPop);
        }
        let leaf = self.selected_leaf(&self.min_bits, 1);
        Ok((leaf, self.leaves[leaf]))
    }

    /// Pop the maximum: traversal is free, then the popped leaf's ancestors
    /// are repaired bottom-up at one comparison per level (log2 N total).
    pub fn pop_max(&mut self) -> Result<(usize, f64)> {
        let (leaf, value) = self.peek_max()?;
        self.max_mask[leaf] = false;
        self.max_available -= 1;
        let mut node = (self.n_pad + leaf) / 2;
        while node >= 1 {
            let l = self.eff_max(self.selected_leaf(&self.max_bits, 2 * node));
            let r = self.eff_max(self.selected_leaf(&self.max_bits, 2 * node + 1));
            self.max_bits[node] = l < r;
            self.comparisons += 1;
            node /= 2;
        }
        Ok((leaf, value))
    }

    /// Pop the minimum; mirror of [`pop_max`](Self::pop_max).
    pub fn pop_min(&mut self) -> Result<(usize, f64)> {
        let (leaf, value) = self.peek_min()?;
        self.min_mask[leaf] = false;
        self.min_available -= 1;
        let mut node = (self.n_pad + leaf) / 2;
        while node >= 1 {
            let l = self.eff_min(self.selected_leaf(&self.min_bits, 2 * node));
            let r = self.eff_min(self.selected_leaf(&self.min_bits, 2 * node + 1));
            self.min_bits[node] = r < l;
            self.comparisons += 1;
            node /= 2;
        }
        Ok((leaf, value))
    }

    /// Upper bound on comparisons for a build plus k max-pops and k min-pops,
    /// on the padded size.
    pub fn comparison_budget(n_pad: usize, k: usize) -> u64 {
        (3 * n_pad as u64).div_ceil(2) + 2 * k as u64 * n_pad.trailing_zeros() as u64
    }
}

/// Pop the k largest and k smallest elements of `x` with one tree build,
/// reporting the exact number of comparisons charged.
pub fn top_k_extremes(x: &[f64], k: usize) -> Result<TopKExtremes> {
    if 2 * k > x.len() {
        return Err(Error::KTooLarge { k, n: x.len() });
    }
    let mut tree = TwoFoldTree::build(x)?;
    let mut maxima = Vec::with_capacity(k);
    let mut minima = Vec::with_capacity(k);
    for _ in 0..k {
        maxima.push(tree.pop_max()?);
    }
    for _ in 0..k {
        minima.push(tree.pop_min()?);
    }
    let comparisons_used = tree.comparisons();
    debug_assert!(comparisons_used <= TwoFoldTree::comparison_budget(tree.padded_len(), k));
    Ok(TopKExtremes {
        maxima,
        minima,
        comparisons_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::sort_topk;

    #[test]
    fn build_of_eight_charges_ten() {
        let t = TwoFoldTree::build(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0]).unwrap();
        assert_eq!(t.comparisons(), 10);
        assert_eq!(t.init_max_comparisons(), 7);
        assert_eq!(t.init_min_comparisons(), 3);
    }

    #[test]
    fn all_equal_prefers_leaf_zero_on_both_trees() {
        let t = TwoFoldTree::build(&[4.0; 8]).unwrap();
        assert_eq!(t.peek_max().unwrap(), (0, 4.0));
        assert_eq!(t.peek_min().unwrap(), (0, 4.0));
    }

    #[test]
    fn padding_sentinels_never_popped() {
        let x = [2.0, -7.0, 4.0, 0.5, 1.0];
        let mut t = TwoFoldTree::build(&x).unwrap();
        assert_eq!(t.padded_len(), 8);
        for _ in 0..x.len() {
            let (p, _) = t.pop_max().unwrap();
            assert!(p < x.len());
        }
        assert!(matches!(t.pop_max(), Err(Error::EmptyPop)));
        let mut t = TwoFoldTree::build(&x).unwrap();
        for _ in 0..x.len() {
            let (p, _) = t.pop_min().unwrap();
            assert!(p < x.len());
        }
        assert!(matches!(t.pop_min(), Err(Error::EmptyPop)));
    }

    #[test]
    fn traversal_reaches_heap_node_fourteen() {
        // maximum 9 at leaf position 6, i.e. heap slot 8 + 6 = 14; the
        // root-to-leaf direction bits read "110" and the leaf prefix adds "1"
        let x = [3.0, 1.0, 4.0, 1.0, 5.0, 2.0, 9.0, 6.0];
        let t = TwoFoldTree::build(&x).unwrap();
        let (pos, val) = t.peek_max().unwrap();
        assert_eq!((pos, val), (6, 9.0));
        let b1 = t.max_bits[1] as usize;
        let b2 = t.max_bits[2 + b1] as usize;
        let b3 = t.max_bits[2 * (2 + b1) + b2] as usize;
        assert_eq!((b1, b2, b3), (1, 1, 0));
        let heap_slot = ((((1 << 1) | b1) << 1 | b2) << 1) | b3;
        assert_eq!(heap_slot, 14);
    }

    #[test]
    fn emptied_subtree_reports_neg_infinity_upward() {
        // pop both leaves under one parent; the parent's side of the tree
        // must redirect to the other subtree
        let x = [1.0, 2.0, 8.0, 9.0];
        let mut t = TwoFoldTree::build(&x).unwrap();
        assert_eq!(t.pop_max().unwrap(), (3, 9.0));
        assert_eq!(t.pop_max().unwrap(), (2, 8.0));
        // node 3 (leaves 2,3) is empty now; root must point left
        assert!(!t.max_bits[1]);
        assert_eq!(t.pop_max().unwrap(), (1, 2.0));
        assert_eq!(t.pop_max().unwrap(), (0, 1.0));
    }

    #[test]
    fn pops_match_descending_sort_with_stable_positions() {
        let mut state = 0xfeedu64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) % 64) as f64 / 4.0 - 8.0 // plenty of duplicates
        };
        for n in [8usize, 13, 32, 100] {
            let x: Vec<f64> = (0..n).map(|_| next()).collect();
            let k = n / 2;
            let mut t = TwoFoldTree::build(&x).unwrap();
            let (expect_max, expect_min) = sort_topk(&x, k).unwrap();
            for step in 0..k {
                assert_eq!(t.pop_max().unwrap(), expect_max[step], "n={n} step={step}");
            }
            let mut t = TwoFoldTree::build(&x).unwrap();
            for step in 0..k {
                assert_eq!(t.pop_min().unwrap(), expect_min[step], "n={n} step={step}");
            }
        }
    }

    #[test]
    fn instrumented_count_for_n8_k2_is_22() {
        let x = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let r = top_k_extremes(&x, 2).unwrap();
        assert_eq!(r.comparisons_used, 22); // 10 init + 4 pops * 3 levels
        assert!(r.comparisons_used <= TwoFoldTree::comparison_budget(8, 2));
        assert_eq!(TwoFoldTree::comparison_budget(8, 2), 24);
    }

    #[test]
    fn zero_k_is_build_only() {
        let r = top_k_extremes(&[5.0, 1.0, 2.0, 7.0, 0.0, 3.0, 4.0, 6.0], 0).unwrap();
        assert!(r.maxima.is_empty());
        assert!(r.minima.is_empty());
        assert_eq!(r.comparisons_used, 10); // 1.5 * 8 - 2
    }

    #[test]
    fn k_too_large_rejected() {
        assert!(matches!(
            top_k_extremes(&[1.0, 2.0, 3.0], 2),
            Err(Error::KTooLarge { k: 2, n: 3 })
        ));
    }

    #[test]
    fn peek_is_free_and_pop_charges_at_most_log2() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64).collect();
        let mut t = TwoFoldTree::build(&x).unwrap();
        let before = t.comparisons();
        let peeked = t.peek_max().unwrap();
        assert_eq!(t.comparisons(), before);
        let popped = t.pop_max().unwrap();
        assert_eq!(peeked, popped);
        assert!(t.comparisons() - before <= 6);
        let before = t.comparisons();
        t.peek_min().unwrap();
        assert_eq!(t.comparisons(), before);
    }

    #[test]
    fn max_and_min_sets_may_overlap_only_past_distinct_supply() {
        // two elements, k=1: max set and min set are disjoint positions only
        // when values differ; callers take the union either way
        let r = top_k_extremes(&[5.0, 5.0], 1).unwrap();
        assert_eq!(r.maxima, vec![(0, 5.0)]);
        assert_eq!(r.minima, vec![(0, 5.0)]);
    }

    #[test]
    fn leaf_storage_unchanged_by_pops() {
        let x = [9.0, -3.0, 14.0, 2.0];
        let mut t = TwoFoldTree::build(&x).unwrap();
        t.pop_max().unwrap();
        t.pop_min().unwrap();
        assert_eq!(&t.leaves[..4], &x);
    }
}
