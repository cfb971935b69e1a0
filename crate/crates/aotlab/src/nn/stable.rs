//! Order-insensitive floating-point reductions.
//!
//! Several invariants in this crate are exact statements about permutations
//! of tokens or temporal slices (mirror equivariance, full-pooling
//! invariance, Q-Former grid-token invariance). Plain left-to-right f64
//! summation breaks them at the last bit because float addition is not
//! associative. Reductions over permutable axes therefore sum in a canonical
//! order: sort the addends by `total_cmp`, then accumulate. Identical
//! multisets of addends produce bit-identical sums.

/// Sum `xs` in a canonical order. The buffer is consumed scratch space.
pub fn stable_sum(xs: &mut Vec<f64>) -> f64 {
    xs.sort_unstable_by(|a, b| a.total_cmp(b));
    xs.iter().sum()
}

/// Mean of `xs` via [`stable_sum`].
pub fn stable_mean(xs: &mut Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    stable_sum(xs) / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_gives_bit_identical_sum() {
        let base = vec![1.0e-16, 3.7, -2.2, 1.0e16, 0.1, -1.0e16, 5.5e-8];
        let mut a = base.clone();
        let mut b = base;
        b.reverse();
        b.swap(1, 3);
        let sa = stable_sum(&mut a);
        let sb = stable_sum(&mut b);
        assert_eq!(sa.to_bits(), sb.to_bits());
    }

    #[test]
    fn empty_mean_is_zero() {
        assert_eq!(stable_mean(&mut Vec::new()), 0.0);
    }
}
