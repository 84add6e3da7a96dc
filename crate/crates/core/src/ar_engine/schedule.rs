use crate::error::{invalid, Result};

/// Tokens still masked before iteration `k` (of `iters`) out of `total`:
/// `ceil(total · cos(π/2 · k/iters))`, with the endpoints exact.
pub fn cosine_remaining(k: usize, iters: usize, total: usize) -> usize {
    if k == 0 {
        return total;
    }
    if k >= iters {
        return 0;
    }
    let x = total as f64 * (std::f64::consts::FRAC_PI_2 * k as f64 / iters as f64).cos();
    // guard against x landing a hair above an integer
    ((x - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Per-iteration generation counts of the ceil-cosine schedule. Zero-count
/// iterations are dropped, so the result has at most `iters` entries; the
/// counts always sum to `total`.
pub fn cosine_plan(iters: usize, total: usize) -> Result<Vec<usize>> {
    if iters == 0 || iters > total {
        return invalid(format!("cosine plan needs 1 ≤ K ≤ T, got K={iters}, T={total}"));
    }
    Ok((1..=iters)
        .map(|k| cosine_remaining(k - 1, iters, total) - cosine_remaining(k, iters, total))
        .filter(|&c| c > 0)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(cosine_plan(1, 9).unwrap(), vec![9]);
        let r: Vec<usize> = (0..=4).map(|k| cosine_remaining(k, 4, 16)).collect();
        assert_eq!(r, vec![16, 15, 12, 7, 0]);
        assert_eq!(cosine_plan(4, 16).unwrap(), vec![1, 3, 5, 7]);
        let p = cosine_plan(16, 16).unwrap();
        assert_eq!(p.iter().sum::<usize>(), 16);
        assert!(*p.last().unwrap() > 0);
        assert!(cosine_plan(5, 4).is_err());
        assert!(cosine_plan(0, 4).is_err());
    }

    #[test]
    fn exact_integer_products_are_not_bumped() {
        // cos(π/3) = 0.5 is not exact in floating point; 6·0.5 must stay 3.
        assert_eq!(cosine_remaining(2, 3, 6), 3);
    }

    proptest! {
        #[test]
        fn conserves_tokens(t in 1usize..4096, frac in 0.0f64..1.0) {
            let k = ((frac * t as f64) as usize).clamp(1, t);
            let p = cosine_plan(k, t).unwrap();
            prop_assert_eq!(p.iter().sum::<usize>(), t);
            prop_assert!(p.len() <= k);
            let mut prev = t;
            for i in 0..=k {
                let r = cosine_remaining(i, k, t);
                prop_assert!(r <= prev);
                prev = r;
            }
        }
    }
}
