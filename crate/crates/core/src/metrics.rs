//! Positioning and channel-estimation error measures.

use alloc::format;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Mean Euclidean distance between estimated and true positions, in meters.
pub fn mpe(estimates: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::Dimension(format!("{} estimates for {} positions", estimates.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Empty);
    }
    let total: f64 = estimates.iter().zip(truth).map(|(e, t)| position_error(*e, *t)).sum();
    Ok(total / truth.len() as f64)
}

pub fn position_error(estimate: [f64; 2], truth: [f64; 2]) -> f64 {
    (estimate[0] - truth[0]).hypot(estimate[1] - truth[1])
}

/// `‖ĥ − h‖² / ‖h‖²` for one realization.
pub fn nmse_single(estimate: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::Dimension(format!("estimate has {} entries, truth {}", estimate.len(), truth.len())));
    }
    let energy: f64 = truth.iter().map(|z| z.norm_sqr()).sum();
    if !(energy > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let err: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(err / energy)
}

/// Mean of per-sample NMSE ratios.
pub fn nmse<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [Complex64], &'a [Complex64])>,
{
    let (mut total, mut count) = (0.0, 0usize);
    for (est, truth) in pairs {
        total += nmse_single(est, truth)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty);
    }
    Ok(total / count as f64)
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn h() -> Vec<Complex64> {
        (0..12).map(|i| Complex64::new(i as f64 * 0.3 - 1.0, 0.5 - i as f64 * 0.1)).collect()
    }

    #[test]
    fn nmse_identities() {
        let h = h();
        let zero = alloc::vec![Complex64::new(0.0, 0.0); h.len()];
        let double: Vec<_> = h.iter().map(|z| z * 2.0).collect();
        assert_eq!(nmse_single(&h, &h).unwrap(), 0.0);
        assert_eq!(nmse_single(&zero, &h).unwrap(), 1.0);
        assert_eq!(nmse_single(&double, &h).unwrap(), 1.0);
        assert!(matches!(nmse_single(&h, &zero), Err(Error::ZeroNorm)));
    }

    #[test]
    fn nmse_averages_ratios_not_energies() {
        let a = [Complex64::new(1.0, 0.0)];
        let b = [Complex64::new(10.0, 0.0)];
        let ea = [Complex64::new(0.0, 0.0)];
        let eb = [Complex64::new(10.0, 0.0)];
        let v = nmse([(&ea[..], &a[..]), (&eb[..], &b[..])]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(matches!(nmse(core::iter::empty()), Err(Error::Empty)));
    }

    #[test]
    fn mpe_cases() {
        assert_eq!(mpe(&[[1.0, 2.0]], &[[1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(mpe(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        assert_eq!(mpe(&[[1.0, 0.0], [0.0, 3.0]], &[[0.0, 0.0], [0.0, 0.0]]).unwrap(), 2.0);
        assert!(matches!(mpe(&[], &[]), Err(Error::Empty)));
        assert!(mpe(&[[0.0, 0.0]], &[]).is_err());
    }

    proptest! {
        #[test]
        fn nmse_scale_invariant(alpha in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0], shift in -1.0f64..1.0) {
            let h = h();
            let est: Vec<_> = h.iter().map(|z| z + Complex64::new(shift, -shift)).collect();
            let base = nmse_single(&est, &h).unwrap();
            let hs: Vec<_> = h.iter().map(|z| z * alpha).collect();
            let es: Vec<_> = est.iter().map(|z| z * alpha).collect();
            prop_assert!((nmse_single(&es, &hs).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
        }
    }
}
