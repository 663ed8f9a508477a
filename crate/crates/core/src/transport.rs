//! Transport costs `c(z, z0)` between data points.
//!
//! Costs follow the `c(z, z0) = ||z - z0||^2` convention (no factor 1/2).
//! Plain costs measure the feature vectors only; labels never move during
//! inner maximization. [`TransportCost::CovariateShift`] adds an infinite
//! charge for changing the label.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Sample;

/// Value in `[0, +inf]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    /// The finite value, or `None` for infinity.
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::Infinite => None,
        }
    }

    pub fn checked_add(self, other: ExtReal) -> ExtReal {
        match (self, other) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
            _ => ExtReal::Infinite,
        }
    }

    /// `scale * self` for `scale >= 0`, with `0 * inf = 0`.
    pub fn scale(self, scale: f64) -> ExtReal {
        match self {
            ExtReal::Finite(v) => ExtReal::Finite(scale * v),
            ExtReal::Infinite if scale == 0.0 => ExtReal::Finite(0.0),
            ExtReal::Infinite => ExtReal::Infinite,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportCost {
    /// `||x - x0||_2^2`
    SqEuclidean,
    /// `||x - x0||_inf^2`
    SqSupNorm,
    /// Inner cost on features, infinite when labels differ.
    CovariateShift(Box<TransportCost>),
}

impl TransportCost {
    pub fn covariate_shift(inner: TransportCost) -> Self {
        TransportCost::CovariateShift(Box::new(inner))
    }

    /// The feature-space cost with wrappers removed.
    pub fn base(&self) -> &TransportCost {
        match self {
            TransportCost::CovariateShift(inner) => inner.base(),
            other => other,
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self.base(), TransportCost::SqEuclidean)
    }

    fn check_dims(z: &Sample, z0: &Sample) -> Result<()> {
        if z.dim() != z0.dim() {
            return Err(Error::DimensionMismatch {
                context: "transport cost",
                expected: z0.dim(),
                got: z.dim(),
            });
        }
        Ok(())
    }

    /// Cost on feature vectors only.
    pub fn feature_cost(&self, x: &[f64], x0: &[f64]) -> f64 {
        match self.base() {
            TransportCost::SqEuclidean => x.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum(),
            TransportCost::SqSupNorm => {
                let m = x.iter().zip(x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                m * m
            }
            TransportCost::CovariateShift(_) => unreachable!("base strips wrappers"),
        }
    }

    pub fn cost(&self, z: &Sample, z0: &Sample) -> Result<ExtReal> {
        Self::check_dims(z, z0)?;
        if let TransportCost::CovariateShift(inner) = self {
            if z.y != z0.y {
                return Ok(ExtReal::Infinite);
            }
            return inner.cost(z, z0);
        }
        Ok(ExtReal::Finite(self.feature_cost(&z.x, &z0.x)))
    }

    /// Gradient of `c(., z0)` in the features of the first argument.
    pub fn grad_first(&self, z: &Sample, z0: &Sample) -> Result<Vec<f64>> {
        Self::check_dims(z, z0)?;
        match self {
            TransportCost::SqEuclidean => Ok(z.x.iter().zip(&z0.x).map(|(a, b)| 2.0 * (a - b)).collect()),
            TransportCost::SqSupNorm => Err(Error::UnsupportedSmoothGradient {
                kind: self.to_string(),
            }),
            TransportCost::CovariateShift(inner) => {
                if z.y != z0.y {
                    return Err(Error::LabelMismatch);
                }
                inner.grad_first(z, z0)
            }
        }
    }
}

impl fmt::Display for TransportCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportCost::SqEuclidean => write!(f, "sq-l2"),
            TransportCost::SqSupNorm => write!(f, "sq-linf"),
            TransportCost::CovariateShift(inner) => write!(f, "covshift:{inner}"),
        }
    }
}

impl FromStr for TransportCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sq-l2" => Ok(TransportCost::SqEuclidean),
            "sq-linf" => Ok(TransportCost::SqSupNorm),
            other => match other.strip_prefix("covshift:") {
                Some(inner @ ("sq-l2" | "sq-linf")) => Ok(TransportCost::covariate_shift(inner.parse()?)),
                _ => Err(Error::config(format!(
                    "unknown cost `{other}` (expected sq-l2, sq-linf, covshift:sq-l2, covshift:sq-linf)"
                ))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds() -> Vec<TransportCost> {
        ["sq-l2", "sq-linf", "covshift:sq-l2", "covshift:sq-linf"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect()
    }

    #[test]
    fn self_cost_is_zero() {
        let z = Sample::class(vec![1.0, -3.0, 2.5], 1);
        for c in kinds() {
            assert_eq!(c.cost(&z, &z).unwrap(), ExtReal::Finite(0.0), "{c}");
        }
    }

    #[test]
    fn label_change_is_infinite_under_covariate_shift() {
        let c: TransportCost = "covshift:sq-l2".parse().unwrap();
        let a = Sample::class(vec![0.0, 0.0], 0);
        let b = Sample::class(vec![0.0, 0.0], 1);
        assert_eq!(c.cost(&a, &b).unwrap(), ExtReal::Infinite);
        assert!(matches!(c.grad_first(&a, &b), Err(Error::LabelMismatch)));
    }

    #[test]
    fn squared_euclidean_values_and_gradient() {
        let c = TransportCost::SqEuclidean;
        let z = Sample::unlabeled(vec![1.0, 2.0]);
        let z0 = Sample::unlabeled(vec![0.0, 0.0]);
        assert_eq!(c.cost(&z, &z0).unwrap(), ExtReal::Finite(5.0));
        assert_eq!(c.grad_first(&z0, &z0).unwrap(), vec![0.0, 0.0]);
        let g = c
            .grad_first(&Sample::unlabeled(vec![3.0, 1.0]), &Sample::unlabeled(vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(g, vec![4.0, 0.0]);
    }

    #[test]
    fn wrapper_is_transparent_for_equal_labels() {
        let wrapped: TransportCost = "covshift:sq-l2".parse().unwrap();
        let z = Sample::class(vec![3.0, 1.0], 0);
        let z0 = Sample::class(vec![1.0, 1.0], 0);
        assert_eq!(wrapped.grad_first(&z, &z0).unwrap(), vec![4.0, 0.0]);
        assert_eq!(wrapped.cost(&z, &z0).unwrap(), ExtReal::Finite(4.0));
    }

    #[test]
    fn sup_norm_has_no_smooth_gradient() {
        let c = TransportCost::SqSupNorm;
        let z = Sample::unlabeled(vec![1.0]);
        assert!(matches!(c.grad_first(&z, &z), Err(Error::UnsupportedSmoothGradient { .. })));
        assert_eq!(
            c.cost(&Sample::unlabeled(vec![1.0, -3.0]), &Sample::unlabeled(vec![0.0, 0.0])).unwrap(),
            ExtReal::Finite(9.0)
        );
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let c = TransportCost::SqEuclidean;
        let r = c.cost(&Sample::unlabeled(vec![1.0]), &Sample::unlabeled(vec![1.0, 2.0]));
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn parse_round_trips_and_rejects_garbage() {
        for c in kinds() {
            assert_eq!(c.to_string().parse::<TransportCost>().unwrap(), c);
        }
        assert!("l1".parse::<TransportCost>().is_err());
        assert!("covshift:covshift:sq-l2".parse::<TransportCost>().is_err());
    }

    #[test]
    fn extended_arithmetic() {
        assert_eq!(ExtReal::Infinite.scale(0.0), ExtReal::Finite(0.0));
        assert_eq!(ExtReal::Finite(1.0).checked_add(ExtReal::Infinite), ExtReal::Infinite);
        assert!(ExtReal::Finite(1e300) < ExtReal::Infinite);
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn squared_euclidean_is_two_strongly_convex(a in vec3(), b in vec3(), z0 in vec3()) {
            let c = TransportCost::SqEuclidean;
            let (za, zb, o) = (Sample::unlabeled(a.clone()), Sample::unlabeled(b.clone()), Sample::unlabeled(z0));
            let ca = c.cost(&za, &o).unwrap().finite().unwrap();
            let cb = c.cost(&zb, &o).unwrap().finite().unwrap();
            let g = c.grad_first(&za, &o).unwrap();
            let lin: f64 = g.iter().zip(b.iter().zip(&a)).map(|(g, (b, a))| g * (b - a)).sum();
            let dist2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
            prop_assert!(cb >= ca + lin + dist2 - 1e-9 * (1.0 + cb.abs()));
        }

        #[test]
        fn costs_are_symmetric_and_nonnegative(a in vec3(), b in vec3()) {
            for c in kinds() {
                let za = Sample::class(a.clone(), 0);
                let zb = Sample::class(b.clone(), 0);
                let ab = c.cost(&za, &zb).unwrap();
                prop_assert_eq!(ab, c.cost(&zb, &za).unwrap());
                prop_assert!(ab >= ExtReal::Finite(0.0));
            }
        }
    }
}
