//! Regression metrics (MAE, NMAE, MAPE, R²) and mean/SD aggregation over repeated runs.
//!
//! All functions take the observed values first and the predictions second.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest |y| accepted by [`mape`].
pub const MAPE_ZERO_GUARD: f64 = 1e-9;

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Argument("metric needs at least one sample".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Argument(format!(
            "{} observations but {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// What NMAE divides the MAE by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmaeDenominator {
    /// `max(y) - min(y)`
    #[default]
    Range,
    /// `mean(y)`
    Mean,
}

impl std::str::FromStr for NmaeDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "range" => Ok(Self::Range),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!(
                "unknown NMAE denominator {other:?} (expected range or mean)"
            ))),
        }
    }
}

/// MAE normalized by the target range.
pub fn nmae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    nmae_with(y, y_hat, NmaeDenominator::Range)
}

pub fn nmae_with(y: &[f64], y_hat: &[f64], denominator: NmaeDenominator) -> Result<f64> {
    let err = mae(y, y_hat)?;
    let scale = match denominator {
        NmaeDenominator::Range => {
            let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = y.iter().copied().fold(f64::INFINITY, f64::min);
            max - min
        }
        NmaeDenominator::Mean => mean(y).abs(),
    };
    if scale <= 0.0 {
        return Err(Error::Numerical(match denominator {
            NmaeDenominator::Range => "NMAE undefined: target range is zero".to_string(),
            NmaeDenominator::Mean => "NMAE undefined: target mean is zero".to_string(),
        }));
    }
    Ok(err / scale)
}

/// Mean absolute percentage error, in percent.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let bad: Vec<usize> = y
        .iter()
        .enumerate()
        .filter(|(_, v)| !(v.abs() >= MAPE_ZERO_GUARD))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Numerical(format!(
            "MAPE undefined: |y| below {MAPE_ZERO_GUARD:e} at indices {bad:?}"
        )));
    }
    let total: f64 = y.iter().zip(y_hat).map(|(a, b)| ((a - b) / a).abs()).sum();
    Ok(100.0 * total / y.len() as f64)
}

/// Coefficient of determination; negative when worse than predicting the mean.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let y_bar = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - y_bar).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::Numerical("R² undefined: targets are constant".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// All four metrics for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub nmae: f64,
    pub mape: f64,
    pub r2: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn evaluate(y: &[f64], y_hat: &[f64], denominator: NmaeDenominator) -> Result<Self> {
        Ok(Self {
            mae: mae(y, y_hat)?,
            nmae: nmae_with(y, y_hat, denominator)?,
            mape: mape(y, y_hat)?,
            r2: r2(y, y_hat)?,
            n: y.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("cannot aggregate zero values".into()));
        }
        let m = mean(values);
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
        Ok(Self { mean: m, sd: var.sqrt() })
    }
}

/// Per-metric mean and SD over `k` repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub k: usize,
    pub mae: MeanSd,
    pub nmae: MeanSd,
    pub mape: MeanSd,
    pub r2: MeanSd,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<RunAggregate> {
    if reports.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty list of reports".into()));
    }
    let col = |f: fn(&MetricsReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(RunAggregate {
        k: reports.len(),
        mae: col(|r| r.mae)?,
        nmae: col(|r| r.nmae)?,
        mape: col(|r| r.mape)?,
        r2: col(|r| r.r2)?,
    })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(mape: f64) -> MetricsReport {
        MetricsReport { mae: 1.0, nmae: 0.1, mape, r2: 0.5, n: 10 }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[100.0], &[90.0]).unwrap(), 10.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nmae_examples() {
        assert_eq!(nmae(&[0.0, 10.0], &[0.0, 10.0]).unwrap(), 0.0);
        assert!((nmae(&[0.0, 10.0], &[1.0, 9.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!(nmae(&[5.0, 5.0], &[4.0, 6.0]).is_err());
        // mean denominator: MAE 1 / mean 5
        let v = nmae_with(&[0.0, 10.0], &[1.0, 9.0], NmaeDenominator::Mean).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[100.0, 200.0], &[100.0, 200.0]).unwrap(), 0.0);
        assert!((mape(&[100.0, 200.0], &[110.0, 180.0]).unwrap() - 10.0).abs() < 1e-12);
        let err = mape(&[100.0, 0.0, 3.0, 0.0], &[1.0; 4]).unwrap_err().to_string();
        assert!(err.contains("[1, 3]"), "{err}");
    }

    #[test]
    fn r2_examples() {
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert!(r2(&y, &[3.5; 4]).unwrap().abs() < 1e-15);
        assert!(r2(&[2.0, 2.0], &[1.0, 2.0]).is_err());
        // reversed predictions are worse than the mean
        let worse = [7.0, 4.0, 2.0, 1.0];
        let got = r2(&y, &worse).unwrap();
        let ss_res = 36.0 + 4.0 + 4.0 + 36.0;
        let ss_tot = 6.25 + 2.25 + 0.25 + 12.25;
        assert!((got - (1.0 - ss_res / ss_tot)).abs() < 1e-12);
        assert!(got < 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let same = aggregate(&[report(5.0); 4]).unwrap();
        assert_eq!(same.mape.sd, 0.0);
        assert_eq!(same.r2.sd, 0.0);
        let two = aggregate(&[report(10.0), report(14.0)]).unwrap();
        assert_eq!(two.mape, MeanSd { mean: 12.0, sd: 2.0 });
        let one = aggregate(&[report(3.0)]).unwrap();
        assert_eq!((one.k, one.mape.mean, one.mape.sd), (1, 3.0, 0.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(100.0f64..10_000.0, n),
                proptest::collection::vec(50.0f64..12_000.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn shift_invariance_of_mae_and_nmae((y, p) in pair(), c in -50.0f64..50.0) {
            prop_assume!(y.iter().any(|v| *v != y[0]));
            let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
            let ps: Vec<f64> = p.iter().map(|v| v + c).collect();
            prop_assert!((mae(&y, &p).unwrap() - mae(&ys, &ps).unwrap()).abs() < 1e-9);
            prop_assert!((nmae(&y, &p).unwrap() - nmae(&ys, &ps).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn scale_equivariance((y, p) in pair(), c in 0.01f64..100.0) {
            prop_assume!(y.iter().any(|v| *v != y[0]));
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
            let a = MetricsReport::evaluate(&y, &p, NmaeDenominator::Range).unwrap();
            let b = MetricsReport::evaluate(&ys, &ps, NmaeDenominator::Range).unwrap();
            prop_assert!((b.mae - c * a.mae).abs() <= 1e-9 * b.mae.max(1.0));
            prop_assert!((b.nmae - a.nmae).abs() < 1e-9);
            prop_assert!((b.mape - a.mape).abs() < 1e-9);
            prop_assert!((b.r2 - a.r2).abs() < 1e-9 * a.r2.abs().max(1.0));
        }

        #[test]
        fn report_invariants((y, p) in pair()) {
            prop_assume!(y.iter().any(|v| *v != y[0]));
            let r = MetricsReport::evaluate(&y, &p, NmaeDenominator::Range).unwrap();
            prop_assert!(r.mae >= 0.0 && r.nmae >= 0.0 && r.mape >= 0.0 && r.r2 <= 1.0);
        }
    }
}
