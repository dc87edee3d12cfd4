//! MAE, MSE, RMSE, R² and Pearson r. Sums are compensated (Neumaier) so
//! long vectors stay close to an exact reference.

use crate::error::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Evaluation of one prediction vector against its targets.
///
/// `r2` and `pearson_r` are `None` when undefined (constant targets, or
/// constant predictions for Pearson); they serialize as `"undefined"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    #[serde(with = "undefined_marker")]
    pub r2: Option<f64>,
    #[serde(with = "undefined_marker")]
    pub pearson_r: Option<f64>,
    pub n: usize,
    pub clamped: bool,
}

mod undefined_marker {
    use super::*;

    pub const MARKER: &str = "undefined";

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str(MARKER),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(Some(x)),
            Repr::Text(t) if t == MARKER => Ok(None),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected number or `{MARKER}`, got `{t}`"))),
        }
    }
}

pub use undefined_marker::MARKER as UNDEFINED;

impl MetricsReport {
    /// Values in the column order MAE, MSE, RMSE, R², Pearson-r.
    pub fn columns(&self) -> [Option<f64>; 5] {
        [Some(self.mae), Some(self.mse), Some(self.rmse), self.r2, self.pearson_r]
    }
}

/// Format an optional metric for tables.
pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => UNDEFINED.to_string(),
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean(v: &[f64]) -> f64 {
    compensated_sum(v.iter().copied()) / v.len() as f64
}

pub fn evaluate(y: &[f64], y_hat: &[f64]) -> Result<MetricsReport> {
    if y.len() != y_hat.len() {
        return Err(Error::Contract(format!(
            "targets ({}) and predictions ({}) differ in length",
            y.len(),
            y_hat.len()
        )));
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let mae = compensated_sum(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs())) / nf;
    let ss_res = compensated_sum(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)));
    let mse = ss_res / nf;
    let rmse = mse.sqrt();

    let y_bar = mean(y);
    let p_bar = mean(y_hat);
    let ss_tot = compensated_sum(y.iter().map(|a| (a - y_bar) * (a - y_bar)));
    let ss_pred = compensated_sum(y_hat.iter().map(|b| (b - p_bar) * (b - p_bar)));
    let cross = compensated_sum(y.iter().zip(y_hat).map(|(a, b)| (a - y_bar) * (b - p_bar)));

    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    let pearson_r = (ss_tot > 0.0 && ss_pred > 0.0).then(|| (cross / (ss_tot * ss_pred).sqrt()).clamp(-1.0, 1.0));

    Ok(MetricsReport {
        mae,
        mse,
        rmse,
        r2,
        pearson_r,
        n,
        clamped: false,
    })
}

/// [`evaluate`] after clamping predictions to `[lo, hi]`.
pub fn evaluate_clamped(y: &[f64], y_hat: &[f64], lo: f64, hi: f64) -> Result<MetricsReport> {
    let clamped: Vec<f64> = y_hat.iter().map(|v| v.clamp(lo, hi)).collect();
    let mut r = evaluate(y, &clamped)?;
    r.clamped = true;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let r = evaluate(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.mae, r.mse, r.rmse), (0.0, 0.0, 0.0));
        assert_eq!(r.r2, Some(1.0));
        assert!((r.pearson_r.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_example() {
        let r = evaluate(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5, 2.5, 3.5]).unwrap();
        assert!((r.mae - 0.5).abs() < 1e-15);
        assert!((r.mse - 0.25).abs() < 1e-15);
        assert!((r.rmse - 0.5).abs() < 1e-15);
        assert!((r.r2.unwrap() - 0.8).abs() < 1e-15);
        assert!((r.pearson_r.unwrap() - 3.0 / 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mean_predictor_scores_zero_r2() {
        let y = [1.0, 4.0, 2.5, 3.0];
        let m = y.iter().sum::<f64>() / 4.0;
        let r = evaluate(&y, &[m; 4]).unwrap();
        assert!(r.r2.unwrap().abs() < 1e-12);
        assert_eq!(r.pearson_r, None);
    }

    #[test]
    fn constant_targets_are_undefined_not_nan() {
        let r = evaluate(&[3.0, 3.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.r2, None);
        assert_eq!(r.pearson_r, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"r2\":\"undefined\""), "{json}");
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(evaluate(&[1.0, 2.0], &[1.0]), Err(Error::Contract(_))));
        assert!(matches!(evaluate(&[1.0], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn clamping_is_flagged() {
        let r = evaluate_clamped(&[1.0, 5.0], &[0.0, 9.0], 1.0, 5.0).unwrap();
        assert!(r.clamped);
        assert_eq!(r.mae, 0.0);
    }
}
