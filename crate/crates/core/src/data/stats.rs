use super::manifest::{Manifest, MAX_RATING, MIN_RATING};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub const BIN_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    /// Sorted by count descending, then name.
    pub categories: Vec<(String, usize)>,
    pub rating_histogram: Vec<HistogramBin>,
    pub mean_rating: Option<f64>,
}

pub fn dataset_stats(m: &Manifest) -> DatasetStats {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &m.samples {
        *counts.entry(s.category.as_str()).or_default() += 1;
    }
    let mut categories: Vec<(String, usize)> = counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    categories.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let nbins = ((MAX_RATING - MIN_RATING) / BIN_WIDTH).round() as usize;
    let mut rating_histogram: Vec<HistogramBin> = (0..nbins)
        .map(|i| HistogramBin {
            lo: MIN_RATING + i as f64 * BIN_WIDTH,
            hi: MIN_RATING + (i + 1) as f64 * BIN_WIDTH,
            count: 0,
        })
        .collect();
    for s in &m.samples {
        let i = (((s.avg_rating - MIN_RATING) / BIN_WIDTH).floor() as usize).min(nbins - 1);
        rating_histogram[i].count += 1;
    }
    let ratings: Vec<f64> = m.samples.iter().map(|s| s.avg_rating).collect();
    let mean_rating = if ratings.is_empty() {
        None
    } else {
        Some(crate::metrics::compensated_sum(ratings.iter().copied()) / ratings.len() as f64)
    };
    DatasetStats {
        total: m.len(),
        categories,
        rating_histogram,
        mean_rating,
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples: {}", self.total)?;
        if let Some(m) = self.mean_rating {
            writeln!(f, "mean rating: {m:.4}")?;
        }
        writeln!(f, "categories:")?;
        for (name, n) in &self.categories {
            writeln!(f, "  {name:<24} {n}")?;
        }
        writeln!(f, "rating histogram:")?;
        for b in &self.rating_histogram {
            writeln!(f, "  [{:.2}, {:.2}) {}", b.lo, b.hi, b.count)?;
        }
        Ok(())
    }
}
