use std::collections::BTreeMap;

use super::Panel;
use crate::error::{Error, Result};

/// Series extracted per zone for cross-zone correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrelationField {
    Dart,
    /// 1 when `dart <= -lower` or `dart >= upper` (either bound may be omitted).
    SpikeIndicator {
        lower: Option<f64>,
        upper: Option<f64>,
    },
}

impl CorrelationField {
    fn value(&self, dart: f64) -> f64 {
        match *self {
            CorrelationField::Dart => dart,
            CorrelationField::SpikeIndicator { lower, upper } => {
                let neg = lower.is_some_and(|g| dart <= -g);
                let pos = upper.is_some_and(|g| dart >= g);
                if neg || pos {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Pearson correlation by single-pass co-moment updates.
/// Returns `None` when either series has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let (mut mx, mut my) = (0.0, 0.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise Pearson correlation matrix of a per-zone field, computed on the
/// hours both zones share. Rows follow `zones`.
pub fn correlation_matrix(
    panel: &Panel,
    field: CorrelationField,
    zones: &[String],
) -> Result<Vec<Vec<f64>>> {
    let mut series: Vec<BTreeMap<i64, f64>> = Vec::with_capacity(zones.len());
    for z in zones {
        let recs = panel.zone_records(z);
        if recs.is_empty() {
            return Err(Error::UnknownZone(z.clone()));
        }
        series.push(
            recs.iter()
                .map(|r| (r.timestamp.timestamp(), field.value(r.dart)))
                .collect(),
        );
    }

    let n = zones.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in (i + 1)..n {
            let (xs, ys): (Vec<f64>, Vec<f64>) = series[i]
                .iter()
                .filter_map(|(t, &x)| series[j].get(t).map(|&y| (x, y)))
                .unzip();
            if xs.len() < 2 {
                return Err(Error::InsufficientOverlap(
                    zones[i].clone(),
                    zones[j].clone(),
                    xs.len(),
                ));
            }
            let r = pearson(&xs, &ys).ok_or_else(|| {
                let var = |v: &[f64]| v.iter().all(|&a| a == v[0]);
                Error::DegenerateSeries(if var(&xs) {
                    zones[i].clone()
                } else {
                    zones[j].clone()
                })
            })?;
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

/// Empirical quantiles by linear interpolation between order statistics
/// (`h = (n-1)p`). Output pairs `(p, q(p))` are sorted by `p`.
pub fn empirical_quantiles(values: &[f64], probs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::EmptySeries);
    }
    if let Some(&p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidProbability(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ps = probs.to_vec();
    ps.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(ps
        .into_iter()
        .map(|p| {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = h - lo as f64;
            let q = if frac == 0.0 {
                sorted[lo]
            } else {
                sorted[lo] + frac * (sorted[hi] - sorted[lo])
            };
            (p, q)
        })
        .collect())
}
