use std::collections::BTreeMap;
use std::fmt;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::calendar::Bucket;
use crate::classifier::Side;
use crate::error::{Error, Result};

/// Confusion counts with derived rates. Rates with a zero denominator are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Confusion { tp, fp, fn_, tn }
    }

    pub fn add(&mut self, signal: bool, label: bool) {
        match (signal, label) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Confusion counts of aligned signal/label sequences.
pub fn classification_metrics(signals: &[bool], labels: &[bool]) -> Result<Confusion> {
    if signals.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: signals.len(),
        });
    }
    let mut c = Confusion::default();
    for (&s, &l) in signals.iter().zip(labels) {
        c.add(s, l);
    }
    Ok(c)
}

/// Per (zone, side) classification cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub zone: String,
    pub side: Side,
    pub gamma: f64,
    pub tau: f64,
    pub confusion: Confusion,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

fn normalized(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(&bad) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidProbability(bad));
    }
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return Err(Error::EmptySupport);
    }
    Ok(p.iter().map(|v| v / s).collect())
}

/// Jensen-Shannon divergence in nats, `H(M) - (H(P) + H(Q)) / 2` with
/// `M = (P + Q) / 2`. Inputs are renormalized.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptySupport);
    }
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let p = normalized(p)?;
    let q = normalized(q)?;
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = entropy(&m) - 0.5 * (entropy(&p) + entropy(&q));
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    HourOfDay,
    Month,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::HourOfDay, Axis::Month];

    pub fn bins(self) -> usize {
        match self {
            Axis::HourOfDay => 24,
            Axis::Month => 12,
        }
    }

    pub fn bin(self, local: NaiveDateTime) -> usize {
        match self {
            Axis::HourOfDay => local.hour() as usize,
            Axis::Month => local.month0() as usize,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::HourOfDay => "hour_of_day",
            Axis::Month => "month",
        })
    }
}

/// Histograms (raw counts) and divergences of trade timing against realized spikes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub axis: Axis,
    pub top_fraction: f64,
    pub js_top: f64,
    pub js_all: f64,
    pub trades: Vec<usize>,
    pub top: Vec<usize>,
    pub all: Vec<usize>,
}

pub fn histogram(times: impl IntoIterator<Item = NaiveDateTime>, axis: Axis) -> Vec<usize> {
    let mut h = vec![0; axis.bins()];
    for t in times {
        h[axis.bin(t)] += 1;
    }
    h
}

fn as_f64(h: &[usize]) -> Vec<f64> {
    h.iter().map(|&v| v as f64).collect()
}

/// Compares the timing of trades with the largest `top_fraction` of realized
/// edges and with all realized hours. `realized` pairs a local time with the
/// side's realized edge; ties in the ranking break by time.
pub fn spike_alignment(
    trades: &[NaiveDateTime],
    realized: &[(NaiveDateTime, f64)],
    axis: Axis,
    top_fraction: f64,
) -> Result<Alignment> {
    if trades.is_empty() {
        return Err(Error::EmptyTrades);
    }
    if realized.is_empty() {
        return Err(Error::EmptySupport);
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidProbability(top_fraction));
    }
    let mut ranked: Vec<&(NaiveDateTime, f64)> = realized.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n_top = ((top_fraction * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len());

    let th = histogram(trades.iter().copied(), axis);
    let top = histogram(ranked[..n_top].iter().map(|r| r.0), axis);
    let all = histogram(realized.iter().map(|r| r.0), axis);
    Ok(Alignment {
        axis,
        top_fraction,
        js_top: js_divergence(&as_f64(&th), &as_f64(&top))?,
        js_all: js_divergence(&as_f64(&th), &as_f64(&all))?,
        trades: th,
        top,
        all,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BucketKey {
    pub zone: String,
    pub side: Side,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub key: BucketKey,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` below two trades.
    pub std: Option<f64>,
    /// One-sided t statistic against a zero mean; infinite when the std is zero.
    pub t: Option<f64>,
    pub admitted: bool,
}

/// Per-bucket t statistics of per-trade P&L. A bucket is admitted when
/// `t > t_threshold` and `n >= min_trades`.
pub fn bucket_significance(
    trades: &[(BucketKey, f64)],
    min_trades: usize,
    t_threshold: f64,
) -> Vec<BucketStat> {
    let mut groups: BTreeMap<&BucketKey, Vec<f64>> = BTreeMap::new();
    for (k, pnl) in trades {
        groups.entry(k).or_default().push(*pnl);
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = (n >= 2).then(|| {
                let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
                (ss / (n - 1) as f64).sqrt()
            });
            let t = std.map(|s| {
                if s > 0.0 {
                    mean / (s / (n as f64).sqrt())
                } else if mean > 0.0 {
                    f64::INFINITY
                } else if mean < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.0
                }
            });
            let admitted = n >= min_trades && t.is_some_and(|t| t > t_threshold);
            BucketStat {
                key: k.clone(),
                n,
                mean,
                std,
                t,
                admitted,
            }
        })
        .collect()
}
