//! Per-zone logistic spike classifiers.

use std::borrow::Borrow;
use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::DateRange;
use crate::error::{Error, Result};
use crate::features::LabeledObservation;

/// INC models negative spikes (earning -DART), DEC models positive spikes (earning +DART).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "INC")]
    Inc,
    #[serde(rename = "DEC")]
    Dec,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Inc, Side::Dec];

    /// Stored label for this side.
    pub fn label(self, o: &LabeledObservation) -> u8 {
        match self {
            Side::Inc => o.y_neg,
            Side::Dec => o.y_pos,
        }
    }

    /// Label for a given threshold, recomputed from the realized DART.
    pub fn label_at(self, dart: f64, gamma: f64) -> u8 {
        match self {
            Side::Inc => u8::from(dart <= -gamma),
            Side::Dec => u8::from(dart >= gamma),
        }
    }

    /// Realized $/MWh edge of a unit position on this side.
    pub fn edge(self, dart: f64) -> f64 {
        match self {
            Side::Inc => -dart,
            Side::Dec => dart,
        }
    }

    /// +1 for INC (long DA), -1 for DEC.
    pub fn sign(self) -> f64 {
        match self {
            Side::Inc => 1.0,
            Side::Dec => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Inc => "INC",
            Side::Dec => "DEC",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logit(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// Summed cross-entropy and its gradient for `side`'s labels. `beta[0]` is the intercept.
pub fn cross_entropy_loss<O: Borrow<LabeledObservation>>(
    beta: &[f64],
    data: &[O],
    side: Side,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; beta.len()];
    for o in data {
        let o = o.borrow();
        if o.x.len() + 1 != beta.len() {
            return Err(Error::DimensionMismatch {
                expected: beta.len() - 1,
                got: o.x.len(),
            });
        }
        let z = logit(beta, &o.x);
        let y = side.label(o) as f64;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        grad[0] += r;
        for (g, v) in grad[1..].iter_mut().zip(&o.x) {
            *g += r * v;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the infinity norm of the mean-loss gradient.
    pub tol: f64,
    /// Ridge penalty on non-intercept coefficients (mean-loss scale).
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 5000,
            tol: 1e-6,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub train_range: Option<DateRange>,
    pub rows: usize,
    pub first_day: Option<NaiveDate>,
    pub last_day: Option<NaiveDate>,
    pub iterations: usize,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeModel {
    pub zone: String,
    pub side: Side,
    pub gamma: f64,
    pub tau: f64,
    /// Length of `beta`, intercept included.
    pub d: usize,
    pub beta: Vec<f64>,
    pub train_meta: TrainMeta,
}

impl SpikeModel {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.beta.iter().any(|b| !b.is_finite()) {
            p.push("beta has non-finite entries".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            p.push(format!("tau {} outside (0, 1)", self.tau));
        }
        if !(self.gamma > 0.0) {
            p.push(format!("gamma {} must be positive", self.gamma));
        }
        if self.d != self.beta.len() {
            p.push(format!(
                "d = {} but beta has {} entries",
                self.d,
                self.beta.len()
            ));
        }
        p
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: SpikeModel = serde_json::from_str(s)?;
        let p = m.problems();
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&s)
    }

    pub fn fires(&self, x: &[f64]) -> Result<bool> {
        Ok(predict(self, x)? >= self.tau)
    }
}

pub fn predict(model: &SpikeModel, x: &[f64]) -> Result<f64> {
    if x.len() + 1 != model.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: model.beta.len() - 1,
            got: x.len(),
        });
    }
    Ok(sigmoid(logit(&model.beta, x)))
}

struct Design {
    n: usize,
    width: usize,
    rows: Vec<f64>,
    y: Vec<f64>,
}

impl Design {
    /// Mean loss (plus ridge) and its gradient.
    fn eval(&self, beta: &[f64], l2: f64, grad: Option<&mut [f64]>) -> f64 {
        let mut loss = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.fill(0.0);
        }
        for (row, &y) in self.rows.chunks_exact(self.width).zip(&self.y) {
            let z: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            loss += softplus(z) - y * z;
            if let Some(g) = g.as_deref_mut() {
                let r = sigmoid(z) - y;
                for (gj, a) in g.iter_mut().zip(row) {
                    *gj += r * a;
                }
            }
        }
        let n = self.n as f64;
        let ridge: f64 = beta[1..].iter().map(|b| b * b).sum();
        if let Some(g) = g {
            for (j, gj) in g.iter_mut().enumerate() {
                *gj /= n;
                if j > 0 {
                    *gj += l2 * beta[j];
                }
            }
        }
        loss / n + 0.5 * l2 * ridge
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes cross-entropy for one (zone, side) by gradient descent with
/// Armijo backtracking from `beta = 0`. Labels are recomputed from the realized
/// DART at threshold `gamma`. The mean loss is minimized, which has the same
/// argmin as the summed loss.
pub fn fit<O: Borrow<LabeledObservation>>(
    data: &[O],
    side: Side,
    gamma: f64,
    options: &FitOptions,
) -> Result<SpikeModel> {
    let first = data.first().ok_or(Error::EmptySeries)?.borrow();
    let zone = first.zone.clone();
    let width = first.x.len() + 1;
    let mut rows = Vec::with_capacity(data.len() * width);
    let mut y = Vec::with_capacity(data.len());
    let (mut first_day, mut last_day) = (None::<NaiveDate>, None::<NaiveDate>);
    for o in data {
        let o = o.borrow();
        if o.x.len() + 1 != width {
            return Err(Error::DimensionMismatch {
                expected: width - 1,
                got: o.x.len(),
            });
        }
        if o.zone != zone {
            return Err(Error::Config(vec![format!(
                "fit data mixes zones `{zone}` and `{}`",
                o.zone
            )]));
        }
        rows.push(1.0);
        rows.extend_from_slice(&o.x);
        y.push(side.label_at(o.realized_dart, gamma) as f64);
        let day = o.timestamp.naive_local().date();
        first_day = Some(first_day.map_or(day, |d| d.min(day)));
        last_day = Some(last_day.map_or(day, |d| d.max(day)));
    }
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::SingleClassData(format!("{zone} {side}")));
    }

    let design = Design {
        n: y.len(),
        width,
        rows,
        y,
    };
    let mut beta = vec![0.0; width];
    let mut grad = vec![0.0; width];
    let mut loss = design.eval(&beta, options.l2, Some(&mut grad));
    let initial_loss = loss;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) <= options.tol;
    let mut trial = vec![0.0; width];
    while !converged && iterations < options.max_iter {
        iterations += 1;
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut accepted = false;
        for _ in 0..60 {
            for ((t, b), g) in trial.iter_mut().zip(&beta).zip(&grad) {
                *t = b - step * g;
            }
            let l = design.eval(&trial, options.l2, None);
            if l <= loss - 1e-4 * step * g2 {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no representable descent step left
            break;
        }
        std::mem::swap(&mut beta, &mut trial);
        loss = design.eval(&beta, options.l2, Some(&mut grad));
        if !loss.is_finite() || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite(format!(
                "fit {zone} {side} at iteration {iterations}"
            )));
        }
        converged = inf_norm(&grad) <= options.tol;
        step *= 2.0;
    }
    if !converged {
        log::debug!(
            "fit {zone} {side}: stopped after {iterations} iterations, |grad| = {:.3e}",
            inf_norm(&grad)
        );
    }

    Ok(SpikeModel {
        zone,
        side,
        gamma,
        tau: 0.5,
        d: width,
        beta,
        train_meta: TrainMeta {
            train_range: None,
            rows: design.n,
            first_day,
            last_day,
            iterations,
            converged,
            initial_loss,
            final_loss: loss,
            grad_norm: inf_norm(&grad),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedThresholds {
    pub gamma: f64,
    pub tau: f64,
    pub pnl: f64,
    pub trades: usize,
}

/// Picks the (gamma, tau) grid point with the largest unit-size validation P&L.
/// `family` holds one model per gamma for a single (zone, side); validation rows
/// of other zones are ignored. Ties go to larger tau, then larger gamma.
pub fn tune_thresholds<O: Borrow<LabeledObservation>>(
    family: &[SpikeModel],
    taus: &[f64],
    validation: &[O],
) -> Result<(TunedThresholds, SpikeModel)> {
    if family.is_empty() || taus.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best: Option<(TunedThresholds, usize)> = None;
    for (mi, m) in family.iter().enumerate() {
        let mut scored = Vec::new();
        for o in validation {
            let o = o.borrow();
            if o.zone != m.zone {
                continue;
            }
            if let Some(r) = m.train_meta.train_range {
                if r.contains(o.timestamp.naive_local().date()) {
                    return Err(Error::SplitOverlap(format!(
                        "validation row {} lies in the training range {r}",
                        o.timestamp.to_rfc3339()
                    )));
                }
            }
            scored.push((predict(m, &o.x)?, m.side.edge(o.realized_dart)));
        }
        for &tau in taus {
            let (mut pnl, mut trades) = (0.0, 0);
            for &(p, e) in &scored {
                if p >= tau {
                    pnl += e;
                    trades += 1;
                }
            }
            let cand = TunedThresholds {
                gamma: m.gamma,
                tau,
                pnl,
                trades,
            };
            let better = match &best {
                None => true,
                Some((b, _)) => {
                    pnl > b.pnl
                        || (pnl == b.pnl && (tau > b.tau || (tau == b.tau && m.gamma > b.gamma)))
                }
            };
            if better {
                best = Some((cand, mi));
            }
        }
    }
    let (t, mi) = best.expect("non-empty grid");
    let mut model = family[mi].clone();
    model.tau = t.tau;
    Ok((t, model))
}
