//! Multi-zone virtual position sizing under the asymmetric linear-quadratic
//! impact model
//!
//! `F(q) = x'q - kE(S) S^2 - sum_z k_z q_z^2`, with `S = sum_z q_z` and
//! `kE(S) = k_E+` for `S >= 0`, `k_E-` otherwise.
//!
//! `x_z` is signed: an INC opportunity enters as `+x^INC`, a DEC opportunity
//! as `-x^DEC`, so that `q_z > 0` is an INC and `q_z < 0` a DEC.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;

use chrono::{DateTime, FixedOffset};
use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::bidstack::ImpactParams;
use crate::calendar::{bucket_keys, Bucket, MarketCalendar};
use crate::classifier::{predict, Side, SpikeModel};
use crate::error::{Error, Result};
use crate::features::LabeledObservation;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectedPayoffs {
    /// Signed $/MWh edge per zone.
    pub x: BTreeMap<String, f64>,
    pub side_hint: BTreeMap<String, Side>,
}

impl ExpectedPayoffs {
    pub fn insert(&mut self, zone: &str, side: Side, edge: f64) {
        self.x.insert(zone.to_string(), side.sign() * edge);
        self.side_hint.insert(zone.to_string(), side);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NetBuy,
    NetSell,
    NetFlat,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::NetBuy => "net_buy",
            Regime::NetSell => "net_sell",
            Regime::NetFlat => "net_flat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradePlan {
    pub q: BTreeMap<String, f64>,
    pub s: f64,
    pub regime: Regime,
    pub objective: f64,
}

impl TradePlan {
    pub fn zero() -> Self {
        TradePlan {
            q: BTreeMap::new(),
            s: 0.0,
            regime: Regime::NetFlat,
            objective: 0.0,
        }
    }
}

/// Closed forms, generic so they can be evaluated in exact arithmetic.
pub mod closed_form {
    use super::Num;

    fn two<T: Num>() -> T {
        T::one() + T::one()
    }

    /// `H = sum 1/k_z`, `N = sum x_z / k_z`.
    pub fn h_n<T: Clone + Num>(x: &[T], k: &[T]) -> (T, T) {
        let mut h = T::zero();
        let mut n = T::zero();
        for (xi, ki) in x.iter().zip(k) {
            h = h + T::one() / ki.clone();
            n = n + xi.clone() / ki.clone();
        }
        (h, n)
    }

    /// Interior stationary point for a fixed energy coefficient:
    /// `S = (N/2) / (1 + k_e H)`, `q_z = (x_z - 2 k_e S) / (2 k_z)`.
    pub fn regime<T: Clone + Num>(x: &[T], k: &[T], k_e: T) -> (Vec<T>, T) {
        let (h, n) = h_n(x, k);
        let s = (n / two()) / (T::one() + k_e.clone() * h);
        let q = x
            .iter()
            .zip(k)
            .map(|(xi, ki)| {
                (xi.clone() - two::<T>() * k_e.clone() * s.clone()) / (two::<T>() * ki.clone())
            })
            .collect();
        (q, s)
    }

    /// Maximizer on `sum q = 0`: `q_z = (x_z - N/H) / (2 k_z)`.
    pub fn net_flat<T: Clone + Num>(x: &[T], k: &[T]) -> Vec<T> {
        let (h, n) = h_n(x, k);
        let lambda = n / h;
        x.iter()
            .zip(k)
            .map(|(xi, ki)| (xi.clone() - lambda.clone()) / (two::<T>() * ki.clone()))
            .collect()
    }
}

/// `F` on plain slices.
pub fn objective_raw(q: &[f64], x: &[f64], k: &[f64], k_e_plus: f64, k_e_minus: f64) -> f64 {
    let s: f64 = q.iter().sum();
    let ke = if s >= 0.0 { k_e_plus } else { k_e_minus };
    let mut f = -ke * s * s;
    for ((qi, xi), ki) in q.iter().zip(x).zip(k) {
        f += xi * qi - ki * qi * qi;
    }
    f
}

struct Problem {
    zones: Vec<String>,
    x: Vec<f64>,
    k: Vec<f64>,
    k_plus: f64,
    k_minus: f64,
}

impl Problem {
    fn new(x: &ExpectedPayoffs, params: &ImpactParams, bucket: Option<Bucket>) -> Result<Self> {
        let zones: Vec<String> = x.x.keys().cloned().collect();
        let xs: Vec<f64> = x.x.values().copied().collect();
        let k = zones
            .iter()
            .map(|z| params.kz(z))
            .collect::<Result<Vec<_>>>()?;
        let (k_plus, k_minus) = match bucket {
            Some(b) => params.k_e(b)?,
            None => (f64::NAN, f64::NAN),
        };
        if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("payoff {bad}")));
        }
        Ok(Problem {
            zones,
            x: xs,
            k,
            k_plus,
            k_minus,
        })
    }

    fn f(&self, q: &[f64]) -> f64 {
        objective_raw(q, &self.x, &self.k, self.k_plus, self.k_minus)
    }

    fn plan(&self, q: Vec<f64>, regime: Regime) -> TradePlan {
        let objective = self.f(&q);
        let s = q.iter().sum();
        TradePlan {
            q: self.zones.iter().cloned().zip(q).collect(),
            s,
            regime,
            objective,
        }
    }
}

/// Evaluates `F(q)` with the bucket's energy coefficients.
pub fn objective(
    q: &BTreeMap<String, f64>,
    x: &ExpectedPayoffs,
    params: &ImpactParams,
    bucket: Bucket,
) -> Result<f64> {
    let (kp, km) = params.k_e(bucket)?;
    let mut xs = Vec::with_capacity(q.len());
    let mut ks = Vec::with_capacity(q.len());
    for z in q.keys() {
        xs.push(
            *x.x.get(z)
                .ok_or_else(|| Error::MissingCoefficient(format!("payoff for zone {z}")))?,
        );
        ks.push(params.kz(z)?);
    }
    let qs: Vec<f64> = q.values().copied().collect();
    Ok(objective_raw(&qs, &xs, &ks, kp, km))
}

/// Interior candidate for a fixed energy coefficient `k_e`.
pub fn solve_regime(
    x: &ExpectedPayoffs,
    params: &ImpactParams,
    k_e: f64,
) -> Result<(BTreeMap<String, f64>, f64)> {
    let p = Problem::new(x, params, None)?;
    let (q, s) = closed_form::regime(&p.x, &p.k, k_e);
    Ok((p.zones.into_iter().zip(q).collect(), s))
}

/// Zero-net-position candidate. A single zone is forced to zero.
pub fn solve_net_flat(x: &ExpectedPayoffs, params: &ImpactParams) -> Result<BTreeMap<String, f64>> {
    let p = Problem::new(x, params, None)?;
    if p.zones.len() < 2 {
        if !p.zones.is_empty() {
            log::warn!("net-flat with a single zone forces q = 0");
        }
        return Ok(p.zones.into_iter().map(|z| (z, 0.0)).collect());
    }
    let q = closed_form::net_flat(&p.x, &p.k);
    Ok(p.zones.into_iter().zip(q).collect())
}

/// Evaluates the net-buy, net-sell, and net-flat candidates and returns the best
/// admissible one. Ties go to net-flat.
pub fn optimize(x: &ExpectedPayoffs, params: &ImpactParams, bucket: Bucket) -> Result<TradePlan> {
    let p = Problem::new(x, params, Some(bucket))?;
    if p.zones.is_empty() {
        return Ok(TradePlan::zero());
    }
    let flat = if p.zones.len() >= 2 {
        closed_form::net_flat(&p.x, &p.k)
    } else {
        vec![0.0]
    };
    let mut best = p.plan(flat, Regime::NetFlat);

    let (q_plus, s_plus) = closed_form::regime(&p.x, &p.k, p.k_plus);
    if s_plus > 0.0 {
        let c = p.plan(q_plus, Regime::NetBuy);
        if c.objective > best.objective {
            best = c;
        }
    }
    let (q_minus, s_minus) = closed_form::regime(&p.x, &p.k, p.k_minus);
    if s_minus < 0.0 {
        let c = p.plan(q_minus, Regime::NetSell);
        if c.objective > best.objective {
            best = c;
        }
    }
    Ok(best)
}

/// Drops zones whose payoff sign contradicts their directional hint (an INC
/// hint with a negative edge, or a DEC hint with a positive signed edge) and
/// zones without a hint.
pub fn clip_sides(x: &ExpectedPayoffs) -> ExpectedPayoffs {
    let mut out = ExpectedPayoffs::default();
    for (z, &v) in &x.x {
        let Some(&side) = x.side_hint.get(z) else {
            continue;
        };
        if side.sign() * v >= 0.0 {
            out.x.insert(z.clone(), v);
            out.side_hint.insert(z.clone(), side);
        }
    }
    out
}

/// Optimizes with every zone's position sign fixed by its hint
/// (`q_z >= 0` for INC, `q_z <= 0` for DEC).
pub fn optimize_clipped(
    x: &ExpectedPayoffs,
    params: &ImpactParams,
    bucket: Bucket,
) -> Result<TradePlan> {
    let clipped = clip_sides(x);
    let p = Problem::new(&clipped, params, Some(bucket))?;
    if p.zones.is_empty() {
        return Ok(TradePlan::zero());
    }
    let sign: Vec<f64> = p
        .zones
        .iter()
        .map(|z| clipped.side_hint[z].sign())
        .collect();

    let mut best = p.plan(constrained_flat(&p.x, &p.k, &sign), Regime::NetFlat);
    let q_plus = constrained_regime(&p.x, &p.k, &sign, p.k_plus);
    if q_plus.iter().sum::<f64>() > 0.0 {
        let c = p.plan(q_plus, Regime::NetBuy);
        if c.objective > best.objective {
            best = c;
        }
    }
    let q_minus = constrained_regime(&p.x, &p.k, &sign, p.k_minus);
    if q_minus.iter().sum::<f64>() < 0.0 {
        let c = p.plan(q_minus, Regime::NetSell);
        if c.objective > best.objective {
            best = c;
        }
    }
    Ok(best)
}

/// Active-set solve of a sign-constrained concave quadratic. `solve(free)`
/// returns the closed-form optimum with the other coordinates at zero and the
/// gradient at that point; zones violating their sign are fixed at zero and
/// fixed zones whose gradient points into the feasible side are released.
fn active_set<F>(n: usize, sign: &[f64], solve: F) -> Vec<f64>
where
    F: Fn(&[bool]) -> (Vec<f64>, Vec<f64>),
{
    let tol = 1e-12;
    let kkt = |free: &[bool]| -> Option<Vec<f64>> {
        let (q, g) = solve(free);
        let scale = 1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let primal = (0..n).all(|i| !free[i] || sign[i] * q[i] >= -tol * (1.0 + q[i].abs()));
        let dual = (0..n).all(|i| free[i] || sign[i] * g[i] <= tol * scale);
        (primal && dual).then_some(q)
    };

    let mut free = vec![true; n];
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    while seen.insert(free.clone()) {
        let (q, g) = solve(&free);
        let violators: Vec<usize> = (0..n)
            .filter(|&i| free[i] && sign[i] * q[i] < -tol * (1.0 + q[i].abs()))
            .collect();
        if !violators.is_empty() {
            for i in violators {
                free[i] = false;
            }
            continue;
        }
        let scale = 1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let release = (0..n)
            .filter(|&i| !free[i] && sign[i] * g[i] > tol * scale)
            .max_by(|&a, &b| (sign[a] * g[a]).total_cmp(&(sign[b] * g[b])));
        match release {
            Some(i) => free[i] = true,
            None => return clamp_signs(q, sign),
        }
    }
    // Cycled: enumerate free sets, largest first, and take the first KKT point.
    let mut subsets: Vec<u64> = (0..(1u64 << n)).collect();
    subsets.sort_by_key(|m| std::cmp::Reverse(m.count_ones()));
    for m in subsets {
        let f: Vec<bool> = (0..n).map(|i| m >> i & 1 == 1).collect();
        if let Some(q) = kkt(&f) {
            return clamp_signs(q, sign);
        }
    }
    vec![0.0; n]
}

fn clamp_signs(q: Vec<f64>, sign: &[f64]) -> Vec<f64> {
    q.into_iter()
        .zip(sign)
        .map(|(v, s)| if s * v < 0.0 { 0.0 } else { v })
        .collect()
}

fn constrained_regime(x: &[f64], k: &[f64], sign: &[f64], k_e: f64) -> Vec<f64> {
    let n = x.len();
    active_set(n, sign, |free| {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ks: Vec<f64> = idx.iter().map(|&i| k[i]).collect();
        let mut q = vec![0.0; n];
        let mut s = 0.0;
        if !idx.is_empty() {
            let (qf, sf) = closed_form::regime(&xs, &ks, k_e);
            for (j, &i) in idx.iter().enumerate() {
                q[i] = qf[j];
            }
            s = sf;
        }
        let g = (0..n)
            .map(|i| x[i] - 2.0 * k_e * s - 2.0 * k[i] * q[i])
            .collect();
        (q, g)
    })
}

fn constrained_flat(x: &[f64], k: &[f64], sign: &[f64]) -> Vec<f64> {
    let n = x.len();
    active_set(n, sign, |free| {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let mut q = vec![0.0; n];
        // With fewer than two free zones the constraint pins everything at zero;
        // the multiplier is then only bounded, so zero stays a KKT point when
        // the fixed zones' edges have opposite feasible signs.
        let lambda = if idx.len() >= 2 {
            let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let ks: Vec<f64> = idx.iter().map(|&i| k[i]).collect();
            let qf = closed_form::net_flat(&xs, &ks);
            for (j, &i) in idx.iter().enumerate() {
                q[i] = qf[j];
            }
            let (h, nn) = closed_form::h_n(&xs, &ks);
            nn / h
        } else {
            flat_multiplier(x, sign, &idx)
        };
        let g = (0..n).map(|i| x[i] - lambda - 2.0 * k[i] * q[i]).collect();
        (q, g)
    })
}

/// A multiplier making `q = 0` stationary when possible: any value in
/// `[max over INC-signed x, min over DEC-signed x]`.
fn flat_multiplier(x: &[f64], sign: &[f64], free: &[usize]) -> f64 {
    if let Some(&i) = free.first() {
        return x[i];
    }
    let lo = (0..x.len())
        .filter(|&i| sign[i] > 0.0)
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = (0..x.len())
        .filter(|&i| sign[i] < 0.0)
        .map(|i| x[i])
        .fold(f64::INFINITY, f64::min);
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

/// Validation-estimated payoff for one (zone, side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffEntry {
    pub zone: String,
    pub side: Side,
    /// Mean realized edge over fired validation hours; `None` when nothing fired.
    pub x: Option<f64>,
    pub trades: usize,
    pub eligible: bool,
    #[serde(with = "bucket_keys")]
    pub by_bucket: BTreeMap<Bucket, BucketPayoff>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketPayoff {
    pub x: f64,
    pub trades: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PayoffTable {
    pub entries: Vec<PayoffEntry>,
}

impl PayoffTable {
    pub fn get(&self, zone: &str, side: Side) -> Option<&PayoffEntry> {
        self.entries
            .iter()
            .find(|e| e.zone == zone && e.side == side)
    }

    pub fn is_eligible(&self, zone: &str, side: Side) -> bool {
        self.get(zone, side).is_some_and(|e| e.eligible)
    }

    /// Pooled edge, or the bucket-specific edge when `bucket` is given and
    /// that bucket saw trades.
    pub fn edge(&self, zone: &str, side: Side, bucket: Option<Bucket>) -> Option<f64> {
        let e = self.get(zone, side)?;
        if let Some(b) = bucket.and_then(|b| e.by_bucket.get(&b)) {
            return Some(b.x);
        }
        e.x
    }
}

/// Conditional mean realized edge over validation hours where each model fires.
/// A (zone, side) with no fired hour or a non-positive mean is ineligible.
pub fn estimate_payoffs<M, O>(
    models: &[M],
    validation: &[O],
    calendar: &MarketCalendar,
) -> Result<PayoffTable>
where
    M: Borrow<SpikeModel>,
    O: Borrow<LabeledObservation>,
{
    let mut entries = Vec::new();
    for m in models {
        let m = m.borrow();
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut buckets: BTreeMap<Bucket, (f64, usize)> = BTreeMap::new();
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
            if predict(m, &o.x)? >= m.tau {
                let e = m.side.edge(o.realized_dart);
                sum += e;
                n += 1;
                let b = buckets
                    .entry(calendar.bucket_of(&o.timestamp))
                    .or_insert((0.0, 0));
                b.0 += e;
                b.1 += 1;
            }
        }
        let x = (n > 0).then(|| sum / n as f64);
        entries.push(PayoffEntry {
            zone: m.zone.clone(),
            side: m.side,
            x,
            trades: n,
            eligible: x.is_some_and(|v| v > 0.0),
            by_bucket: buckets
                .into_iter()
                .map(|(b, (s, c))| {
                    (
                        b,
                        BucketPayoff {
                            x: s / c as f64,
                            trades: c,
                        },
                    )
                })
                .collect(),
        });
    }
    entries.sort_by(|a, b| a.zone.cmp(&b.zone).then(a.side.cmp(&b.side)));
    Ok(PayoffTable { entries })
}

/// Writes `timestamp, zone, q_mwh, regime, objective`, one row per zone.
pub fn write_plans<W: Write>(
    plans: &[(DateTime<FixedOffset>, TradePlan)],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "zone", "q_mwh", "regime", "objective"])?;
    for (ts, p) in plans {
        let t = crate::panel::format_ts(ts);
        for (z, q) in &p.q {
            w.write_record([
                t.as_str(),
                z,
                &q.to_string(),
                &p.regime.to_string(),
                &p.objective.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("writing trade plans", e))?;
    Ok(())
}

/// Zones with a hint, for callers that need the set explicitly.
pub fn hinted_zones(x: &ExpectedPayoffs) -> BTreeSet<&str> {
    x.side_hint.keys().map(String::as_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::{Band, Season};
    use num::BigRational;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const B: Bucket = Bucket::new(Season::Summer, Band::Peak);

    fn params(k: &[(&str, f64)], kp: f64, km: f64) -> ImpactParams {
        ImpactParams {
            k_e_plus: [(B, kp)].into(),
            k_e_minus: [(B, km)].into(),
            k_z: k.iter().map(|(z, v)| (z.to_string(), *v)).collect(),
            reference: None,
        }
    }

    fn payoffs(x: &[(&str, f64)]) -> ExpectedPayoffs {
        let mut p = ExpectedPayoffs::default();
        for &(z, v) in x {
            let side = if v >= 0.0 { Side::Inc } else { Side::Dec };
            p.x.insert(z.to_string(), v);
            p.side_hint.insert(z.to_string(), side);
        }
        p
    }

    /// Projected cyclic coordinate ascent on the piecewise objective, the
    /// numeric oracle. `lo/hi` bound each coordinate.
    fn coordinate_ascent(
        x: &[f64],
        k: &[f64],
        kp: f64,
        km: f64,
        lo: &[f64],
        hi: &[f64],
    ) -> Vec<f64> {
        let n = x.len();
        let mut q = vec![0.0; n];
        for _ in 0..200_000 {
            let mut moved = 0.0f64;
            for i in 0..n {
                let rest: f64 = q.iter().sum::<f64>() - q[i];
                // maximize x q - kE(rest+q)(rest+q)^2 - k q^2 over q
                let up = (x[i] - 2.0 * kp * rest) / (2.0 * (kp + k[i]));
                let dn = (x[i] - 2.0 * km * rest) / (2.0 * (km + k[i]));
                let cand = if up >= -rest {
                    up
                } else if dn <= -rest {
                    dn
                } else {
                    -rest
                };
                let new = cand.clamp(lo[i], hi[i]);
                moved = moved.max((new - q[i]).abs());
                q[i] = new;
            }
            if moved < 1e-13 {
                break;
            }
        }
        q
    }

    #[test]
    fn scalar_example() {
        let p = params(&[("A", 0.05)], 0.035, 0.035);
        let x = payoffs(&[("A", 10.0)]);
        let (q, s) = solve_regime(&x, &p, 0.035).unwrap();
        assert!((s - 100.0 / 1.7).abs() < 1e-12);
        assert!((q["A"] - s).abs() < 1e-12);
        assert!((q["A"] - 10.0 / (2.0 * (0.035 + 0.05))).abs() < 1e-12);
        let plan = optimize(&x, &p, B).unwrap();
        assert_eq!(plan.regime, Regime::NetBuy);
        assert!((plan.objective - 100.0 / 0.34).abs() < 1e-9);
        assert!((objective(&plan.q, &x, &p, B).unwrap() - 294.1176470588).abs() < 1e-6);
    }

    #[test]
    fn zero_edge_zero_plan() {
        let p = params(&[("A", 0.05), ("B", 0.1)], 0.03, 0.02);
        let x = payoffs(&[("A", 0.0), ("B", 0.0)]);
        let plan = optimize(&x, &p, B).unwrap();
        assert_eq!(plan.regime, Regime::NetFlat);
        assert_eq!(plan.objective, 0.0);
        assert!(plan.q.values().all(|&v| v == 0.0));
        let zero: BTreeMap<String, f64> = [("A".into(), 0.0)].into();
        assert_eq!(objective(&zero, &x, &p, B).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_pair_nets_to_zero() {
        let p = params(&[("A", 0.05), ("B", 0.05)], 0.03, 0.03);
        let x = payoffs(&[("A", 7.0), ("B", -7.0)]);
        let (q, s) = solve_regime(&x, &p, 0.03).unwrap();
        assert_eq!(s, 0.0);
        assert!((q["A"] - 70.0).abs() < 1e-12 && (q["B"] + 70.0).abs() < 1e-12);
    }

    #[test]
    fn net_flat_examples() {
        let p = params(&[("A", 0.05), ("B", 0.05)], 0.03, 0.03);
        let q = solve_net_flat(&payoffs(&[("A", 4.0), ("B", 4.0)]), &p).unwrap();
        assert!(q.values().all(|&v| v == 0.0));
        let q = solve_net_flat(&payoffs(&[("A", 10.0), ("B", 0.0)]), &p).unwrap();
        assert!((q["A"] - 50.0).abs() < 1e-12 && (q["B"] + 50.0).abs() < 1e-12);
        let single =
            solve_net_flat(&payoffs(&[("A", 10.0)]), &params(&[("A", 0.05)], 0.1, 0.1)).unwrap();
        assert_eq!(single["A"], 0.0);
    }

    /// Equality-constrained QP by eliminating the last coordinate and solving the
    /// reduced normal equations with Gaussian elimination.
    fn elimination_oracle(x: &[f64], k: &[f64]) -> Vec<f64> {
        let n = x.len();
        let m = n - 1;
        // q_n = -sum q_i; maximize sum (x_i - x_n) q_i - sum k_i q_i^2 - k_n (sum q_i)^2
        let mut a = vec![vec![0.0; m + 1]; m];
        for i in 0..m {
            for j in 0..m {
                a[i][j] = 2.0 * k[n - 1] + if i == j { 2.0 * k[i] } else { 0.0 };
            }
            a[i][m] = x[i] - x[n - 1];
        }
        for c in 0..m {
            let piv = (c..m)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, piv);
            for r in 0..m {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for cc in c..=m {
                        a[r][cc] -= f * a[c][cc];
                    }
                }
            }
        }
        let mut q: Vec<f64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
        q.push(-q.iter().sum::<f64>());
        q
    }

    #[test]
    fn net_flat_matches_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            let k: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..0.5)).collect();
            let q = closed_form::net_flat(&x, &k);
            let o = elimination_oracle(&x, &k);
            for (a, b) in q.iter().zip(&o) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
            let l1: f64 = q.iter().map(|v| v.abs()).sum();
            assert!(q.iter().sum::<f64>().abs() <= 1e-9 * l1.max(1.0));
        }
    }

    #[test]
    fn net_flat_exact_in_rationals() {
        let r = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        let x = vec![r(10, 1), r(-3, 7), r(22, 3), r(0, 1)];
        let k = vec![r(1, 20), r(3, 100), r(1, 7), r(2, 5)];
        let q = closed_form::net_flat(&x, &k);
        let s = q.iter().fold(r(0, 1), |a, b| a + b);
        assert_eq!(s, r(0, 1));
    }

    #[test]
    fn all_positive_symmetric_energy_goes_net_buy() {
        let p = params(&[("A", 0.05), ("B", 0.08)], 0.03, 0.03);
        let x = payoffs(&[("A", 12.0), ("B", 9.0)]);
        let plan = optimize(&x, &p, B).unwrap();
        assert_eq!(plan.regime, Regime::NetBuy);
        // dense grid around the optimum
        let mut best = f64::NEG_INFINITY;
        for i in 0..=400 {
            for j in 0..=400 {
                let q = [i as f64 * 0.5, j as f64 * 0.5];
                best = best.max(objective_raw(&q, &[12.0, 9.0], &[0.05, 0.08], 0.03, 0.03));
            }
        }
        assert!(plan.objective >= best - 1e-6);
        assert!((plan.objective - best).abs() / best < 1e-3);
    }

    #[test]
    fn huge_energy_penalty_prefers_flat() {
        let p = params(&[("A", 0.05), ("B", 0.05)], 10.0, 10.0);
        let x = payoffs(&[("A", 30.0), ("B", 28.0)]);
        let plan = optimize(&x, &p, B).unwrap();
        let o = coordinate_ascent(
            &[30.0, 28.0],
            &[0.05, 0.05],
            10.0,
            10.0,
            &[-1e9; 2],
            &[1e9; 2],
        );
        let fo = objective_raw(&o, &[30.0, 28.0], &[0.05, 0.05], 10.0, 10.0);
        assert!(
            (plan.objective - fo).abs() <= 1e-6 * fo.abs().max(1.0),
            "{} vs {fo}",
            plan.objective
        );
        // net-flat beats the net-buy stationary point
        let (qp, _) = closed_form::regime(&[30.0, 28.0], &[0.05, 0.05], 10.0);
        let flat = closed_form::net_flat(&[30.0, 28.0], &[0.05, 0.05]);
        let f = |q: &[f64]| objective_raw(q, &[30.0, 28.0], &[0.05, 0.05], 10.0, 10.0);
        assert!(f(&flat) > 0.0);
        assert!(plan.objective >= f(&flat));
        assert!(plan.objective >= f(&qp));
    }

    #[test]
    fn clipping_inactive_matches_optimize() {
        let p = params(&[("A", 0.05), ("B", 0.08), ("C", 0.2)], 0.01, 0.02);
        let x = payoffs(&[("A", 12.0), ("B", -9.0), ("C", 5.0)]);
        let a = optimize(&x, &p, B).unwrap();
        let b = optimize_clipped(&x, &p, B).unwrap();
        for z in ["A", "B", "C"] {
            assert!((a.q[z] - b.q[z]).abs() < 1e-9);
        }
        assert_eq!(a.regime, b.regime);
    }

    #[test]
    fn single_inc_zone_with_negative_edge_is_zero() {
        let p = params(&[("A", 0.05)], 0.01, 0.02);
        let mut x = ExpectedPayoffs::default();
        x.x.insert("A".into(), -5.0);
        x.side_hint.insert("A".into(), Side::Inc);
        let plan = optimize_clipped(&x, &p, B).unwrap();
        assert!(plan.q.values().all(|&v| v == 0.0));
        assert_eq!(plan.objective, 0.0);
    }

    #[test]
    fn clipped_matches_projected_oracle_when_binding() {
        // A big INC pushes net buying; the small INC zone C would go short.
        let k = [0.02, 0.05, 0.3];
        let xs = [40.0, -3.0, 1.0];
        let p = params(&[("A", k[0]), ("B", k[1]), ("C", k[2])], 0.08, 0.08);
        let x = payoffs(&[("A", xs[0]), ("B", xs[1]), ("C", xs[2])]);
        let free = optimize(&x, &p, B).unwrap();
        assert!(free.q["C"] < 0.0, "instance must flip C: {:?}", free.q);
        let clipped = optimize_clipped(&x, &p, B).unwrap();
        let lo = [0.0, -1e9, 0.0];
        let hi = [1e9, 0.0, 1e9];
        let o = coordinate_ascent(&xs, &k, 0.08, 0.08, &lo, &hi);
        let fo = objective_raw(&o, &xs, &k, 0.08, 0.08);
        assert!(
            (clipped.objective - fo).abs() <= 1e-6 * fo.abs().max(1.0),
            "{} vs {fo}",
            clipped.objective
        );
        assert_eq!(clipped.q["C"], 0.0);
        assert!(clipped.objective <= free.objective + 1e-9);
    }

    #[test]
    fn payoff_estimates() {
        use crate::classifier::TrainMeta;
        use chrono::TimeZone;
        let m = SpikeModel {
            zone: "NORTH".into(),
            side: Side::Inc,
            gamma: 30.0,
            tau: 0.5,
            d: 2,
            beta: vec![0.0, 1.0],
            train_meta: TrainMeta {
                train_range: None,
                rows: 0,
                first_day: None,
                last_day: None,
                iterations: 0,
                converged: true,
                initial_loss: 0.0,
                final_loss: 0.0,
                grad_norm: 0.0,
            },
        };
        let ts = FixedOffset::east_opt(-4 * 3600)
            .unwrap()
            .with_ymd_and_hms(2024, 7, 1, 12, 0, 0)
            .unwrap();
        let mk = |x: f64, dart: f64| LabeledObservation {
            timestamp: ts,
            zone: "NORTH".into(),
            x: vec![x],
            y_neg: 0,
            y_pos: 0,
            realized_dart: dart,
            sources: vec![],
        };
        let cal = MarketCalendar::for_market(crate::calendar::Market::Nyiso);
        let val = vec![mk(1.0, -10.0), mk(1.0, -20.0), mk(-1.0, 500.0)];
        let t = estimate_payoffs(std::slice::from_ref(&m), &val, &cal).unwrap();
        let e = t.get("NORTH", Side::Inc).unwrap();
        assert_eq!((e.x, e.trades, e.eligible), (Some(15.0), 2, true));
        // a validation mean of -0.13 marks the side ineligible
        let val = vec![mk(1.0, 0.13)];
        let t = estimate_payoffs(std::slice::from_ref(&m), &val, &cal).unwrap();
        assert!(!t.is_eligible("NORTH", Side::Inc));
        assert!((t.get("NORTH", Side::Inc).unwrap().x.unwrap() + 0.13).abs() < 1e-15);
        // nothing fires: x undefined, ineligible
        let t = estimate_payoffs(&[m], &[mk(-1.0, -50.0)], &cal).unwrap();
        assert_eq!(t.get("NORTH", Side::Inc).unwrap().x, None);
    }

    #[test]
    fn plan_csv_has_one_row_per_zone() {
        use chrono::TimeZone;
        let p = params(&[("A", 0.05), ("B", 0.08)], 0.03, 0.03);
        let plan = optimize(&payoffs(&[("A", 12.0), ("B", 9.0)]), &p, B).unwrap();
        let ts = FixedOffset::east_opt(0)
            .unwrap()
            .with_ymd_and_hms(2024, 1, 1, 0, 0, 0)
            .unwrap();
        let mut buf = Vec::new();
        write_plans(&[(ts, plan)], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("timestamp,zone,q_mwh,regime,objective\n"));
        assert!(s.contains("net_buy"));
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let z = rng.random_range(1..=6);
        let x = (0..z).map(|_| rng.random_range(-50.0..50.0)).collect();
        let k = (0..z).map(|_| rng.random_range(0.01..0.5)).collect();
        (x, k, rng.random_range(0.0..0.1), rng.random_range(0.0..0.1))
    }

    fn to_inputs(x: &[f64], k: &[f64], kp: f64, km: f64) -> (ExpectedPayoffs, ImpactParams) {
        let names: Vec<String> = (0..x.len()).map(|i| format!("Z{i}")).collect();
        let xs: Vec<(&str, f64)> = names
            .iter()
            .map(String::as_str)
            .zip(x.iter().copied())
            .collect();
        let ks: Vec<(&str, f64)> = names
            .iter()
            .map(String::as_str)
            .zip(k.iter().copied())
            .collect();
        (payoffs(&xs), params(&ks, kp, km))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn scale_covariance(seed in 0u64..1_000_000, lambda in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, k, kp, _) = random_instance(&mut rng);
            let (q1, s1) = closed_form::regime(&x, &k, kp);
            let xl: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let (q2, s2) = closed_form::regime(&xl, &k, kp);
            prop_assert!((s2 - lambda * s1).abs() <= 1e-9 * (1.0 + s2.abs()));
            for (a, b) in q1.iter().zip(&q2) {
                prop_assert!((b - lambda * a).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            let f1 = objective_raw(&q1, &x, &k, kp, kp);
            let f2 = objective_raw(&q2, &xl, &k, kp, kp);
            prop_assert!((f2 - lambda * lambda * f1).abs() <= 1e-9 * (1.0 + f2.abs()));
        }

        #[test]
        fn stationarity_and_plan_invariants(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, k, kp, km) = random_instance(&mut rng);
            for ke in [kp, km] {
                let (q, s) = closed_form::regime(&x, &k, ke);
                let sum: f64 = q.iter().sum();
                prop_assert!((sum - s).abs() <= 1e-9 * (1.0 + s.abs()));
                for i in 0..x.len() {
                    let g = x[i] - 2.0 * ke * s - 2.0 * k[i] * q[i];
                    prop_assert!(g.abs() <= 1e-9 * (1.0 + x[i].abs()));
                }
            }
            let (xp, p) = to_inputs(&x, &k, kp, km);
            let plan = optimize(&xp, &p, B).unwrap();
            let s: f64 = plan.q.values().sum();
            prop_assert_eq!(s, plan.s);
            let l1: f64 = plan.q.values().map(|v| v.abs()).sum();
            match plan.regime {
                Regime::NetBuy => prop_assert!(plan.s > 0.0),
                Regime::NetSell => prop_assert!(plan.s < 0.0),
                Regime::NetFlat => prop_assert!(plan.s.abs() <= 1e-9 * l1.max(1.0)),
            }
            let f = objective(&plan.q, &xp, &p, B).unwrap();
            prop_assert!((f - plan.objective).abs() <= 1e-9 * f.abs().max(1.0));
            prop_assert!(plan.objective >= -1e-9);
        }

        #[test]
        fn clipping_never_beats_unconstrained(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, k, kp, km) = random_instance(&mut rng);
            let (mut xp, p) = to_inputs(&x, &k, kp, km);
            // random hints, some conflicting
            for z in xp.x.keys() {
                let side = if rng.random_bool(0.5) { Side::Inc } else { Side::Dec };
                xp.side_hint.insert(z.clone(), side);
            }
            let free = optimize(&xp, &p, B).unwrap();
            let clipped = optimize_clipped(&xp, &p, B).unwrap();
            prop_assert!(clipped.objective <= free.objective + 1e-9 * free.objective.abs().max(1.0));
            // and matches the projected oracle on the kept zones
            let kept = clip_sides(&xp);
            let zs: Vec<&String> = kept.x.keys().collect();
            if !zs.is_empty() {
                let xs: Vec<f64> = zs.iter().map(|z| kept.x[*z]).collect();
                let ks: Vec<f64> = zs.iter().map(|z| p.k_z[*z]).collect();
                let lo: Vec<f64> = zs.iter().map(|z| if kept.side_hint[*z] == Side::Inc { 0.0 } else { -1e9 }).collect();
                let hi: Vec<f64> = zs.iter().map(|z| if kept.side_hint[*z] == Side::Inc { 1e9 } else { 0.0 }).collect();
                let o = coordinate_ascent(&xs, &ks, kp, km, &lo, &hi);
                let fo = objective_raw(&o, &xs, &ks, kp, km);
                prop_assert!((clipped.objective - fo).abs() <= 1e-6 * fo.abs().max(1.0),
                    "clipped {} oracle {}", clipped.objective, fo);
                for (z, q) in &clipped.q {
                    let s = kept.side_hint[z].sign();
                    prop_assert!(s * q >= 0.0);
                }
            }
        }
    }
}
