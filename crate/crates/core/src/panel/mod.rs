//! Hourly multi-zone market panel.

mod io;
mod stats;

use std::collections::{BTreeSet, HashMap};

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::calendar::{DateRange, Market};
use crate::error::{Error, Result, RowViolation};

pub(crate) use io::{format_ts, parse_ts};
pub use io::{load_panel, read_panel, write_panel, PANEL_COLUMNS};
pub use stats::{correlation_matrix, empirical_quantiles, pearson, CorrelationField};

/// One zone-hour observation. `timestamp` is the start of the hour in market
/// local time (the offset is carried explicitly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyRecord {
    pub timestamp: DateTime<FixedOffset>,
    pub zone: String,
    pub da_price: f64,
    pub rt_price: f64,
    pub dart: f64,
    pub zonal_load_forecast: f64,
    pub zonal_load_actual: f64,
    pub system_load_forecast: f64,
    pub loss_component: Option<f64>,
    pub congestion_component: Option<f64>,
    /// 0 for the first occurrence of a local wall-clock hour, 1 for the repeated
    /// fall-back hour.
    pub occurrence: u8,
}

impl HourlyRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        timestamp: DateTime<FixedOffset>,
        zone: impl Into<String>,
        da_price: f64,
        rt_price: f64,
        zonal_load_forecast: f64,
        zonal_load_actual: f64,
        system_load_forecast: f64,
        loss_component: Option<f64>,
        congestion_component: Option<f64>,
    ) -> Self {
        HourlyRecord {
            timestamp,
            zone: zone.into(),
            da_price,
            rt_price,
            dart: da_price - rt_price,
            zonal_load_forecast,
            zonal_load_actual,
            system_load_forecast,
            loss_component,
            congestion_component,
            occurrence: 0,
        }
    }

    pub fn local(&self) -> NaiveDateTime {
        self.timestamp.naive_local()
    }

    pub fn local_date(&self) -> NaiveDate {
        self.timestamp.naive_local().date()
    }

    /// Invariant problems with this record, if any.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [("da_price", self.da_price), ("rt_price", self.rt_price)] {
            if !v.is_finite() {
                p.push(format!("{name} is not finite"));
            }
        }
        for (name, v) in [
            ("zonal_load_forecast", self.zonal_load_forecast),
            ("zonal_load_actual", self.zonal_load_actual),
            ("system_load_forecast", self.system_load_forecast),
        ] {
            if !v.is_finite() || v < 0.0 {
                p.push(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        for (name, v) in [
            ("loss_component", self.loss_component),
            ("congestion_component", self.congestion_component),
        ] {
            if let Some(v) = v {
                if !v.is_finite() {
                    p.push(format!("{name} is not finite"));
                }
            }
        }
        if self.dart != self.da_price - self.rt_price {
            p.push(format!(
                "dart {} != da_price - rt_price = {}",
                self.dart,
                self.da_price - self.rt_price
            ));
        }
        if self.timestamp.timestamp() % 3600 != 0 {
            p.push("timestamp is not on an hour boundary".to_string());
        }
        p
    }
}

/// Immutable, validated panel sorted by (zone, timestamp).
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    market: Market,
    records: Vec<HourlyRecord>,
    zones: Vec<String>,
    by_instant: HashMap<(usize, i64), usize>,
    by_local: HashMap<(usize, NaiveDateTime, u8), usize>,
}

impl Panel {
    /// Validates and indexes `records`. Violations are reported with their
    /// position in the input (1-based).
    pub fn from_records(market: Market, mut records: Vec<HourlyRecord>) -> Result<Self> {
        let mut violations = Vec::new();
        for (i, r) in records.iter().enumerate() {
            for msg in r.problems() {
                violations.push(RowViolation {
                    row: i + 1,
                    message: msg,
                });
            }
        }
        let mut seen: HashMap<(&str, i64), usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if let Some(first) = seen.insert((r.zone.as_str(), r.timestamp.timestamp()), i + 1) {
                violations.push(RowViolation {
                    row: i + 1,
                    message: format!(
                        "duplicate key ({}, {}) first seen at row {first}",
                        r.timestamp.to_rfc3339(),
                        r.zone
                    ),
                });
            }
        }
        if !violations.is_empty() {
            return Err(Error::InvariantViolation(violations));
        }

        records.sort_by(|a, b| {
            a.zone
                .cmp(&b.zone)
                .then(a.timestamp.timestamp().cmp(&b.timestamp.timestamp()))
        });

        let zones: Vec<String> = records
            .iter()
            .map(|r| r.zone.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let zone_idx: HashMap<&str, usize> = zones
            .iter()
            .enumerate()
            .map(|(i, z)| (z.as_str(), i))
            .collect();

        let mut by_instant = HashMap::with_capacity(records.len());
        let mut by_local = HashMap::with_capacity(records.len());
        for (i, r) in records.iter_mut().enumerate() {
            let zi = zone_idx[r.zone.as_str()];
            by_instant.insert((zi, r.timestamp.timestamp()), i);
            let mut occ = 0u8;
            while by_local.contains_key(&(zi, r.timestamp.naive_local(), occ)) {
                occ += 1;
            }
            r.occurrence = occ;
            by_local.insert((zi, r.timestamp.naive_local(), occ), i);
        }

        Ok(Panel {
            market,
            records,
            zones,
            by_instant,
            by_local,
        })
    }

    pub fn market(&self) -> Market {
        self.market
    }

    pub fn records(&self) -> &[HourlyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Zones in sorted order.
    pub fn zones(&self) -> &[String] {
        &self.zones
    }

    pub fn zone_index(&self, zone: &str) -> Option<usize> {
        self.zones.binary_search_by(|z| z.as_str().cmp(zone)).ok()
    }

    /// Records of one zone in time order.
    pub fn zone_records(&self, zone: &str) -> &[HourlyRecord] {
        let lo = self.records.partition_point(|r| r.zone.as_str() < zone);
        let hi = self.records.partition_point(|r| r.zone.as_str() <= zone);
        &self.records[lo..hi]
    }

    pub fn get(&self, zone: &str, ts: &DateTime<FixedOffset>) -> Option<&HourlyRecord> {
        let zi = self.zone_index(zone)?;
        self.by_instant
            .get(&(zi, ts.timestamp()))
            .map(|&i| &self.records[i])
    }

    /// Lookup by local wall-clock hour and occurrence index.
    pub fn get_local(
        &self,
        zone: &str,
        local: NaiveDateTime,
        occurrence: u8,
    ) -> Option<&HourlyRecord> {
        let zi = self.zone_index(zone)?;
        self.get_local_idx(zi, local, occurrence)
    }

    pub(crate) fn get_local_idx(
        &self,
        zone_idx: usize,
        local: NaiveDateTime,
        occurrence: u8,
    ) -> Option<&HourlyRecord> {
        self.by_local
            .get(&(zone_idx, local, occurrence))
            .or_else(|| self.by_local.get(&(zone_idx, local, 0)))
            .map(|&i| &self.records[i])
    }

    /// Mean actual zonal load per zone over `window` (all records when `None`).
    pub fn mean_actual_loads(
        &self,
        window: Option<DateRange>,
    ) -> std::collections::BTreeMap<String, f64> {
        let mut acc: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
        for r in &self.records {
            if window.is_none_or(|w| w.contains(r.local_date())) {
                let e = acc.entry(r.zone.clone()).or_insert((0.0, 0));
                e.0 += r.zonal_load_actual;
                e.1 += 1;
            }
        }
        acc.into_iter()
            .map(|(z, (s, n))| (z, s / n as f64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(h: u32) -> DateTime<FixedOffset> {
        FixedOffset::east_opt(-4 * 3600)
            .unwrap()
            .with_ymd_and_hms(2024, 7, 1, h, 0, 0)
            .unwrap()
    }

    #[test]
    fn dart_is_recomputed() {
        let r = HourlyRecord::new(ts(0), "A", 10.0, 7.0, 1.0, 1.0, 2.0, None, None);
        assert_eq!(r.dart, 3.0);
        assert!(r.problems().is_empty());
    }

    #[test]
    fn duplicate_key_rejected() {
        let r = HourlyRecord::new(ts(0), "A", 10.0, 7.0, 1.0, 1.0, 2.0, None, None);
        let err = Panel::from_records(Market::Nyiso, vec![r.clone(), r]).unwrap_err();
        match err {
            Error::InvariantViolation(v) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].row, 2);
                assert!(v[0].message.contains("duplicate key"));
                assert!(v[0].message.contains("A"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_load_rejected() {
        let r = HourlyRecord::new(ts(0), "A", 10.0, 7.0, -1.0, 1.0, 2.0, None, None);
        assert!(matches!(
            Panel::from_records(Market::Nyiso, vec![r]),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn sorted_by_zone_then_time() {
        let recs = vec![
            HourlyRecord::new(ts(1), "B", 1.0, 0.0, 1.0, 1.0, 2.0, None, None),
            HourlyRecord::new(ts(0), "B", 1.0, 0.0, 1.0, 1.0, 2.0, None, None),
            HourlyRecord::new(ts(0), "A", 1.0, 0.0, 1.0, 1.0, 2.0, None, None),
        ];
        let p = Panel::from_records(Market::Nyiso, recs).unwrap();
        let keys: Vec<(String, u32)> = p
            .records()
            .iter()
            .map(|r| (r.zone.clone(), chrono::Timelike::hour(&r.timestamp)))
            .collect();
        assert_eq!(
            keys,
            vec![("A".into(), 0), ("B".into(), 0), ("B".into(), 1)]
        );
        assert_eq!(p.zone_records("B").len(), 2);
        assert!(p.get("A", &ts(0)).is_some());
        assert!(p.get("A", &ts(1)).is_none());
    }

    #[test]
    fn fall_back_hour_gets_occurrence_index() {
        let edt = FixedOffset::east_opt(-4 * 3600).unwrap();
        let est = FixedOffset::east_opt(-5 * 3600).unwrap();
        let a = edt.with_ymd_and_hms(2024, 11, 3, 1, 0, 0).unwrap();
        let b = est.with_ymd_and_hms(2024, 11, 3, 1, 0, 0).unwrap();
        let recs = vec![
            HourlyRecord::new(a, "A", 1.0, 0.0, 1.0, 1.0, 2.0, None, None),
            HourlyRecord::new(b, "A", 2.0, 0.0, 1.0, 1.0, 2.0, None, None),
        ];
        let p = Panel::from_records(Market::Nyiso, recs).unwrap();
        assert_eq!(p.records()[0].occurrence, 0);
        assert_eq!(p.records()[1].occurrence, 1);
        assert_eq!(p.get_local("A", a.naive_local(), 1).unwrap().da_price, 2.0);
    }
}
