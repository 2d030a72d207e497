//! Gate-closure-safe feature vectors and spike labels.
//!
//! Layout of `x`: for each pooled zone in order, `[load_forecast, dart_lag.., load_err_lag..]`;
//! then `system_load_forecast` if enabled; then the calendar block
//! `[weekend, holiday, hour, month, winter, summer]` (each switchable).
//!
//! A lag of `24k` hours reads the same wall-clock hour on day
//! `last_settled_day(D) - (k - 1)`, where `D` is the operating day. Literal
//! 24h lags of afternoon hours are not settled at gate closure.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, FixedOffset, Timelike};
use serde::{Deserialize, Serialize};

use crate::calendar::{DateRange, MarketCalendar, Season};
use crate::error::{Error, Result};
use crate::panel::{HourlyRecord, Panel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalendarFeatures {
    pub weekend: bool,
    pub holiday: bool,
    pub hour_of_day: bool,
    pub month_of_year: bool,
    /// Winter and Summer flags (Shoulder is the baseline).
    pub season: bool,
}

impl Default for CalendarFeatures {
    fn default() -> Self {
        CalendarFeatures {
            weekend: true,
            holiday: true,
            hour_of_day: true,
            month_of_year: true,
            season: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub lag_hours: Vec<u32>,
    pub load_error_lags: Vec<u32>,
    pub include_system_load: bool,
    pub calendar_features: CalendarFeatures,
    pub zones_pooled: Vec<String>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            lag_hours: vec![24, 48],
            load_error_lags: vec![24],
            include_system_load: false,
            calendar_features: CalendarFeatures::default(),
            zones_pooled: Vec::new(),
        }
    }
}

impl FeatureSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.lag_problems();
        if self.zones_pooled.is_empty() {
            p.push("zones_pooled is empty".into());
        }
        p
    }

    /// Lag checks alone, for configs that fill the zone list from the panel.
    pub fn lag_problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, lags) in [
            ("lag_hours", &self.lag_hours),
            ("load_error_lags", &self.load_error_lags),
        ] {
            for &l in lags {
                if l < 24 || l % 24 != 0 {
                    p.push(format!(
                        "{name}: lag {l}h must be a positive multiple of 24 (the settlement delay at gate closure)"
                    ));
                }
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn calendar_width(&self) -> usize {
        let c = &self.calendar_features;
        [c.weekend, c.holiday, c.hour_of_day, c.month_of_year]
            .iter()
            .filter(|&&b| b)
            .count()
            + if c.season { 2 } else { 0 }
    }

    /// Feature dimension implied by the spec (without intercept).
    pub fn dimension(&self) -> usize {
        self.zones_pooled.len() * (1 + self.lag_hours.len() + self.load_error_lags.len())
            + usize::from(self.include_system_load)
            + self.calendar_width()
    }

    /// Column metadata in layout order.
    pub fn columns(&self) -> Vec<FeatureColumn> {
        let mut cols = Vec::with_capacity(self.dimension());
        for z in &self.zones_pooled {
            cols.push(FeatureColumn::new(
                format!("{z}.load_forecast"),
                SourceKind::Forecast,
                Some(z),
            ));
            for l in &self.lag_hours {
                cols.push(FeatureColumn::new(
                    format!("{z}.dart_lag{l}"),
                    SourceKind::Realized,
                    Some(z),
                ));
            }
            for l in &self.load_error_lags {
                cols.push(FeatureColumn::new(
                    format!("{z}.load_err_lag{l}"),
                    SourceKind::Realized,
                    Some(z),
                ));
            }
        }
        if self.include_system_load {
            let z = &self.zones_pooled[0];
            cols.push(FeatureColumn::new(
                "system_load_forecast",
                SourceKind::Forecast,
                Some(z),
            ));
        }
        let c = &self.calendar_features;
        for (on, name) in [
            (c.weekend, "weekend"),
            (c.holiday, "holiday"),
            (c.hour_of_day, "hour"),
            (c.month_of_year, "month"),
            (c.season, "winter"),
            (c.season, "summer"),
        ] {
            if on {
                cols.push(FeatureColumn::new(name, SourceKind::Calendar, None));
            }
        }
        cols
    }
}

/// How a feature's source becomes known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Settled market outcome, known once its hour ends.
    Realized,
    /// Day-ahead forecast, published before the gate by the calendar's lead time.
    Forecast,
    /// Deterministic function of the operating hour.
    Calendar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: SourceKind,
    pub zone: Option<String>,
}

impl FeatureColumn {
    fn new(name: impl Into<String>, kind: SourceKind, zone: Option<&String>) -> Self {
        FeatureColumn {
            name: name.into(),
            kind,
            zone: zone.cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledObservation {
    pub timestamp: DateTime<FixedOffset>,
    pub zone: String,
    pub x: Vec<f64>,
    pub y_neg: u8,
    pub y_pos: u8,
    pub realized_dart: f64,
    /// Start instant (unix seconds) of the panel row behind each column; `None`
    /// for calendar columns or when provenance was not recorded.
    #[serde(skip)]
    pub sources: Vec<Option<i64>>,
}

impl LabeledObservation {
    pub fn set_labels(&mut self, gamma_neg: f64, gamma_pos: f64) {
        self.y_neg = u8::from(self.realized_dart <= -gamma_neg);
        self.y_pos = u8::from(self.realized_dart >= gamma_pos);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub columns: Vec<FeatureColumn>,
    pub observations: Vec<LabeledObservation>,
    /// Zone-hours skipped because a lagged source was missing.
    pub dropped: usize,
}

impl FeatureSet {
    pub fn dimension(&self) -> usize {
        self.columns.len()
    }

    /// Observations whose local operating day falls in `range`.
    pub fn in_range(&self, range: DateRange) -> Vec<&LabeledObservation> {
        self.observations
            .iter()
            .filter(|o| range.contains(o.timestamp.naive_local().date()))
            .collect()
    }

    pub fn relabel(&mut self, gamma_neg: f64, gamma_pos: f64) {
        for o in &mut self.observations {
            o.set_labels(gamma_neg, gamma_pos);
        }
    }
}

/// Builds one observation per (hour, pooled zone).
/// Pooled feature values and their source instants for one hour.
type SharedRow = (Vec<f64>, Vec<Option<i64>>);

pub fn build_features(
    panel: &Panel,
    spec: &FeatureSpec,
    calendar: &MarketCalendar,
    thresholds: (f64, f64),
) -> Result<FeatureSet> {
    spec.validate()?;
    let (gamma_neg, gamma_pos) = thresholds;
    if !(gamma_neg > 0.0 && gamma_pos > 0.0) {
        return Err(Error::Config(vec![format!(
            "spike thresholds must be positive, got ({gamma_neg}, {gamma_pos})"
        )]));
    }
    let zone_idx: Vec<usize> = spec
        .zones_pooled
        .iter()
        .map(|z| {
            panel
                .zone_index(z)
                .ok_or_else(|| Error::UnknownZone(z.clone()))
        })
        .collect::<Result<_>>()?;

    let columns = spec.columns();
    let d = columns.len();
    let mut cache: BTreeMap<i64, Option<SharedRow>> = BTreeMap::new();
    let mut observations = Vec::new();
    let mut dropped = 0usize;

    for z in &spec.zones_pooled {
        for rec in panel.zone_records(z) {
            let key = rec.timestamp.timestamp();
            let entry = cache
                .entry(key)
                .or_insert_with(|| feature_row(panel, spec, calendar, &zone_idx, rec, d));
            match entry {
                Some((x, src)) => {
                    let mut o = LabeledObservation {
                        timestamp: rec.timestamp,
                        zone: z.clone(),
                        x: x.clone(),
                        y_neg: 0,
                        y_pos: 0,
                        realized_dart: rec.dart,
                        sources: src.clone(),
                    };
                    o.set_labels(gamma_neg, gamma_pos);
                    observations.push(o);
                }
                None => dropped += 1,
            }
        }
    }
    if observations.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no hour has every lagged source available ({dropped} zone-hours dropped)"
        )));
    }
    observations.sort_by(|a, b| {
        a.timestamp
            .timestamp()
            .cmp(&b.timestamp.timestamp())
            .then_with(|| a.zone.cmp(&b.zone))
    });
    Ok(FeatureSet {
        columns,
        observations,
        dropped,
    })
}

fn feature_row(
    panel: &Panel,
    spec: &FeatureSpec,
    calendar: &MarketCalendar,
    zone_idx: &[usize],
    target: &HourlyRecord,
    d: usize,
) -> Option<(Vec<f64>, Vec<Option<i64>>)> {
    let local = target.local();
    let day = local.date();
    let settled = calendar.last_settled_day(day);
    let lagged = |zi: usize, lag: u32| -> Option<&HourlyRecord> {
        let k = (lag / 24) as i64;
        let src_day = settled - Duration::days(k - 1);
        panel.get_local_idx(zi, src_day.and_time(local.time()), target.occurrence)
    };

    let mut x = Vec::with_capacity(d);
    let mut src = Vec::with_capacity(d);
    for &zi in zone_idx {
        let same = panel.get(&panel.zones()[zi], &target.timestamp)?;
        x.push(same.zonal_load_forecast);
        src.push(Some(same.timestamp.timestamp()));
        for &l in &spec.lag_hours {
            let r = lagged(zi, l)?;
            x.push(r.dart);
            src.push(Some(r.timestamp.timestamp()));
        }
        for &l in &spec.load_error_lags {
            let r = lagged(zi, l)?;
            x.push(r.zonal_load_actual - r.zonal_load_forecast);
            src.push(Some(r.timestamp.timestamp()));
        }
    }
    if spec.include_system_load {
        let r = panel.get(&panel.zones()[zone_idx[0]], &target.timestamp)?;
        x.push(r.system_load_forecast);
        src.push(Some(r.timestamp.timestamp()));
    }
    let c = &spec.calendar_features;
    let season = calendar.season(local.month());
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    for (on, v) in [
        (c.weekend, flag(MarketCalendar::is_weekend(day))),
        (c.holiday, flag(calendar.is_holiday(day))),
        (c.hour_of_day, local.hour() as f64),
        (c.month_of_year, local.month() as f64),
        (c.season, flag(season == Season::Winter)),
        (c.season, flag(season == Season::Summer)),
    ] {
        if on {
            x.push(v);
            src.push(None);
        }
    }
    debug_assert_eq!(x.len(), d);
    Some((x, src))
}

/// Per-column affine standardization fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per column; constant columns get
    /// unit scale so they map to zero.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a LabeledObservation>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for o in rows {
            if n == 0 {
                mean = vec![0.0; o.x.len()];
                m2 = vec![0.0; o.x.len()];
            } else if o.x.len() != mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: mean.len(),
                    got: o.x.len(),
                });
            }
            n += 1;
            for (j, &v) in o.x.iter().enumerate() {
                let delta = v - mean[j];
                mean[j] += delta / n as f64;
                m2[j] += delta * (v - mean[j]);
            }
        }
        if n == 0 {
            return Err(Error::EmptySeries);
        }
        let std = m2
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply_all(&self, obs: &mut [LabeledObservation]) {
        for o in obs {
            self.apply(&mut o.x);
        }
    }
}

/// Per-column leakage verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnAudit {
    pub column: String,
    pub pass: bool,
    /// Smallest (gate closure - availability) over all observations, in hours.
    /// `None` for calendar columns.
    pub min_slack_hours: Option<f64>,
    pub violations: usize,
    pub first_violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub pass: bool,
    pub observations: usize,
    pub columns: Vec<ColumnAudit>,
}

impl AuditReport {
    pub fn failing_columns(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.column.as_str())
            .collect()
    }
}

/// Instant at which a source row becomes known, by kind.
pub fn available_at(
    kind: SourceKind,
    source_start: DateTime<FixedOffset>,
    calendar: &MarketCalendar,
) -> DateTime<FixedOffset> {
    match kind {
        SourceKind::Realized => source_start + Duration::hours(1),
        SourceKind::Forecast => {
            calendar.gate_closure_for(source_start.naive_local().date())
                - Duration::minutes(calendar.forecast_lead_minutes)
        }
        SourceKind::Calendar => source_start,
    }
}

/// Recomputes, from the panel rows each feature was read from, when that
/// information became available and compares it with the gate closure of the
/// observation's operating day. A column passes iff every source is available
/// strictly before gate closure.
pub fn leakage_audit(set: &FeatureSet, panel: &Panel, calendar: &MarketCalendar) -> AuditReport {
    let mut cols: Vec<ColumnAudit> = set
        .columns
        .iter()
        .map(|c| ColumnAudit {
            column: c.name.clone(),
            pass: true,
            min_slack_hours: None,
            violations: 0,
            first_violation: None,
        })
        .collect();

    for o in &set.observations {
        let gate = calendar.gate_closure_for(o.timestamp.naive_local().date());
        for (j, meta) in set.columns.iter().enumerate() {
            let audit = &mut cols[j];
            if meta.kind == SourceKind::Calendar {
                continue;
            }
            let fail = |a: &mut ColumnAudit, why: String| {
                a.pass = false;
                a.violations += 1;
                if a.first_violation.is_none() {
                    a.first_violation = Some(why);
                }
            };
            let Some(start) = o.sources.get(j).copied().flatten() else {
                fail(
                    audit,
                    format!("{} {}: no provenance", o.timestamp.to_rfc3339(), o.zone),
                );
                continue;
            };
            let zone = meta.zone.as_deref().unwrap_or(&o.zone);
            let Some(row) = DateTime::from_timestamp(start, 0)
                .and_then(|utc| panel.get(zone, &utc.fixed_offset()))
            else {
                fail(
                    audit,
                    format!(
                        "{} {}: source row {start} not in panel",
                        o.timestamp.to_rfc3339(),
                        o.zone
                    ),
                );
                continue;
            };
            let avail = available_at(meta.kind, row.timestamp, calendar);
            let slack = (gate - avail).num_seconds() as f64 / 3600.0;
            audit.min_slack_hours =
                Some(audit.min_slack_hours.map_or(slack, |s: f64| s.min(slack)));
            if avail >= gate {
                fail(
                    audit,
                    format!(
                        "{} {}: source {} available {} at or after gate {}",
                        o.timestamp.to_rfc3339(),
                        o.zone,
                        row.timestamp.to_rfc3339(),
                        avail.to_rfc3339(),
                        gate.to_rfc3339()
                    ),
                );
            }
        }
    }
    AuditReport {
        pass: cols.iter().all(|c| c.pass),
        observations: set.observations.len(),
        columns: cols,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    d: usize,
    columns: Vec<FeatureColumn>,
}

/// Writes `timestamp, zone, y_neg, y_pos, realized_dart, x_0..x_{d-1}`.
pub fn write_observations<W: Write>(set: &FeatureSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "timestamp".to_string(),
        "zone".into(),
        "y_neg".into(),
        "y_pos".into(),
        "realized_dart".into(),
    ];
    header.extend((0..set.dimension()).map(|j| format!("x_{j}")));
    w.write_record(&header)?;
    for o in &set.observations {
        let mut row = vec![
            crate::panel::format_ts(&o.timestamp),
            o.zone.clone(),
            o.y_neg.to_string(),
            o.y_pos.to_string(),
            o.realized_dart.to_string(),
        ];
        row.extend(o.x.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()
        .map_err(|e| Error::io("writing observations", e))?;
    Ok(())
}

pub fn sidecar_json(set: &FeatureSet) -> String {
    serde_json::to_string_pretty(&Sidecar {
        d: set.dimension(),
        columns: set.columns.clone(),
    })
    .expect("sidecar serializes")
}

/// Saves `<stem>.csv` and `<stem>.columns.json` next to each other.
pub fn save_observations(set: &FeatureSet, csv_path: &Path) -> Result<()> {
    let f = std::fs::File::create(csv_path)
        .map_err(|e| Error::io(format!("creating {}", csv_path.display()), e))?;
    write_observations(set, std::io::BufWriter::new(f))?;
    let side = csv_path.with_extension("columns.json");
    std::fs::write(&side, sidecar_json(set))
        .map_err(|e| Error::io(format!("writing {}", side.display()), e))
}

pub fn load_observations(csv_path: &Path) -> Result<FeatureSet> {
    let side = csv_path.with_extension("columns.json");
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::io(format!("reading {}", side.display()), e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let f = std::fs::File::open(csv_path)
        .map_err(|e| Error::io(format!("opening {}", csv_path.display()), e))?;
    let observations = read_observations(f, sidecar.d, csv_path)?;
    Ok(FeatureSet {
        columns: sidecar.columns,
        observations,
        dropped: 0,
    })
}

pub fn read_observations<R: Read>(
    reader: R,
    d: usize,
    path: &Path,
) -> Result<Vec<LabeledObservation>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let width = rdr.headers()?.len();
    if width != d + 5 {
        return Err(Error::DimensionMismatch {
            expected: d + 5,
            got: width,
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let malformed = |message: String| Error::MalformedFile {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| malformed(format!("column {k}: `{}` is not a number", &rec[k])))
        };
        let flag = |k: usize| -> Result<u8> {
            match &rec[k] {
                "0" => Ok(0),
                "1" => Ok(1),
                s => Err(malformed(format!("label `{s}` is not 0/1"))),
            }
        };
        out.push(LabeledObservation {
            timestamp: crate::panel::parse_ts(&rec[0]).map_err(malformed)?,
            zone: rec[1].to_string(),
            y_neg: flag(2)?,
            y_pos: flag(3)?,
            realized_dart: num(4)?,
            x: (5..width).map(num).collect::<Result<_>>()?,
            sources: Vec::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::Market;
    use chrono::{NaiveDate, TimeZone, Utc};
    use proptest::prelude::*;

    fn synthetic_panel(cal: &MarketCalendar, zones: &[&str], days: i64) -> Panel {
        let start = Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap();
        let mut recs = Vec::new();
        for h in 0..days * 24 {
            let ts = cal.to_local(start + Duration::hours(h));
            for (zi, z) in zones.iter().enumerate() {
                let v = ((h * 7 + zi as i64 * 13) % 41) as f64 - 20.0;
                recs.push(HourlyRecord::new(
                    ts,
                    *z,
                    30.0 + v,
                    30.0,
                    1000.0 + h as f64,
                    1005.0 + h as f64 + zi as f64,
                    5000.0,
                    None,
                    None,
                ));
            }
        }
        Panel::from_records(cal.market, recs).unwrap()
    }

    fn spec(zones: &[&str]) -> FeatureSpec {
        FeatureSpec {
            zones_pooled: zones.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn nyiso_dimension_is_fifty() {
        let zones = [
            "CAPITL", "CENTRL", "DUNWOD", "GENESE", "HUDVL", "LONGIL", "MHKVL", "MILLWD", "NORTH",
            "NYC", "WEST",
        ];
        let s = spec(&zones);
        assert_eq!(s.dimension(), 50);
        assert_eq!(s.columns().len(), 50);
        assert_eq!(s.columns()[49].name, "summer");
    }

    #[test]
    fn labels_follow_thresholds() {
        let mut o = LabeledObservation {
            timestamp: FixedOffset::east_opt(0)
                .unwrap()
                .with_ymd_and_hms(2024, 1, 1, 0, 0, 0)
                .unwrap(),
            zone: "A".into(),
            x: vec![],
            y_neg: 0,
            y_pos: 0,
            realized_dart: -35.0,
            sources: vec![],
        };
        o.set_labels(30.0, 5.0);
        assert_eq!((o.y_neg, o.y_pos), (1, 0));
        o.realized_dart = 0.0;
        o.set_labels(30.0, 5.0);
        assert_eq!((o.y_neg, o.y_pos), (0, 0));
    }

    #[test]
    fn lags_resolve_to_settled_days() {
        let cal = MarketCalendar::for_market(Market::Nyiso);
        let p = synthetic_panel(&cal, &["A", "B"], 10);
        let set = build_features(&p, &spec(&["A", "B"]), &cal, (30.0, 5.0)).unwrap();
        assert!(set.dropped > 0);
        let o = set
            .observations
            .iter()
            .find(|o| {
                o.zone == "A"
                    && o.timestamp.naive_local().date()
                        == NaiveDate::from_ymd_opt(2024, 3, 6).unwrap()
            })
            .unwrap();
        let day = o.timestamp.naive_local().date();
        let lag24 = p
            .get_local(
                "A",
                (day - Duration::days(2)).and_time(o.timestamp.time()),
                0,
            )
            .unwrap();
        let lag48 = p
            .get_local(
                "A",
                (day - Duration::days(3)).and_time(o.timestamp.time()),
                0,
            )
            .unwrap();
        assert_eq!(o.x[1], lag24.dart);
        assert_eq!(o.x[2], lag48.dart);
        assert_eq!(o.x[3], lag24.zonal_load_actual - lag24.zonal_load_forecast);
    }

    #[test]
    fn audit_passes_for_every_market() {
        for m in Market::ALL {
            let cal = MarketCalendar::for_market(m);
            let p = synthetic_panel(&cal, &["A", "B"], 6);
            let set = build_features(&p, &spec(&["A", "B"]), &cal, (30.0, 5.0)).unwrap();
            let rep = leakage_audit(&set, &p, &cal);
            assert!(rep.pass, "{m}: {:?}", rep.failing_columns());
        }
    }

    #[test]
    fn injected_same_day_lag_fails_by_name() {
        let cal = MarketCalendar::for_market(Market::Nyiso);
        let p = synthetic_panel(&cal, &["A"], 6);
        let mut set = build_features(&p, &spec(&["A"]), &cal, (30.0, 5.0)).unwrap();
        let o = &mut set.observations[5];
        let same_day = o.timestamp - Duration::hours(1);
        o.sources[1] = Some(same_day.timestamp());
        let rep = leakage_audit(&set, &p, &cal);
        assert!(!rep.pass);
        assert_eq!(rep.failing_columns(), vec!["A.dart_lag24"]);
    }

    #[test]
    fn slack_matches_brute_force() {
        let cal = MarketCalendar::for_market(Market::Nyiso);
        let p = synthetic_panel(&cal, &["A"], 6);
        let set = build_features(&p, &spec(&["A"]), &cal, (30.0, 5.0)).unwrap();
        let rep = leakage_audit(&set, &p, &cal);
        // Brute force: source hour on D-2 ends (start + 1h); gate is D-1 at 05:00 local.
        let mut expect = f64::INFINITY;
        for o in &set.observations {
            let d = o.timestamp.naive_local().date();
            let gate_local = (d - Duration::days(1)).and_hms_opt(5, 0, 0).unwrap();
            let gate = cal
                .offset_for_local(gate_local)
                .from_local_datetime(&gate_local)
                .unwrap();
            let src = DateTime::from_timestamp(o.sources[1].unwrap(), 0).unwrap();
            let slack = (gate.timestamp() - (src.timestamp() + 3600)) as f64 / 3600.0;
            expect = expect.min(slack);
        }
        let col = &rep.columns[1];
        assert_eq!(col.column, "A.dart_lag24");
        assert!(col.pass);
        assert_eq!(col.min_slack_hours, Some(expect));
        assert!(expect >= 0.0);
    }

    #[test]
    fn unknown_zone_and_bad_lag() {
        let cal = MarketCalendar::for_market(Market::Nyiso);
        let p = synthetic_panel(&cal, &["A"], 4);
        assert!(matches!(
            build_features(&p, &spec(&["Z"]), &cal, (30.0, 5.0)),
            Err(Error::UnknownZone(_))
        ));
        let mut s = spec(&["A"]);
        s.lag_hours = vec![12];
        assert!(matches!(
            build_features(&p, &s, &cal, (30.0, 5.0)),
            Err(Error::Config(_))
        ));
        let short = synthetic_panel(&cal, &["A"], 2);
        assert!(matches!(
            build_features(&short, &spec(&["A"]), &cal, (30.0, 5.0)),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn build_is_deterministic_and_round_trips() {
        let cal = MarketCalendar::for_market(Market::Isone);
        let p = synthetic_panel(&cal, &["A", "B"], 5);
        let s = spec(&["A", "B"]);
        let a = build_features(&p, &s, &cal, (30.0, 5.0)).unwrap();
        let b = build_features(&p, &s, &cal, (30.0, 5.0)).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_observations(&a, &mut ba).unwrap();
        write_observations(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        save_observations(&a, &path).unwrap();
        let back = load_observations(&path).unwrap();
        assert_eq!(back.columns, a.columns);
        assert_eq!(back.observations.len(), a.observations.len());
        for (x, y) in back.observations.iter().zip(&a.observations) {
            assert_eq!(x.x, y.x);
            assert_eq!(x.timestamp, y.timestamp);
        }
    }

    #[test]
    fn standardizer_zero_mean_unit_var() {
        let cal = MarketCalendar::for_market(Market::Nyiso);
        let p = synthetic_panel(&cal, &["A"], 8);
        let mut set = build_features(&p, &spec(&["A"]), &cal, (30.0, 5.0)).unwrap();
        let st = Standardizer::fit(&set.observations).unwrap();
        st.apply_all(&mut set.observations);
        let n = set.observations.len() as f64;
        for j in 0..set.dimension() {
            let m: f64 = set.observations.iter().map(|o| o.x[j]).sum::<f64>() / n;
            assert!(m.abs() < 1e-9, "col {j} mean {m}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn labels_exclusive_and_monotone(
            darts in prop::collection::vec(-100f64..100.0, 1..200),
            gn in 0.1f64..50.0, gp in 0.1f64..50.0, bump in 0f64..20.0,
        ) {
            let base = FixedOffset::east_opt(0).unwrap().with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
            let mk = |d: f64| LabeledObservation {
                timestamp: base, zone: "A".into(), x: vec![], y_neg: 0, y_pos: 0,
                realized_dart: d, sources: vec![],
            };
            let mut obs: Vec<_> = darts.iter().map(|&d| mk(d)).collect();
            let count = |obs: &mut Vec<LabeledObservation>, gp: f64| {
                obs.iter_mut().for_each(|o| o.set_labels(gn, gp));
                obs.iter().map(|o| o.y_pos as usize).sum::<usize>()
            };
            let c1 = count(&mut obs, gp);
            for o in &obs {
                prop_assert_eq!(o.y_neg * o.y_pos, 0);
            }
            let c2 = count(&mut obs, gp + bump);
            prop_assert!(c2 <= c1);
        }
    }
}
