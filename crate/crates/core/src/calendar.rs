//! Market calendars: gate closure, local time, season/band buckets and
//! train/validation/test splits.
//!
//! All three supported markets are US ISOs, so local time is a fixed standard
//! offset plus the US daylight-saving rule (second Sunday of March 02:00 to
//! first Sunday of November 02:00).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{
    DateTime, Datelike, Duration, FixedOffset, NaiveDate, NaiveDateTime, NaiveTime, TimeZone,
    Timelike, Utc, Weekday,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Market {
    #[serde(rename = "NYISO")]
    Nyiso,
    #[serde(rename = "ISONE", alias = "ISO-NE")]
    Isone,
    #[serde(rename = "ERCOT")]
    Ercot,
}

impl Market {
    pub const ALL: [Market; 3] = [Market::Nyiso, Market::Isone, Market::Ercot];

    /// Day-ahead gate closure, local clock time.
    pub fn gate_closure(self) -> NaiveTime {
        match self {
            Market::Nyiso => NaiveTime::from_hms_opt(5, 0, 0).unwrap(),
            Market::Isone => NaiveTime::from_hms_opt(10, 30, 0).unwrap(),
            Market::Ercot => NaiveTime::from_hms_opt(10, 0, 0).unwrap(),
        }
    }

    /// Standard-time UTC offset in hours (Eastern for NYISO/ISO-NE, Central for ERCOT).
    pub fn standard_offset_hours(self) -> i32 {
        match self {
            Market::Nyiso | Market::Isone => -5,
            Market::Ercot => -6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Market::Nyiso => "NYISO",
            Market::Isone => "ISONE",
            Market::Ercot => "ERCOT",
        }
    }
}

impl fmt::Display for Market {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Market {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "NYISO" => Ok(Market::Nyiso),
            "ISONE" => Ok(Market::Isone),
            "ERCOT" => Ok(Market::Ercot),
            other => Err(Error::Config(vec![format!("unknown market `{other}`")])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Season {
    Winter,
    Summer,
    Shoulder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    Peak,
    OffPeak,
}

/// Season x load-band stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bucket {
    pub season: Season,
    pub band: Band,
}

impl Bucket {
    pub const ALL: [Bucket; 6] = [
        Bucket::new(Season::Winter, Band::OffPeak),
        Bucket::new(Season::Winter, Band::Peak),
        Bucket::new(Season::Summer, Band::OffPeak),
        Bucket::new(Season::Summer, Band::Peak),
        Bucket::new(Season::Shoulder, Band::OffPeak),
        Bucket::new(Season::Shoulder, Band::Peak),
    ];

    pub const fn new(season: Season, band: Band) -> Self {
        Bucket { season, band }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.season, self.band)
    }
}

impl FromStr for Bucket {
    type Err = Error;

    /// Parses `Season/Band`, e.g. `Summer/Peak`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Serde(format!("bucket `{s}` is not of the form Season/Band"));
        let (a, b) = s.split_once('/').ok_or_else(bad)?;
        let season = match a.trim() {
            "Winter" => Season::Winter,
            "Summer" => Season::Summer,
            "Shoulder" => Season::Shoulder,
            _ => return Err(bad()),
        };
        let band = match b.trim() {
            "Peak" => Band::Peak,
            "OffPeak" | "Off-Peak" => Band::OffPeak,
            _ => return Err(bad()),
        };
        Ok(Bucket::new(season, band))
    }
}

/// Serde adapter for maps keyed by [`Bucket`], written with `Season/Band` string keys.
pub mod bucket_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Bucket;

    pub fn serialize<V: Serialize, S: Serializer>(
        map: &BTreeMap<Bucket, V>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let m: BTreeMap<String, &V> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<Bucket, V>, D::Error> {
        let m = BTreeMap::<String, V>::deserialize(d)?;
        m.into_iter()
            .map(|(k, v)| {
                k.parse::<Bucket>()
                    .map(|b| (b, v))
                    .map_err(D::Error::custom)
            })
            .collect()
    }
}

/// Half-open date interval `[start, end)` in market-local dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(NaiveDate, NaiveDate)", into = "(NaiveDate, NaiveDate)")]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateRange { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d < self.end
    }

    pub fn overlaps(&self, other: &DateRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

impl From<(NaiveDate, NaiveDate)> for DateRange {
    fn from((start, end): (NaiveDate, NaiveDate)) -> Self {
        DateRange { start, end }
    }
}

impl From<DateRange> for (NaiveDate, NaiveDate) {
    fn from(r: DateRange) -> Self {
        (r.start, r.end)
    }
}

impl fmt::Display for DateRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DateRange,
    pub validation: DateRange,
    pub test: DateRange,
}

impl SplitSpec {
    /// Checks that every range is non-empty, the ranges are pairwise disjoint,
    /// and they are ordered train < validation < test. Returns every problem found.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let named = [
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ];
        for (name, r) in named {
            if r.is_empty() {
                out.push(format!("{name} range {r} is empty"));
            }
        }
        for i in 0..named.len() {
            for j in (i + 1)..named.len() {
                let (na, a) = named[i];
                let (nb, b) = named[j];
                if a.overlaps(&b) {
                    out.push(format!("{na} range {a} overlaps {nb} range {b}"));
                } else if a.start >= b.end {
                    out.push(format!("{na} range {a} must precede {nb} range {b}"));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::SplitOverlap(p.join("; ")))
        }
    }

    pub fn role_of(&self, d: NaiveDate) -> Option<SplitRole> {
        if self.train.contains(d) {
            Some(SplitRole::Train)
        } else if self.validation.contains(d) {
            Some(SplitRole::Validation)
        } else if self.test.contains(d) {
            Some(SplitRole::Test)
        } else {
            None
        }
    }

    pub fn range(&self, role: SplitRole) -> DateRange {
        match role {
            SplitRole::Train => self.train,
            SplitRole::Validation => self.validation,
            SplitRole::Test => self.test,
        }
    }
}

/// Peak/off-peak rule on hour-ending numbering (1..=24).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakRule {
    pub first_hour_ending: u32,
    pub last_hour_ending: u32,
    pub weekdays_only: bool,
    pub holidays_off_peak: bool,
}

impl Default for PeakRule {
    fn default() -> Self {
        PeakRule {
            first_hour_ending: 8,
            last_hour_ending: 23,
            weekdays_only: true,
            holidays_off_peak: true,
        }
    }
}

fn default_season_rule() -> [Season; 12] {
    use Season::*;
    [
        Winter, Winter, Shoulder, Shoulder, Shoulder, Summer, Summer, Summer, Shoulder, Shoulder,
        Shoulder, Winter,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketCalendar {
    pub market: Market,
    pub gate_closure: NaiveTime,
    /// Standard-time offset from UTC, in hours.
    pub utc_offset_hours: i32,
    /// Apply the US daylight-saving rule.
    pub us_dst: bool,
    /// Day-ahead load forecasts are treated as published this long before gate closure.
    pub forecast_lead_minutes: i64,
    pub holidays: BTreeSet<NaiveDate>,
    /// Season for months 1..=12 (index 0 is January).
    pub season_rule: [Season; 12],
    pub peak_rule: PeakRule,
    pub split: Option<SplitSpec>,
}

impl MarketCalendar {
    /// Defaults for a market: documented gate closure, empty holiday set,
    /// Winter = DJF, Summer = JJA, Peak = HE08-HE23 on non-holiday weekdays.
    pub fn for_market(market: Market) -> Self {
        MarketCalendar {
            market,
            gate_closure: market.gate_closure(),
            utc_offset_hours: market.standard_offset_hours(),
            us_dst: true,
            forecast_lead_minutes: 60,
            holidays: BTreeSet::new(),
            season_rule: default_season_rule(),
            peak_rule: PeakRule::default(),
            split: None,
        }
    }

    pub fn season(&self, month: u32) -> Season {
        self.season_rule[(month as usize).clamp(1, 12) - 1]
    }

    pub fn is_holiday(&self, d: NaiveDate) -> bool {
        self.holidays.contains(&d)
    }

    pub fn is_weekend(d: NaiveDate) -> bool {
        matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
    }

    /// Band of the hour beginning at local wall-clock `local`.
    pub fn band(&self, local: NaiveDateTime) -> Band {
        let d = local.date();
        let he = local.hour() + 1;
        let rule = &self.peak_rule;
        if rule.weekdays_only && Self::is_weekend(d) {
            return Band::OffPeak;
        }
        if rule.holidays_off_peak && self.is_holiday(d) {
            return Band::OffPeak;
        }
        if he >= rule.first_hour_ending && he <= rule.last_hour_ending {
            Band::Peak
        } else {
            Band::OffPeak
        }
    }

    pub fn bucket(&self, local: NaiveDateTime) -> Bucket {
        Bucket::new(self.season(local.month()), self.band(local))
    }

    pub fn bucket_of(&self, ts: &DateTime<FixedOffset>) -> Bucket {
        self.bucket(ts.naive_local())
    }

    fn standard_offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_hours * 3600).expect("offset in range")
    }

    fn daylight_offset(&self) -> FixedOffset {
        FixedOffset::east_opt((self.utc_offset_hours + 1) * 3600).expect("offset in range")
    }

    /// DST window for `year` as local wall-clock bounds `[start, end)`:
    /// second Sunday of March 02:00 to first Sunday of November 02:00.
    fn dst_window(year: i32) -> (NaiveDateTime, NaiveDateTime) {
        let two = NaiveTime::from_hms_opt(2, 0, 0).unwrap();
        let march = NaiveDate::from_weekday_of_month_opt(year, 3, Weekday::Sun, 2).unwrap();
        let nov = NaiveDate::from_weekday_of_month_opt(year, 11, Weekday::Sun, 1).unwrap();
        (march.and_time(two), nov.and_time(two))
    }

    /// Offset in force at a local wall-clock time. In the repeated fall-back
    /// hour the daylight offset (first occurrence) is returned.
    pub fn offset_for_local(&self, local: NaiveDateTime) -> FixedOffset {
        if !self.us_dst {
            return self.standard_offset();
        }
        let (start, end) = Self::dst_window(local.year());
        if local >= start && local < end {
            self.daylight_offset()
        } else {
            self.standard_offset()
        }
    }

    pub fn local_to_instant(&self, local: NaiveDateTime) -> DateTime<FixedOffset> {
        let off = self.offset_for_local(local);
        off.from_local_datetime(&local)
            .single()
            .expect("fixed offsets are unambiguous")
    }

    /// Converts a UTC instant to market-local time with the offset in force.
    pub fn to_local(&self, utc: DateTime<Utc>) -> DateTime<FixedOffset> {
        if !self.us_dst {
            return utc.with_timezone(&self.standard_offset());
        }
        let year = utc.with_timezone(&self.standard_offset()).year();
        let (start, end) = Self::dst_window(year);
        // start is in standard time, end in daylight time
        let start_utc = start - Duration::hours(self.utc_offset_hours as i64);
        let end_utc = end - Duration::hours(self.utc_offset_hours as i64 + 1);
        let naive = utc.naive_utc();
        if naive >= start_utc && naive < end_utc {
            utc.with_timezone(&self.daylight_offset())
        } else {
            utc.with_timezone(&self.standard_offset())
        }
    }

    /// Gate closure instant for bids on operating day `day` (the previous local day at
    /// the market's gate-closure clock time).
    pub fn gate_closure_for(&self, day: NaiveDate) -> DateTime<FixedOffset> {
        let prev = day.pred_opt().expect("date in range");
        self.local_to_instant(prev.and_time(self.gate_closure))
    }

    /// Last operating day whose every hour has settled by the gate closure for `day`.
    pub fn last_settled_day(&self, day: NaiveDate) -> NaiveDate {
        let gate = self.gate_closure_for(day);
        let mut d = gate.naive_local().date();
        // day d ends at local midnight of d + 1
        loop {
            let end = self.local_to_instant(d.succ_opt().unwrap().and_hms_opt(0, 0, 0).unwrap());
            if end <= gate {
                return d;
            }
            d = d.pred_opt().unwrap();
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let doc: CalendarDocument =
            toml::from_str(s).map_err(|e| Error::Config(vec![format!("calendar: {e}")]))?;
        doc.into_calendar()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading calendar {}", path.display()), e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_document(&self) -> CalendarDocument {
        let months = |season: Season| -> Vec<u32> {
            (1..=12).filter(|&m| self.season(m) == season).collect()
        };
        CalendarDocument {
            market: self.market,
            gate_closure: Some(self.gate_closure.format("%H:%M").to_string()),
            utc_offset_hours: Some(self.utc_offset_hours),
            us_dst: Some(self.us_dst),
            forecast_lead_minutes: Some(self.forecast_lead_minutes),
            holidays: self.holidays.iter().copied().collect(),
            seasons: Some(SeasonDocument {
                winter: months(Season::Winter),
                summer: months(Season::Summer),
            }),
            peak_rule: Some(self.peak_rule),
            split: self.split,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_document()).expect("calendar document serializes")
    }
}

/// On-disk calendar/config document. Omitted fields take the market defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalendarDocument {
    pub market: Market,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_closure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utc_offset_hours: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub us_dst: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast_lead_minutes: Option<i64>,
    #[serde(default)]
    pub holidays: Vec<NaiveDate>,
    /// Months not listed under winter or summer are shoulder months.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seasons: Option<SeasonDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_rule: Option<PeakRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeasonDocument {
    pub winter: Vec<u32>,
    pub summer: Vec<u32>,
}

impl CalendarDocument {
    pub fn into_calendar(self) -> Result<MarketCalendar> {
        let mut cal = MarketCalendar::for_market(self.market);
        let mut problems = Vec::new();
        if let Some(g) = &self.gate_closure {
            match NaiveTime::parse_from_str(g, "%H:%M") {
                Ok(t) => cal.gate_closure = t,
                Err(e) => problems.push(format!("gate_closure `{g}`: {e}")),
            }
        }
        if let Some(o) = self.utc_offset_hours {
            if !(-12..=14).contains(&o) {
                problems.push(format!("utc_offset_hours {o} out of range"));
            } else {
                cal.utc_offset_hours = o;
            }
        }
        if let Some(d) = self.us_dst {
            cal.us_dst = d;
        }
        if let Some(l) = self.forecast_lead_minutes {
            cal.forecast_lead_minutes = l;
        }
        cal.holidays = self.holidays.into_iter().collect();
        if let Some(s) = self.seasons {
            let mut rule = [Season::Shoulder; 12];
            for (months, season) in [(&s.winter, Season::Winter), (&s.summer, Season::Summer)] {
                for &m in months {
                    if !(1..=12).contains(&m) {
                        problems.push(format!("season month {m} out of 1..=12"));
                    } else if rule[m as usize - 1] != Season::Shoulder {
                        problems.push(format!("month {m} assigned to two seasons"));
                    } else {
                        rule[m as usize - 1] = season;
                    }
                }
            }
            cal.season_rule = rule;
        }
        if let Some(p) = self.peak_rule {
            if p.first_hour_ending < 1
                || p.last_hour_ending > 24
                || p.first_hour_ending > p.last_hour_ending
            {
                problems.push(format!(
                    "peak_rule hour-ending range {}..={} invalid",
                    p.first_hour_ending, p.last_hour_ending
                ));
            }
            cal.peak_rule = p;
        }
        if let Some(split) = self.split {
            problems.extend(split.problems());
            cal.split = Some(split);
        }
        if problems.is_empty() {
            Ok(cal)
        } else {
            Err(Error::Config(problems))
        }
    }
}
