use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, FixedOffset};

use super::{HourlyRecord, Panel};
use crate::calendar::Market;
use crate::error::{Error, Result, RowViolation};

pub const PANEL_COLUMNS: [&str; 9] = [
    "timestamp",
    "zone",
    "da_price",
    "rt_price",
    "zonal_load_forecast",
    "zonal_load_actual",
    "system_load_forecast",
    "loss_component",
    "congestion_component",
];

pub(crate) const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%:z";

pub(crate) fn format_ts(ts: &DateTime<FixedOffset>) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub(crate) fn parse_ts(s: &str) -> std::result::Result<DateTime<FixedOffset>, String> {
    DateTime::parse_from_rfc3339(s.trim()).map_err(|e| format!("timestamp `{s}`: {e}"))
}

fn parse_f64(field: &str, s: &str) -> std::result::Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| format!("{field}: cannot parse `{s}` as a number"))
}

fn parse_opt_f64(field: &str, s: &str) -> std::result::Result<Option<f64>, String> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(field, s).map(Some)
    }
}

pub fn load_panel(path: &Path, market: Market) -> Result<Panel> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening panel {}", path.display()), e))?;
    read_panel(f, market, path)
}

/// Reads the hourly-panel format. A `dart` column is optional; when present it
/// must agree with `da_price - rt_price`.
pub fn read_panel<R: Read>(reader: R, market: Market, path: &Path) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 9];
    for (i, name) in PANEL_COLUMNS.iter().enumerate() {
        idx[i] = col(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let dart_col = col("dart");

    let malformed = |row: usize, message: String| Error::MalformedFile {
        path: path.to_path_buf(),
        row,
        message,
    };

    let mut records = Vec::new();
    let mut violations = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| malformed(row, e.to_string()))?;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let parsed = (|| -> std::result::Result<HourlyRecord, String> {
            let ts = parse_ts(get(0))?;
            let zone = get(1).to_string();
            if zone.is_empty() {
                return Err("zone is empty".into());
            }
            Ok(HourlyRecord::new(
                ts,
                zone,
                parse_f64("da_price", get(2))?,
                parse_f64("rt_price", get(3))?,
                parse_f64("zonal_load_forecast", get(4))?,
                parse_f64("zonal_load_actual", get(5))?,
                parse_f64("system_load_forecast", get(6))?,
                parse_opt_f64("loss_component", get(7))?,
                parse_opt_f64("congestion_component", get(8))?,
            ))
        })()
        .map_err(|m| malformed(row, m))?;

        if let Some(dc) = dart_col {
            let s = rec.get(dc).unwrap_or("");
            if !s.is_empty() {
                let given = parse_f64("dart", s).map_err(|m| malformed(row, m))?;
                let scale = 1.0f64.max(parsed.da_price.abs()).max(parsed.rt_price.abs());
                if (given - parsed.dart).abs() > 1e-9 * scale {
                    violations.push(RowViolation {
                        row,
                        message: format!("dart {given} != da_price - rt_price = {}", parsed.dart),
                    });
                }
            }
        }
        records.push(parsed);
    }
    if !violations.is_empty() {
        return Err(Error::InvariantViolation(violations));
    }
    Panel::from_records(market, records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the panel in canonical column order; floats use the shortest
/// representation that parses back to the same bits.
pub fn write_panel<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PANEL_COLUMNS)?;
    for r in panel.records() {
        w.write_record([
            format_ts(&r.timestamp),
            r.zone.clone(),
            r.da_price.to_string(),
            r.rt_price.to_string(),
            r.zonal_load_forecast.to_string(),
            r.zonal_load_actual.to_string(),
            r.system_load_forecast.to_string(),
            fmt_opt(r.loss_component),
            fmt_opt(r.congestion_component),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing panel", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "timestamp,zone,da_price,rt_price,zonal_load_forecast,zonal_load_actual,system_load_forecast,loss_component,congestion_component";

    fn read(s: &str) -> Result<Panel> {
        read_panel(s.as_bytes(), Market::Nyiso, Path::new("mem.csv"))
    }

    #[test]
    fn three_row_file() {
        let s = format!(
            "{HEADER}\n\
             2024-07-01T00:00:00-04:00,A,10,7,100,101,1000,1.5,\n\
             2024-07-01T01:00:00-04:00,A,11,12,100,99,1000,,\n\
             2024-07-01T00:00:00-04:00,B,9,9,50,50,1000,0.5,-2\n"
        );
        let p = read(&s).unwrap();
        assert_eq!(p.len(), 3);
        let a0 = &p.records()[0];
        assert_eq!(a0.dart, 3.0);
        assert_eq!(a0.loss_component, Some(1.5));
        assert_eq!(a0.congestion_component, None);
        assert_eq!(p.records()[2].congestion_component, Some(-2.0));
    }

    #[test]
    fn inconsistent_dart_column_rejected() {
        let s = format!("{HEADER},dart\n2024-07-01T00:00:00-04:00,A,10,7,100,101,1000,,,4\n");
        match read(&s) {
            Err(Error::InvariantViolation(v)) => assert_eq!(v[0].row, 1),
            other => panic!("expected invariant violation, got {other:?}"),
        }
        let ok = format!("{HEADER},dart\n2024-07-01T00:00:00-04:00,A,10,7,100,101,1000,,,3\n");
        assert!(read(&ok).is_ok());
    }

    #[test]
    fn duplicate_row_lists_key() {
        let s = format!(
            "{HEADER}\n\
             2024-07-01T00:00:00-04:00,A,10,7,100,101,1000,,\n\
             2024-07-01T00:00:00-04:00,A,10,7,100,101,1000,,\n"
        );
        let err = read(&s).unwrap_err().to_string();
        assert!(
            err.contains("duplicate key (2024-07-01T00:00:00-04:00, A)"),
            "{err}"
        );
    }

    #[test]
    fn missing_column() {
        let s = "timestamp,zone,da_price\n";
        assert!(matches!(read(s), Err(Error::MissingColumn(c)) if c == "rt_price"));
    }

    #[test]
    fn malformed_row_number() {
        let s = format!(
            "{HEADER}\n\
             2024-07-01T00:00:00-04:00,A,10,7,100,101,1000,,\n\
             2024-07-01T01:00:00-04:00,A,ten,7,100,101,1000,,\n"
        );
        assert!(matches!(read(&s), Err(Error::MalformedFile { row: 2, .. })));
    }

    proptest! {
        #[test]
        fn write_then_read_is_identical(
            rows in prop::collection::vec(
                (-1e4f64..1e4, -1e4f64..1e4, 0f64..1e5, 0f64..1e5, 0f64..1e6,
                 prop::option::of(-100f64..100.0), prop::option::of(-100f64..100.0)),
                1..40)
        ) {
            let off = FixedOffset::east_opt(-5 * 3600).unwrap();
            let base = chrono::TimeZone::with_ymd_and_hms(&off, 2024, 1, 1, 0, 0, 0).unwrap();
            let recs: Vec<HourlyRecord> = rows.iter().enumerate().map(|(i, r)| {
                HourlyRecord::new(
                    base + chrono::Duration::hours(i as i64 / 2),
                    if i % 2 == 0 { "A" } else { "B" },
                    r.0, r.1, r.2, r.3, r.4, r.5, r.6,
                )
            }).collect();
            let panel = Panel::from_records(Market::Nyiso, recs).unwrap();
            let mut buf = Vec::new();
            write_panel(&panel, &mut buf).unwrap();
            let back = read_panel(buf.as_slice(), Market::Nyiso, Path::new("mem")).unwrap();
            prop_assert_eq!(back.records().len(), panel.records().len());
            for (a, b) in back.records().iter().zip(panel.records()) {
                prop_assert_eq!(a.timestamp, b.timestamp);
                prop_assert_eq!(a.da_price.to_bits(), b.da_price.to_bits());
                prop_assert_eq!(a.rt_price.to_bits(), b.rt_price.to_bits());
                prop_assert_eq!(a.dart.to_bits(), b.dart.to_bits());
                prop_assert_eq!(a.zonal_load_forecast.to_bits(), b.zonal_load_forecast.to_bits());
                prop_assert_eq!(a.loss_component.map(f64::to_bits), b.loss_component.map(f64::to_bits));
            }
            prop_assert_eq!(back, panel);
        }
    }
}
