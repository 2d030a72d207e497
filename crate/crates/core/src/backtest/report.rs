use std::path::Path;

use super::{BacktestReport, ClassificationRow, View};
use crate::error::{Error, Result};
use crate::panel::format_ts;
use crate::sizing::write_plans;

/// Files written by [`emit_report`], in write order.
pub const REPORT_FILES: [&str; 10] = [
    "pnl_series.csv",
    "trades.csv",
    "plans.csv",
    "attribution.csv",
    "attribution_prediction.csv",
    "yearly.csv",
    "metrics.csv",
    "histograms.csv",
    "js.csv",
    "significance.csv",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        fill(&mut w)?;
        w.flush().map_err(|e| Error::io("buffering report", e))?;
    }
    Ok(buf)
}

fn attribution(report: &BacktestReport, view: View) -> Result<Vec<u8>> {
    csv_bytes(&["zone", "hours_active", "mean_abs_q", "pnl"], |w| {
        let rows = report.zone_attribution(view);
        for a in &rows {
            w.write_record([
                a.zone.clone(),
                a.hours_active.to_string(),
                a.mean_abs_q.to_string(),
                a.pnl.to_string(),
            ])?;
        }
        if !rows.is_empty() {
            let trades = report.trades(view);
            let abs_q: f64 = trades.iter().map(|t| t.q.abs()).sum();
            let hours: std::collections::BTreeSet<i64> =
                trades.iter().map(|t| t.timestamp.timestamp()).collect();
            w.write_record([
                "TOTAL".to_string(),
                hours.len().to_string(),
                (abs_q / trades.len() as f64).to_string(),
                report.total_pnl(view).to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Confusion counts and derived scores, one row per (zone, side). Undefined
/// scores are left blank.
pub fn metrics_csv(rows: &[ClassificationRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "zone",
            "side",
            "gamma",
            "tau",
            "tp",
            "fp",
            "fn",
            "tn",
            "precision",
            "recall",
            "f1",
        ],
        |w| {
            for r in rows {
                let c = r.confusion;
                w.write_record([
                    r.zone.clone(),
                    r.side.to_string(),
                    r.gamma.to_string(),
                    r.tau.to_string(),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.fn_.to_string(),
                    c.tn.to_string(),
                    opt(c.precision()),
                    opt(c.recall()),
                    opt(c.f1()),
                ])?;
            }
            Ok(())
        },
    )
}

/// Writes the report as delimited text under `out_dir`. Row order is fixed, so
/// identical reports produce identical bytes.
pub fn emit_report(report: &BacktestReport, out_dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let views = [View::Execution, View::Prediction];
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();

    files.push((
        "pnl_series.csv",
        csv_bytes(&["view", "timestamp", "total", "inc", "dec"], |w| {
            for v in views {
                for p in report.series(v) {
                    w.write_record([
                        v.to_string(),
                        format_ts(&p.timestamp),
                        p.total.to_string(),
                        p.inc.to_string(),
                        p.dec.to_string(),
                    ])?;
                }
            }
            Ok(())
        })?,
    ));

    files.push((
        "trades.csv",
        csv_bytes(
            &[
                "view",
                "timestamp",
                "zone",
                "side",
                "q_mwh",
                "r",
                "impact_cost",
                "pnl",
                "net_position",
            ],
            |w| {
                for v in views {
                    for t in report.trades(v) {
                        w.write_record([
                            v.to_string(),
                            format_ts(&t.timestamp),
                            t.zone.clone(),
                            t.side.to_string(),
                            t.q.to_string(),
                            t.r.to_string(),
                            t.impact_cost.to_string(),
                            t.pnl.to_string(),
                            t.net_position.to_string(),
                        ])?;
                    }
                }
                Ok(())
            },
        )?,
    ));

    let mut plans = Vec::new();
    write_plans(&report.plans, &mut plans)?;
    files.push(("plans.csv", plans));

    files.push(("attribution.csv", attribution(report, View::Execution)?));
    files.push((
        "attribution_prediction.csv",
        attribution(report, View::Prediction)?,
    ));

    files.push((
        "yearly.csv",
        csv_bytes(&["year", "execution", "prediction"], |w| {
            let e = report.yearly(View::Execution);
            let p = report.yearly(View::Prediction);
            let years: std::collections::BTreeSet<i32> =
                e.keys().chain(p.keys()).copied().collect();
            for y in years {
                w.write_record([
                    y.to_string(),
                    e.get(&y).copied().unwrap_or(0.0).to_string(),
                    p.get(&y).copied().unwrap_or(0.0).to_string(),
                ])?;
            }
            Ok(())
        })?,
    ));

    files.push(("metrics.csv", metrics_csv(&report.classification)?));

    files.push((
        "histograms.csv",
        csv_bytes(&["side", "axis", "bin", "trades", "top", "all"], |w| {
            for a in &report.alignment {
                let h = &a.alignment;
                for i in 0..h.trades.len() {
                    w.write_record([
                        a.side.to_string(),
                        h.axis.to_string(),
                        i.to_string(),
                        h.trades[i].to_string(),
                        h.top[i].to_string(),
                        h.all[i].to_string(),
                    ])?;
                }
            }
            Ok(())
        })?,
    ));

    files.push((
        "js.csv",
        csv_bytes(&["side", "axis", "top_fraction", "js_top", "js_all"], |w| {
            for a in &report.alignment {
                let h = &a.alignment;
                w.write_record([
                    a.side.to_string(),
                    h.axis.to_string(),
                    h.top_fraction.to_string(),
                    h.js_top.to_string(),
                    h.js_all.to_string(),
                ])?;
            }
            Ok(())
        })?,
    ));

    files.push((
        "significance.csv",
        csv_bytes(
            &[
                "zone", "side", "season", "band", "n", "mean", "std", "t", "admitted",
            ],
            |w| {
                for s in &report.significance {
                    w.write_record([
                        s.key.zone.clone(),
                        s.key.side.to_string(),
                        s.key.bucket.season.to_string(),
                        s.key.bucket.band.to_string(),
                        s.n.to_string(),
                        s.mean.to_string(),
                        opt(s.std),
                        opt(s.t),
                        s.admitted.to_string(),
                    ])?;
                }
                Ok(())
            },
        )?,
    ));

    debug_assert_eq!(files.iter().map(|f| f.0).collect::<Vec<_>>(), REPORT_FILES);
    let mut names = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        names.push(name.to_string());
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::super::TradeRecord;
    use super::*;
    use crate::classifier::Side;
    use chrono::{FixedOffset, TimeZone};

    fn trade(zone: &str, h: u32, q: f64, pnl: f64) -> TradeRecord {
        TradeRecord {
            timestamp: FixedOffset::east_opt(-4 * 3600)
                .unwrap()
                .with_ymd_and_hms(2024, 7, 1, h, 0, 0)
                .unwrap(),
            zone: zone.into(),
            q,
            side: if q >= 0.0 { Side::Inc } else { Side::Dec },
            r: pnl / q,
            impact_cost: 0.0,
            pnl,
            net_position: q,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let names = emit_report(&BacktestReport::default(), dir.path()).unwrap();
        assert_eq!(names, REPORT_FILES);
        for n in names {
            let s = std::fs::read_to_string(dir.path().join(&n)).unwrap();
            assert_eq!(s.lines().count(), 1, "{n}");
        }
    }

    #[test]
    fn attribution_rows_and_determinism() {
        let r = BacktestReport {
            execution: vec![
                trade("A", 10, 2.0, 5.0),
                trade("B", 10, -1.0, -2.0),
                trade("A", 11, 1.0, 1.0),
            ],
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&r, d1.path()).unwrap();
        emit_report(&r, d2.path()).unwrap();
        let a = std::fs::read_to_string(d1.path().join("attribution.csv")).unwrap();
        assert_eq!(a.lines().count(), 1 + 2 + 1);
        assert!(a.lines().last().unwrap().starts_with("TOTAL,2,"));
        assert!(a.lines().last().unwrap().ends_with(",4"));
        for n in REPORT_FILES {
            assert_eq!(
                std::fs::read(d1.path().join(n)).unwrap(),
                std::fs::read(d2.path().join(n)).unwrap()
            );
        }
    }
}
