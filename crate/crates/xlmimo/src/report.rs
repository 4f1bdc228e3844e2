//! Metric and loss CSV files and the SVG curve plot.

use std::fmt::Write as _;

use xlmimo_core::pipeline::TrainReport;
use xlmimo_core::sweep::{ReportRow, CSV_HEADER};

use crate::error::{Error, Result};

pub fn metrics_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

fn field<T: std::str::FromStr>(v: &str, line: usize, name: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("line {line}: cannot parse {name} from {v:?}")))
}

/// Parses a metrics CSV; an empty table is an error.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(Error::Config(format!("unexpected metrics header {h:?}, expected {CSV_HEADER:?}"))),
        None => return Err(Error::Config("metrics CSV is empty".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Config(format!("line {}: expected 6 columns, found {}", i + 1, cols.len())));
        }
        rows.push(ReportRow {
            method: cols[0].to_owned(),
            snr_db: field(cols[1], i + 1, "snr_db")?,
            mpe_m: field(cols[2], i + 1, "mpe_m")?,
            nmse: field(cols[3], i + 1, "nmse")?,
            n: field(cols[5], i + 1, "n")?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config("metrics CSV has no rows".into()));
    }
    Ok(rows)
}

/// `step,loss` rows of a training trace.
pub fn loss_csv(report: &TrainReport) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in &report.trace {
        let _ = writeln!(s, "{step},{loss:e}");
    }
    s
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 56.0;

struct Panel<'a> {
    title: &'a str,
    y_label: &'a str,
    value: fn(&ReportRow) -> f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        (lo - pad, hi + pad)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn methods(rows: &[ReportRow]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for r in rows {
        if !out.contains(&r.method.as_str()) {
            out.push(&r.method);
        }
    }
    out
}

fn draw_panel(svg: &mut String, rows: &[ReportRow], panel: &Panel, x0: f64) {
    let finite: Vec<(f64, f64)> =
        rows.iter().map(|r| (r.snr_db, (panel.value)(r))).filter(|(_, v)| v.is_finite()).collect();
    let (left, top) = (x0 + MARGIN, MARGIN / 2.0);
    let (w, h) = (PANEL_W - 1.5 * MARGIN, PANEL_H - 1.5 * MARGIN);
    let _ = writeln!(
        svg,
        r#"<g class="panel"><rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        left + w / 2.0,
        top - 8.0,
        escape(panel.title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">SNR (dB)</text>"#,
        left + w / 2.0,
        top + h + 34.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate({},{}) rotate(-90)" text-anchor="middle" font-size="12">{}</text>"#,
        x0 + 14.0,
        top + h / 2.0,
        escape(panel.y_label)
    );
    if finite.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">no data</text></g>"#,
            left + w / 2.0,
            top + h / 2.0
        );
        return;
    }
    let (xmin, xmax) = nice_range(
        finite.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        finite.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (ymin, ymax) = nice_range(
        finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * w;
    let sy = |y: f64| top + h - (y - ymin) / (ymax - ymin) * h;
    for i in 0..=4 {
        let xv = xmin + (xmax - xmin) * f64::from(i) / 4.0;
        let yv = ymin + (ymax - ymin) * f64::from(i) / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{xv:.1}</text>"#,
            sx(xv),
            top + h + 14.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            sy(yv) + 3.0,
            tick(yv)
        );
    }
    for (j, m) in methods(rows).iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == *m)
            .map(|r| (r.snr_db, (panel.value)(r)))
            .filter(|(_, v)| v.is_finite())
            .collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[j % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="curve" data-method="{}" fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            escape(m),
            path.join(" ")
        );
        for (x, y) in &pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(*x), sy(*y));
        }
        let ly = top + 14.0 + 14.0 * j as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" text-anchor="end" font-size="11" fill="{color}">{}</text>"#,
            left + w - 6.0,
            escape(m)
        );
    }
    svg.push_str("</g>\n");
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Two panels side by side: MPE in meters and NMSE in dB against SNR.
pub fn svg_plot(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" viewBox="0 0 {} {PANEL_H}" font-family="sans-serif">"#,
        2.0 * PANEL_W,
        2.0 * PANEL_W
    );
    draw_panel(&mut svg, rows, &Panel { title: "Positioning", y_label: "MPE (m)", value: |r| r.mpe_m }, 0.0);
    draw_panel(
        &mut svg,
        rows,
        &Panel { title: "Channel estimation", y_label: "NMSE (dB)", value: |r| r.nmse_db() },
        PANEL_W,
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, snr: f64, mpe: f64, nmse: f64) -> ReportRow {
        ReportRow { method: method.into(), snr_db: snr, mpe_m: mpe, nmse, n: 4 }
    }

    #[test]
    fn metrics_round_trip_with_nan_and_infinities() {
        let rows =
            vec![row("oracle", -10.0, 0.0, 0.0), row("ls", 0.0, f64::NAN, 0.5), row("grid", 20.0, 1.25, f64::NAN)];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("method,snr_db,mpe_m,nmse,nmse_db,n\n"));
        assert!(text.contains("oracle,-10,0,0,-inf,4"));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], rows[0]);
        assert!(back[1].mpe_m.is_nan() && back[1].nmse == 0.5);
        assert!(back[2].nmse.is_nan());
    }

    #[test]
    fn empty_or_malformed_csv_rejected() {
        assert!(parse_metrics_csv("").is_err());
        assert!(parse_metrics_csv("method,snr_db,mpe_m,nmse,nmse_db,n\n").is_err());
        assert!(parse_metrics_csv("a,b\n1,2\n").is_err());
        assert!(parse_metrics_csv("method,snr_db,mpe_m,nmse,nmse_db,n\nls,x,1,1,0,2\n").is_err());
    }

    #[test]
    fn loss_csv_has_one_row_per_trace_entry() {
        let r = TrainReport { trace: vec![(0, 2.0), (10, 0.5)], steps_run: 11, final_loss: 0.4 };
        assert_eq!(loss_csv(&r), "step,loss\n0,2e0\n10,5e-1\n");
    }

    #[test]
    fn svg_has_one_curve_per_method_and_panel() {
        let rows = vec![
            row("oracle", 0.0, 0.0, 0.0),
            row("oracle", 10.0, 0.0, 0.0),
            row("grid", 0.0, 2.0, f64::NAN),
            row("grid", 10.0, 1.0, f64::NAN),
            row("ls", 0.0, f64::NAN, 0.5),
            row("ls", 10.0, f64::NAN, 0.1),
        ];
        let svg = svg_plot(&rows).unwrap();
        // MPE panel: oracle and grid. NMSE panel: ls only (oracle is -inf dB).
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("MPE (m)") && svg.contains("NMSE (dB)") && svg.contains("SNR (dB)"));
        assert!(svg_plot(&[]).is_err());
    }

    #[test]
    fn oracle_curve_is_flat() {
        let rows: Vec<_> = [-10.0, 0.0, 10.0].iter().map(|&s| row("oracle", s, 0.0, 0.0)).collect();
        let svg = svg_plot(&rows).unwrap();
        let line = svg.lines().find(|l| l.contains("<polyline")).unwrap();
        let points = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        let ys: Vec<&str> = points.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
    }
}
