//! Hand-written SVG bar charts for the report stage.

use std::fmt::Write as _;

use crate::corpus::{SpeciesId, SpeciesNames};
use crate::eval::{AggregateReport, MeanStd};
use crate::util::fmt6;

pub struct SpeciesRow {
    pub id: usize,
    pub name: String,
    pub seen: Option<MeanStd>,
    pub unseen: Option<MeanStd>,
}

pub struct DomainRow {
    pub id: usize,
    pub ba: Option<MeanStd>,
}

fn classes(agg: &AggregateReport, metric: &str) -> Vec<usize> {
    let mut ids: Vec<usize> = agg
        .metrics
        .keys()
        .filter(|(m, _, _)| m == metric)
        .filter_map(|(_, _, c)| c.parse().ok())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

pub fn species_series(agg: &AggregateReport, names: &SpeciesNames) -> Vec<SpeciesRow> {
    classes(agg, "species_ba")
        .into_iter()
        .map(|id| SpeciesRow {
            id,
            name: u8::try_from(id)
                .ok()
                .and_then(|i| SpeciesId::new(i).ok())
                .map(|s| names.name(s).to_string())
                .unwrap_or_else(|| format!("S{id}")),
            seen: agg.get("species_ba", "seen", &id.to_string()),
            unseen: agg.get("species_ba", "unseen", &id.to_string()),
        })
        .collect()
}

pub fn domain_series(agg: &AggregateReport) -> Vec<DomainRow> {
    classes(agg, "domain_ba")
        .into_iter()
        .map(|id| DomainRow {
            id,
            ba: agg.get("domain_ba", "all", &id.to_string()),
        })
        .collect()
}

fn cells(v: Option<MeanStd>) -> String {
    match v {
        Some(v) => format!("{},{},{}", fmt6(v.mean), fmt6(v.std), v.runs),
        None => "undefined,undefined,0".into(),
    }
}

pub fn species_csv(rows: &[SpeciesRow]) -> String {
    let mut out = String::from("species,name,stratum,mean,std,runs\n");
    for r in rows {
        for (stratum, v) in [("seen", r.seen), ("unseen", r.unseen)] {
            let _ = writeln!(out, "{},{},{stratum},{}", r.id, r.name, cells(v));
        }
    }
    out
}

pub fn domain_csv(rows: &[DomainRow]) -> String {
    let mut out = String::from("domain,mean,std,runs\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.id, cells(r.ba));
    }
    out
}

const SEEN: &str = "#4477aa";
const UNSEEN: &str = "#ee6677";
const DOMAIN: &str = "#228833";
const PLOT_H: f64 = 240.0;
const TOP: f64 = 50.0;
const LEFT: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y(v: f64) -> f64 {
    TOP + PLOT_H * (1.0 - v.clamp(0.0, 1.0))
}

/// Frame, title and y axis from 0 to 1.
fn axes(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            width - 20.0,
            y(v),
            y(v),
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">Balanced accuracy</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );
}

/// Bar with a ±std whisker.
fn bar(out: &mut String, x: f64, w: f64, v: MeanStd, fill: &str) {
    let top = y(v.mean);
    let _ = writeln!(
        out,
        r#"<rect x="{x:.1}" y="{top:.1}" width="{w:.1}" height="{:.1}" fill="{fill}"/>"#,
        y(0.0) - top
    );
    let cx = x + w / 2.0;
    let (lo, hi) = (y(v.mean - v.std), y(v.mean + v.std));
    let _ = writeln!(
        out,
        r#"<path d="M{cx:.1} {lo:.1}V{hi:.1}M{:.1} {lo:.1}H{:.1}M{:.1} {hi:.1}H{:.1}" stroke="black" fill="none"/>"#,
        cx - 4.0,
        cx + 4.0,
        cx - 4.0,
        cx + 4.0
    );
}

fn omitted(out: &mut String, x: f64, w: f64, mark: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{mark}</text>"#,
        x + w / 2.0,
        y(0.0) - 4.0
    );
}

fn legend(out: &mut String, x: f64, items: &[(&str, &str)]) {
    for (i, (label, fill)) in items.iter().enumerate() {
        let ly = 34.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{fill}"/><text x="{:.1}" y="{:.1}">{label}</text>"#,
            ly - 9.0,
            x + 14.0,
            ly
        );
    }
}

/// Grouped bars of BA_seen and BA_unseen per species. Undefined values are
/// omitted and listed in a footnote rather than drawn as zero.
pub fn species_svg(rows: &[SpeciesRow], title: &str) -> String {
    let group = 56.0;
    let bw = 20.0;
    let width = LEFT + group * rows.len().max(1) as f64 + 120.0;
    let notes: Vec<String> = rows
        .iter()
        .flat_map(|r| {
            [("seen", r.seen), ("unseen", r.unseen)]
                .into_iter()
                .filter(|(_, v)| v.is_none())
                .map(move |(s, _)| format!("{}: no {s} test clips, bar omitted", r.name))
        })
        .collect();
    let height = TOP + PLOT_H + 40.0 + 16.0 * notes.len() as f64 + 10.0;
    let mut out = String::new();
    axes(&mut out, width, height, title);
    for (i, r) in rows.iter().enumerate() {
        let x0 = LEFT + group * i as f64 + 6.0;
        for (j, (v, fill)) in [(r.seen, SEEN), (r.unseen, UNSEEN)].into_iter().enumerate() {
            let x = x0 + bw * j as f64;
            match v {
                Some(v) => bar(&mut out, x, bw, v, fill),
                None => omitted(&mut out, x, bw, "*"),
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bw,
            y(0.0) + 16.0,
            escape(&r.name)
        );
    }
    legend(&mut out, width - 110.0, &[("BA_seen", SEEN), ("BA_unseen", UNSEEN)]);
    for (i, n) in notes.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{LEFT}" y="{:.1}" font-size="11">* {}</text>"#,
            y(0.0) + 40.0 + 16.0 * i as f64,
            escape(n)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn domain_svg(rows: &[DomainRow], title: &str) -> String {
    let group = 56.0;
    let bw = 32.0;
    let width = LEFT + group * rows.len().max(1) as f64 + 40.0;
    let notes: Vec<String> = rows
        .iter()
        .filter(|r| r.ba.is_none())
        .map(|r| format!("D{}: no test clips, bar omitted", r.id))
        .collect();
    let height = TOP + PLOT_H + 40.0 + 16.0 * notes.len() as f64 + 10.0;
    let mut out = String::new();
    axes(&mut out, width, height, title);
    for (i, r) in rows.iter().enumerate() {
        let x = LEFT + group * i as f64 + 12.0;
        match r.ba {
            Some(v) => bar(&mut out, x, bw, v, DOMAIN),
            None => omitted(&mut out, x, bw, "*"),
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">D{}</text>"#,
            x + bw / 2.0,
            y(0.0) + 16.0,
            r.id
        );
    }
    for (i, n) in notes.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{LEFT}" y="{:.1}" font-size="11">* {}</text>"#,
            y(0.0) + 40.0 + 16.0 * i as f64,
            escape(n)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(mean: f64, std: f64) -> Option<MeanStd> {
        Some(MeanStd { mean, std, runs: 2 })
    }

    #[test]
    fn omitted_bars_are_footnoted_not_zero() {
        let rows = vec![
            SpeciesRow {
                id: 1,
                name: "A".into(),
                seen: ms(0.9, 0.05),
                unseen: ms(0.4, 0.1),
            },
            SpeciesRow {
                id: 2,
                name: "B".into(),
                seen: ms(0.8, 0.0),
                unseen: None,
            },
        ];
        let svg = species_svg(&rows, "t");
        assert_eq!(
            svg.matches("<rect x=").count(),
            3 + 2,
            "three bars plus two legend swatches"
        );
        assert!(svg.contains("B: no unseen test clips, bar omitted"));
        let csv = species_csv(&rows);
        assert!(csv.contains("2,B,unseen,undefined,undefined,0"));
        assert!(csv.contains("1,A,seen,0.900000,0.050000,2"));
    }

    #[test]
    fn zero_std_gives_flat_whisker() {
        let mut out = String::new();
        bar(
            &mut out,
            0.0,
            10.0,
            MeanStd {
                mean: 0.5,
                std: 0.0,
                runs: 1,
            },
            "red",
        );
        let y = format!("{:.1}", super::y(0.5));
        assert!(out.contains(&format!("M5.0 {y}V{y}")));
    }
}
