//! Comparison table and accuracy-per-domain bar chart from result rows.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::results::Row;

/// Settings are `(domain, way, shot)` columns, models are rows.
struct Grid<'a> {
    models: Vec<&'a str>,
    settings: Vec<(&'a str, usize, usize)>,
    cells: BTreeMap<(usize, usize), &'a Row>,
}

fn grid(rows: &[Row]) -> Grid<'_> {
    let mut models: Vec<&str> = Vec::new();
    let mut settings: Vec<(&str, usize, usize)> = Vec::new();
    let mut cells = BTreeMap::new();
    for row in rows {
        let m = models.iter().position(|&m| m == row.model).unwrap_or_else(|| {
            models.push(&row.model);
            models.len() - 1
        });
        let key = (row.domain.as_str(), row.way, row.shot);
        let s = settings.iter().position(|&s| s == key).unwrap_or_else(|| {
            settings.push(key);
            settings.len() - 1
        });
        // later rows replace earlier ones for the same cell
        cells.insert((m, s), row);
    }
    Grid { models, settings, cells }
}

/// Markdown table, one row per model, one column per domain and setting.
pub fn table(rows: &[Row]) -> String {
    let g = grid(rows);
    let mut out = String::from("| model |");
    for (domain, way, shot) in &g.settings {
        let _ = write!(out, " {domain} ({way}-way {shot}-shot) |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(g.settings.len()));
    out.push('\n');
    for (m, model) in g.models.iter().enumerate() {
        let _ = write!(out, "| {model} |");
        for s in 0..g.settings.len() {
            match g.cells.get(&(m, s)) {
                Some(r) => {
                    let _ = write!(out, " {:.2} ± {:.2} |", r.mean, r.ci);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart of mean accuracy per domain with CI whiskers.
pub fn svg(rows: &[Row]) -> String {
    let g = grid(rows);
    let (left, top, plot_h, bottom) = (60.0, 20.0, 260.0, 70.0);
    let bar = 18.0;
    let group_w = bar * g.models.len().max(1) as f64 + 24.0;
    let width = left + group_w * g.settings.len().max(1) as f64 + 160.0;
    let height = top + plot_h + bottom;
    let y = |acc: f64| top + plot_h * (1.0 - acc.clamp(0.0, 100.0) / 100.0);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for tick in (0..=100).step_by(20) {
        let ty = y(tick as f64);
        let _ = writeln!(
            out,
            "<line x1=\"{left}\" y1=\"{ty:.1}\" x2=\"{:.1}\" y2=\"{ty:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>",
            width - 150.0,
            left - 6.0,
            ty + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">accuracy (%)</text>",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (s, (domain, way, shot)) in g.settings.iter().enumerate() {
        let x0 = left + 12.0 + group_w * s as f64;
        for m in 0..g.models.len() {
            let Some(r) = g.cells.get(&(m, s)) else { continue };
            let x = x0 + bar * m as f64;
            let colour = PALETTE[m % PALETTE.len()];
            let _ = writeln!(
                out,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{colour}\"/>",
                y(r.mean),
                bar - 2.0,
                y(0.0) - y(r.mean)
            );
            let cx = x + (bar - 2.0) / 2.0;
            let _ = writeln!(
                out,
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"#222\"/>",
                y(r.mean - r.ci),
                y(r.mean + r.ci)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{way}w{shot}s</text>",
            x0 + group_w / 2.0 - 12.0,
            top + plot_h + 16.0,
            escape(domain),
            x0 + group_w / 2.0 - 12.0,
            top + plot_h + 30.0
        );
    }
    for (m, model) in g.models.iter().enumerate() {
        let ly = top + 14.0 * m as f64;
        let lx = width - 140.0;
        let _ = writeln!(
            out,
            "<rect x=\"{lx:.1}\" y=\"{ly:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            PALETTE[m % PALETTE.len()],
            lx + 14.0,
            ly + 9.0,
            escape(model)
        );
    }
    out.push_str("</svg>\n");
    out
}
