//! Minimal SVG line charts for success and precision curves.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use glad_core::metrics::{auc_thresholds, precision_curve, success_curve, EvalReport};
use glad_core::{GladError, Result};

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 280.0;
const MARGIN: f64 = 44.0;

struct Panel<'a> {
    title: &'a str,
    x_label: &'a str,
    x_max: f64,
    points: Vec<(f64, f64)>,
}

fn panel(svg: &mut String, p: &Panel, x0: f64) {
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let sx = |x: f64| x0 + MARGIN + w * x / p.x_max;
    let sy = |y: f64| MARGIN + h * (1.0 - y);
    let _ = writeln!(
        svg,
        r#"<rect x="{}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="black"/>"#,
        x0 + MARGIN
    );
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{y:.2}</text>"#,
            x0 + MARGIN - 4.0,
            sy(y) + 3.0
        );
        let x = p.x_max * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{x}</text>"#,
            sx(x),
            MARGIN + h + 14.0
        );
    }
    let pts: Vec<String> = p
        .points
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        pts.join(" ")
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        x0 + PANEL_W / 2.0,
        MARGIN - 10.0,
        p.title
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
        x0 + PANEL_W / 2.0,
        PANEL_H - 8.0,
        p.x_label
    );
}

fn two_panel_svg(
    name: &str,
    success: Vec<(f64, f64)>,
    precision: Vec<(f64, f64)>,
    auc: f64,
    p20: f64,
) -> String {
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{PANEL_H}\">\n<title>{name}</title>\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        2.0 * PANEL_W
    );
    let st = format!("Success {name} (AUC {:.1})", 100.0 * auc);
    let pt = format!("Precision {name} (P@20 {:.1})", 100.0 * p20);
    panel(
        &mut svg,
        &Panel {
            title: &st,
            x_label: "overlap threshold",
            x_max: 1.0,
            points: success,
        },
        0.0,
    );
    panel(
        &mut svg,
        &Panel {
            title: &pt,
            x_label: "location error threshold (px)",
            x_max: 50.0,
            points: precision,
        },
        PANEL_W,
    );
    svg.push_str("</svg>\n");
    svg
}

fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One `curves_<sequence>.svg` per sequence plus `curves_ALL.svg` with the
/// per-sequence mean curves. Returns the written paths.
pub fn write_curves(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| GladError::io(dir, e))?;
    let xs = auc_thresholds();
    let mut paths = Vec::new();
    let mut mean_s = vec![0.0; xs.len()];
    let mut mean_p = vec![0.0; 51];
    for s in &report.sequences {
        let sc = success_curve(&s.ious)?;
        let pc = precision_curve(&s.center_errors)?;
        for (m, v) in mean_s.iter_mut().zip(&sc) {
            *m += v / report.sequences.len() as f64;
        }
        for (m, (_, v)) in mean_p.iter_mut().zip(&pc) {
            *m += v / report.sequences.len() as f64;
        }
        let svg = two_panel_svg(
            &s.name,
            xs.iter().copied().zip(sc).collect(),
            pc,
            s.scores.auc,
            s.scores.p,
        );
        let path = dir.join(format!("curves_{}.svg", safe_name(&s.name)));
        std::fs::write(&path, svg).map_err(|e| GladError::io(&path, e))?;
        paths.push(path);
    }
    let svg = two_panel_svg(
        "ALL",
        xs.iter().copied().zip(mean_s).collect(),
        (0..=50).map(|t| t as f64).zip(mean_p).collect(),
        report.aggregate.auc,
        report.aggregate.p,
    );
    let path = dir.join("curves_ALL.svg");
    std::fs::write(&path, svg).map_err(|e| GladError::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}
