//! Deterministic SVG line charts. Every chart has a CSV twin listing exactly
//! the points drawn (`panel,series,x,y`).

use std::fmt::Write as _;

use crate::frailty::FrailtyCurves;
use crate::identify::Decomposition;
use crate::vintage_effects::RandomEffectsFit;

const WIDTH: f64 = 760.0;
const PANEL_HEIGHT: f64 = 230.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const PANEL_GAP: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f4e79", "#c0392b", "#27ae60", "#8e44ad", "#d35400", "#16a085", "#7f8c8d", "#2c3e50"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            // non-finite points are neither drawn nor listed
            points: points.into_iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect(),
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub series: Vec<Series>,
}

impl Panel {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, series: Vec<Series>) -> Self {
        Panel {
            title: title.into(),
            x_label: x_label.into(),
            series,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 == 0.0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        let pad = if y1 - y0 > 0.0 { 0.05 * (y1 - y0) } else { 0.5f64.max(y0.abs() * 0.1) };
        (x0, x1, y0 - pad, y1 + pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub panels: Vec<Panel>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

impl Chart {
    pub fn new(title: impl Into<String>, panels: Vec<Panel>) -> Self {
        Chart {
            title: title.into(),
            panels,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("panel,series,x,y\n");
        for p in &self.panels {
            for s in &p.series {
                for (x, y) in &s.points {
                    let _ = writeln!(out, "{},{},{x},{y}", csv_field(&p.title), csv_field(&s.name));
                }
            }
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let height = MARGIN_TOP + self.panels.len() as f64 * (PANEL_HEIGHT + PANEL_GAP);
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        for (pi, panel) in self.panels.iter().enumerate() {
            let top = MARGIN_TOP + pi as f64 * (PANEL_HEIGHT + PANEL_GAP);
            let (x0, x1, y0, y1) = panel.bounds();
            let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
            let sy = |y: f64| top + PANEL_HEIGHT - (y - y0) / (y1 - y0) * PANEL_HEIGHT;
            let _ = writeln!(out, r#"<g class="panel">"#);
            let _ = writeln!(
                out,
                r##"<rect x="{MARGIN_LEFT}" y="{top}" width="{plot_w}" height="{PANEL_HEIGHT}" fill="none" stroke="#444"/>"##
            );
            let _ = writeln!(
                out,
                r#"<text x="{MARGIN_LEFT}" y="{:.2}" font-size="12">{}</text>"#,
                top - 6.0,
                escape(&panel.title)
            );
            for i in 0..=4 {
                let f = i as f64 / 4.0;
                let yv = y0 + f * (y1 - y0);
                let xv = x0 + f * (x1 - x0);
                let _ = writeln!(
                    out,
                    r##"<line x1="{MARGIN_LEFT}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                    MARGIN_LEFT + plot_w,
                    sy(yv),
                    sy(yv),
                    MARGIN_LEFT - 4.0,
                    sy(yv) + 4.0,
                    tick_label(yv)
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                    sx(xv),
                    top + PANEL_HEIGHT + 14.0,
                    tick_label(xv)
                );
            }
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                MARGIN_LEFT + plot_w / 2.0,
                top + PANEL_HEIGHT + 30.0,
                escape(&panel.x_label)
            );
            for (si, s) in panel.series.iter().enumerate() {
                let color = PALETTE[si % PALETTE.len()];
                let dash = if s.dashed { r#" stroke-dasharray="5,3""# } else { "" };
                let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                    pts.join(" ")
                );
                let ly = top + 12.0 + 16.0 * si as f64;
                let lx = MARGIN_LEFT + plot_w + 10.0;
                let _ = writeln!(
                    out,
                    r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{}" y="{}">{}</text>"#,
                    lx + 20.0,
                    lx + 24.0,
                    ly + 4.0,
                    escape(&s.name)
                );
            }
            let _ = writeln!(out, "</g>");
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Exogenous, maturity and vintage panels with one series per labelled decomposition.
pub fn decomposition_chart(title: &str, decomps: &[(String, &Decomposition)]) -> Chart {
    let series = |f: &dyn Fn(&Decomposition) -> Vec<(f64, f64)>| {
        decomps.iter().map(|(name, d)| Series::new(name.clone(), f(d))).collect::<Vec<_>>()
    };
    Chart::new(
        title,
        vec![
            Panel::new(
                "exogenous",
                "time",
                series(&|d| d.exogenous.iter().map(|e| (e.time as f64, e.value)).collect()),
            ),
            Panel::new(
                "maturity",
                "age",
                series(&|d| d.maturity.iter().map(|e| (e.age as f64, e.value)).collect()),
            ),
            Panel::new(
                "vintage",
                "vintage",
                series(&|d| d.vintage.iter().map(|e| (e.vintage as f64, e.value)).collect()),
            ),
        ],
    )
}

/// Account quantile log-hazards (dashed) and the vintage log-hazard.
pub fn frailty_chart(curves: &FrailtyCurves) -> Chart {
    let ages: Vec<f64> = curves.ages.iter().map(|&a| a as f64).collect();
    let mut series: Vec<Series> = curves
        .scenario
        .quantiles
        .iter()
        .zip(curves.account_log_hazard())
        .map(|(q, lh)| Series::new(FrailtyCurves::quantile_label(*q), ages.iter().copied().zip(lh).collect()).dashed())
        .collect();
    series.push(Series::new("vintage", ages.iter().copied().zip(curves.vintage_log_hazard()).collect()));
    Chart::new("frailty", vec![Panel::new("log-hazard", "age", series)])
}

/// Decomposition panels for the shrunk fit plus fixed versus shrunk vintage effects.
pub fn random_effects_chart(fit: &RandomEffectsFit) -> Chart {
    let mut chart = decomposition_chart(
        "random vintage effects",
        &[
            ("fixed".to_string(), &fit.fixed_decomposition),
            ("random".to_string(), &fit.decomposition),
        ],
    );
    chart.panels[2].series[0].dashed = true;
    chart
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frailty::{simulate_vintage_hazard, FrailtyScenario};
    use crate::identify::{AgeEffect, TimeEffect, VintageEffect};

    fn decomp(shift: f64) -> Decomposition {
        Decomposition {
            constraint: None,
            gamma_applied: 0.0,
            intercept: 0.0,
            maturity: (0..3).map(|a| AgeEffect { age: a, value: a as f64 * shift, se: None }).collect(),
            exogenous: (1..4).map(|t| TimeEffect { time: t, value: -(t as f64), se: None }).collect(),
            vintage: (-1..3).map(|v| VintageEffect { vintage: v, value: 0.5, se: None }).collect(),
        }
    }

    #[test]
    fn csv_twin_lists_plotted_points() {
        let a = decomp(0.1);
        let b = decomp(-0.2);
        let chart = decomposition_chart("k sweep", &[("k=0".into(), &a), ("k=-0.01, alt".into(), &b)]);
        let csv = chart.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 * (3 + 3 + 4));
        assert!(csv.contains("maturity,\"k=-0.01, alt\",2,-0.4\n"));
        let svg = chart.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 6);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg, chart.to_svg());
    }

    #[test]
    fn non_finite_points_are_dropped_from_both() {
        let c = simulate_vintage_hazard(&FrailtyScenario {
            horizon: 5,
            ..Default::default()
        })
        .unwrap();
        let chart = frailty_chart(&c);
        // age 0 has zero hazard, so log-hazard -inf is omitted
        assert_eq!(chart.to_csv().lines().count(), 1 + 10 * 5);
        assert!(!chart.to_svg().contains("inf"));
        assert_eq!(chart.panels[0].series.iter().filter(|s| s.dashed).count(), 9);
    }

    #[test]
    fn flat_series_still_renders() {
        let s = Series::new("flat", vec![(1.0, 2.0), (2.0, 2.0)]);
        let chart = Chart::new("t", vec![Panel::new("p", "x", vec![s])]);
        let svg = chart.to_svg();
        assert!(!svg.contains("NaN"));
        assert_eq!(tick_label(-0.0), "0");
        assert_eq!(tick_label(0.25), "0.25");
    }
}
