use std::fmt::Write as _;

use curesimex::config::ExtrapolationTrace;
use curesimex::sim::{McMetrics, MetricsRow};
use curesimex::FitReport;

fn num(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.3}")
    }
}

fn pct(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{:.1}", 100.0 * v)
    }
}

/// Bias/Var/MSE/CP per coordinate, one line per (cell, method).
pub fn render_table(metrics: &McMetrics) -> String {
    if metrics.rows.is_empty() {
        return "no cells\n".into();
    }
    let mut coords: Vec<&str> = Vec::new();
    for r in &metrics.rows {
        if !coords.contains(&r.coordinate.as_str()) {
            coords.push(&r.coordinate);
        }
    }
    let mut groups: Vec<Vec<&MetricsRow>> = Vec::new();
    for r in &metrics.rows {
        let same = |g: &Vec<&MetricsRow>| {
            let h = g[0];
            h.model == r.model && h.cr == r.cr && h.sigma_eta == r.sigma_eta && h.method == r.method
        };
        match groups.iter_mut().find(|g| same(g)) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }

    let mut header = vec!["model".to_string(), "cr".into(), "sigma_eta".into(), "method".into()];
    for c in &coords {
        for m in ["bias", "var", "mse", "cp%"] {
            header.push(format!("{c}:{m}"));
        }
    }
    header.push("note".into());
    let mut table = vec![header];
    for g in &groups {
        let h = g[0];
        let mut line = vec![h.model.to_string(), format!("{}", h.cr), format!("{}", h.sigma_eta), h.method.to_string()];
        for c in &coords {
            match g.iter().find(|r| r.coordinate == *c) {
                Some(r) => line.extend([num(r.bias), num(r.var), num(r.mse), pct(r.cp)]),
                None => line.extend(std::iter::repeat_n("-".to_string(), 4)),
            }
        }
        let failed = g.iter().map(|r| r.n_fail).max().unwrap_or(0);
        let note = if g.iter().any(|r| !r.valid) {
            format!("invalid ({failed} failed)")
        } else if failed > 0 {
            format!("{failed} failed")
        } else {
            String::new()
        };
        line.push(note);
        table.push(line);
    }

    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols).map(|j| table.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, s)| if j < 4 || j == cols - 1 { format!("{s:<w$}", w = widths[j]) } else { format!("{s:>w$}", w = widths[j]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            out.push('\n');
        }
    }
    out
}

/// Plain-text summary of one fit.
pub fn render_fit(label: &str, fit: &FitReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{label}: {} model, n = {}, {} event times", fit.model, fit.n, fit.n_events);
    let naive = fit.theta_naive.theta.to_vector();
    for (j, name) in fit.coordinates.iter().enumerate() {
        let _ = write!(out, "  {name:<8} naive {:>9.4}", naive[j]);
        if let Some(s) = &fit.theta_simex {
            let _ = write!(out, "  simex {:>9.4}", s[j]);
        }
        if let Some(v) = &fit.variance {
            let [lo, hi] = v.intervals[j];
            let _ = write!(out, "  se {:.4}  {:.0}% CI [{lo:.4}, {hi:.4}]", v.standard_errors[j], 100.0 * v.level);
        }
        out.push('\n');
    }
    if fit.convergence.simex_total > 0 {
        let _ = writeln!(out, "  simex fits failed: {} of {}", fit.convergence.simex_failed, fit.convergence.simex_total);
    }
    out
}

pub struct TraceInput<'a> {
    pub label: &'a str,
    pub coordinates: &'a [String],
    pub trace: &'a ExtrapolationTrace,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span.abs() < 1e-12 {
        let pad = 0.05 * lo.abs().max(0.2);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.08 * span, hi + 0.08 * span)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One panel per coordinate: averaged estimates against zeta, the fitted
/// extrapolant from -1 to zeta_max, and the extrapolated value at -1.
pub fn render_svg(inputs: &[TraceInput]) -> String {
    let dim = inputs.iter().map(|t| t.coordinates.len()).max().unwrap_or(0);
    let width = PANEL_W * dim as f64;
    let legend_h = 18.0 * inputs.len() as f64 + 8.0;
    let height = PANEL_H + legend_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for j in 0..dim {
        let x0 = PANEL_W * j as f64;
        let zmax = inputs
            .iter()
            .flat_map(|t| t.trace.points.iter().map(|p| p.zeta))
            .fold(0.0_f64, f64::max)
            .max(1.0);
        let mut ys = Vec::new();
        for t in inputs.iter().filter(|t| j < t.coordinates.len()) {
            ys.extend(t.trace.points.iter().filter_map(|p| p.theta.as_ref().map(|v| v[j])));
            let coef = &t.trace.coefficients[j];
            ys.extend((0..=40).map(|k| poly(coef, -1.0 + (zmax + 1.0) * k as f64 / 40.0)));
        }
        let ys: Vec<f64> = ys.into_iter().filter(|v| v.is_finite()).collect();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (ylo, yhi) = if lo.is_finite() { nice_range(lo, hi) } else { (-1.0, 1.0) };
        let px = |z: f64| x0 + MARGIN + (z + 1.0) / (zmax + 1.0) * (PANEL_W - 1.5 * MARGIN);
        let py = |y: f64| PANEL_H - MARGIN - (y - ylo) / (yhi - ylo) * (PANEL_H - 1.5 * MARGIN);

        let (left, right, top, bottom) = (px(-1.0), px(zmax), py(yhi), py(ylo));
        let _ = writeln!(s, r#"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#, right - left, bottom - top);
        let _ = writeln!(s, r##"<line x1="{0:.1}" y1="{top:.1}" x2="{0:.1}" y2="{bottom:.1}" stroke="#bbb" stroke-dasharray="3,3"/>"##, px(0.0));
        let mut z = -1.0;
        while z <= zmax + 1e-9 {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{z}</text>"#, px(z), bottom + 14.0);
            z += 1.0;
        }
        for k in 0..=4 {
            let y = ylo + (yhi - ylo) * k as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, left - 4.0, py(y) + 4.0);
        }
        let name = inputs.iter().find_map(|t| t.coordinates.get(j)).map(String::as_str).unwrap_or("");
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#, (left + right) / 2.0, top - 8.0, esc(name));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">zeta</text>"#, (left + right) / 2.0, bottom + 30.0);

        for (ti, t) in inputs.iter().enumerate().filter(|(_, t)| j < t.coordinates.len()) {
            let color = COLORS[ti % COLORS.len()];
            let coef = &t.trace.coefficients[j];
            let pts: Vec<String> = (0..=80)
                .map(|k| {
                    let z = -1.0 + (zmax + 1.0) * k as f64 / 80.0;
                    format!("{:.2},{:.2}", px(z), py(poly(coef, z)))
                })
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
            for p in &t.trace.points {
                if let Some(v) = &p.theta {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(p.zeta), py(v[j]));
                }
            }
            let e = t.trace.at_minus_one[j];
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="white" stroke="{color}" stroke-width="1.5"/>"#, px(-1.0) - 3.5, py(e) - 3.5);
        }
    }

    for (ti, t) in inputs.iter().enumerate() {
        let y = PANEL_H + 14.0 + 18.0 * ti as f64;
        let color = COLORS[ti % COLORS.len()];
        let _ = writeln!(s, r#"<circle cx="{MARGIN}" cy="{:.1}" r="4" fill="{color}"/>"#, y - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{} ({:?})</text>"#, MARGIN + 10.0, esc(t.label), t.trace.extrapolant);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horner_matches_power_basis() {
        assert_eq!(poly(&[1.0, -2.0, 3.0], 2.0), 1.0 - 4.0 + 12.0);
    }

    #[test]
    fn empty_table() {
        assert_eq!(render_table(&McMetrics::default()), "no cells\n");
    }
}
