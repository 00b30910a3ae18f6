//! Learning curves across seeds as standalone SVG.

use std::fmt::Write as _;

use crate::experiment::IterationRecord;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlotError {
    #[error("no metrics logs given")]
    NoLogs,
    #[error("metrics log {index}: {message}")]
    Malformed { index: usize, message: String },
}

/// The `eval_mean` column of a metrics file.
pub fn eval_means(text: &str) -> Result<Vec<f64>, String> {
    let mut lines = text.lines();
    let schema = format!("# {}", IterationRecord::SCHEMA);
    if lines.next() != Some(schema.as_str()) {
        return Err(format!("first line must be `{schema}`"));
    }
    let header: Vec<&str> = lines.next().ok_or("missing column header")?.split('\t').collect();
    let col = header.iter().position(|c| *c == "eval_mean").ok_or("no eval_mean column")?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split('\t')
                .nth(col)
                .and_then(|x| x.parse::<f64>().ok())
                .ok_or_else(|| format!("row {} has no numeric eval_mean", i + 1))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub mean: Vec<f64>,
    /// `1.96 * s / sqrt(n)` with `s` the sample standard deviation over
    /// seeds; zero for a single seed.
    pub half_width: Vec<f64>,
    pub seeds: usize,
    /// Some logs were longer than the shortest one and got cut.
    pub truncated: bool,
}

pub fn learning_curve(logs: &[Vec<f64>]) -> Result<Curve, PlotError> {
    let len = logs.iter().map(Vec::len).min().ok_or(PlotError::NoLogs)?;
    let truncated = logs.iter().any(|l| l.len() != len);
    if truncated {
        log::warn!("metrics logs differ in length; truncating to {len} iterations");
    }
    let n = logs.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut half_width = Vec::with_capacity(len);
    for t in 0..len {
        let m = logs.iter().map(|l| l[t]).sum::<f64>() / n;
        let hw = if logs.len() > 1 {
            let var = logs.iter().map(|l| (l[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        mean.push(m);
        half_width.push(hw);
    }
    Ok(Curve { mean, half_width, seeds: logs.len(), truncated })
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    mag * if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    }
}

pub fn render_svg(curve: &Curve, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let len = curve.mean.len();
    let lo = curve.mean.iter().zip(&curve.half_width).map(|(m, h)| m - h).fold(f64::INFINITY, f64::min);
    let hi = curve.mean.iter().zip(&curve.half_width).map(|(m, h)| m + h).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    };
    let x_max = (len.max(2) - 1) as f64;
    let px = |t: f64| LEFT + t / x_max * (W - LEFT - RIGHT);
    let py = |v: f64| TOP + (hi - v) / (hi - lo) * (H - TOP - BOTTOM);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));

    let step = nice_step(hi - lo);
    let mut v = (lo / step).ceil() * step;
    while v <= hi {
        let y = py(v);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, W - RIGHT);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, v);
        v += step;
    }
    let xstep = nice_step(x_max).max(1.0);
    let mut t = 0.0;
    while t <= x_max {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(t),
            H - BOTTOM + 18.0,
            t
        );
        t += xstep;
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration</text>"#, (LEFT + W - RIGHT) / 2.0, H - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">mean eval return</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0
    );

    if len > 0 {
        let xs: Vec<f64> = (0..len).map(|t| px(t as f64)).collect();
        let mut band = Vec::with_capacity(2 * len);
        band.extend((0..len).map(|t| format!("{:.2},{:.2}", xs[t], py(curve.mean[t] + curve.half_width[t]))));
        band.extend((0..len).rev().map(|t| format!("{:.2},{:.2}", xs[t], py(curve.mean[t] - curve.half_width[t]))));
        let _ = writeln!(svg, r##"<polygon class="band" points="{}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##, band.join(" "));
        let line: Vec<String> = (0..len).map(|t| format!("{:.2},{:.2}", xs[t], py(curve.mean[t]))).collect();
        let _ = writeln!(svg, r##"<polyline class="mean" points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##, line.join(" "));
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{} seed(s), 95% band</text>"#,
        W - RIGHT - 6.0,
        TOP + 16.0,
        curve.seeds
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_log_has_no_band() {
        let c = learning_curve(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(c.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(c.half_width, vec![0.0; 3]);
    }

    #[test]
    fn constant_returns_give_flat_curve() {
        let c = learning_curve(&[vec![-5.0; 4], vec![-5.0; 4]]).unwrap();
        assert_eq!(c.mean, vec![-5.0; 4]);
        assert_eq!(c.half_width, vec![0.0; 4]);
    }

    #[test]
    fn logs_are_truncated_to_the_shortest() {
        let c = learning_curve(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0]]).unwrap();
        assert!(c.truncated);
        assert_eq!(c.mean.len(), 2);
        assert!(matches!(learning_curve(&[]), Err(PlotError::NoLogs)));
    }

    #[test]
    fn svg_is_well_formed_for_a_single_point() {
        let c = learning_curve(&[vec![3.0]]).unwrap();
        let svg = render_svg(&c, "a <b>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt;b&gt;"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn eval_column_is_read_by_name() {
        let text = "# moie-metrics v1\niteration\teval_mean\n0\t-3.5\n1\t2\n";
        assert_eq!(eval_means(text).unwrap(), vec![-3.5, 2.0]);
        assert!(eval_means("iteration\teval_mean\n").is_err());
    }
}
