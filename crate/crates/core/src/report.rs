//! Tabular and SVG output for sweep records.

use std::fmt::Write as _;

use crate::guidance::Strategy;
use crate::sweep::SweepRecord;

pub const CSV_HEADER: [&str; 17] = [
    "strategy",
    "omega_c",
    "omega_s",
    "t_sw",
    "q",
    "r",
    "variant",
    "condition",
    "n_samples",
    "steps",
    "seed",
    "fidelity_mean",
    "fidelity_std",
    "context_mean",
    "context_std",
    "calls_per_sample",
    "wall_ms",
];

/// Decimal rendering with at least 9 significant digits that parses back to
/// the same `f64`.
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0.00000000".into();
    }
    // `{:e}` yields the shortest round-trip mantissa.
    let sci = format!("{v:e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits = mantissa.chars().filter(char::is_ascii_digit).count() as i32;
    let decimals = (digits.max(9) - 1 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_number).unwrap_or_default()
}

/// CSV cells for one record, in [`CSV_HEADER`] order; parameters the
/// strategy does not use are empty.
pub fn csv_row(rec: &SweepRecord) -> Vec<String> {
    let (omega_c, omega_s, t_sw, q, r) = match rec.config.strategy {
        Strategy::Base { omega } => (Some(omega), None, None, None, None),
        Strategy::Superclass { omega } => (None, Some(omega), None, None, None),
        Strategy::Switching { omega, t_sw } => (Some(omega), Some(omega), Some(t_sw), None, None),
        Strategy::Mixed { omega_c, omega_s } => (Some(omega_c), Some(omega_s), None, None, None),
        Strategy::MultiStage { omega_c, omega_s, t_sw } => (Some(omega_c), Some(omega_s), Some(t_sw), None, None),
        Strategy::Masked { omega_c, omega_s, t_sw, q, .. } => (Some(omega_c), Some(omega_s), Some(t_sw), Some(q), None),
        Strategy::ProFusion { omega_c, omega_s, r } => (Some(omega_c), Some(omega_s), None, None, Some(r)),
    };
    let m = &rec.metrics;
    vec![
        rec.config.kind().to_string(),
        opt(omega_c),
        opt(omega_s),
        t_sw.map(|t| t.to_string()).unwrap_or_default(),
        opt(q),
        opt(r),
        rec.config.superclass_source.variant.to_string(),
        rec.config.superclass_source.condition.to_string(),
        rec.n_samples.to_string(),
        rec.steps.to_string(),
        rec.seed.to_string(),
        format_number(m.fidelity_mean),
        format_number(m.fidelity_std),
        format_number(m.context_mean),
        format_number(m.context_std),
        format_number(rec.calls_per_sample),
        format_number(rec.wall_ms),
    ]
}

/// A named set of points drawn with one colour.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec<'a> {
    pub series: &'a [Series],
    /// Drawn as one polyline, in the given order.
    pub front: Option<&'a [(f64, f64)]>,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub title: &'a str,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    if span <= 0.0 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Standalone SVG scatter of metric space. Non-finite points are skipped.
pub fn svg_scatter(spec: &PlotSpec) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 160.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;

    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let all: Vec<(f64, f64)> = spec
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .chain(spec.front.into_iter().flatten())
        .filter(finite)
        .copied()
        .collect();
    let (x0, x1) = padded_range(all.iter().map(|p| p.0));
    let (y0, y1) = padded_range(all.iter().map(|p| p.1));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        xml_escape(spec.title)
    );
    let _ = writeln!(
        svg,
        r##"<g stroke="#333333" fill="none"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"##,
        b = TOP + ph,
        r = LEFT + pw
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(xv),
            TOP + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 16.0,
        xml_escape(spec.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        xml_escape(spec.y_label)
    );

    if let Some(front) = spec.front {
        let pts: Vec<String> = front
            .iter()
            .filter(finite)
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#000000" stroke-width="1.5" stroke-dasharray="4 3"/>"##,
            pts.join(" ")
        );
    }

    for (k, series) in spec.series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let _ = writeln!(svg, r#"<g fill="{colour}" data-series="{}">"#, xml_escape(&series.name));
        for &(x, y) in series.points.iter().filter(finite) {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="4"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(svg, "</g>");
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="{colour}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            LEFT + pw + 20.0,
            ly,
            LEFT + pw + 38.0,
            ly + 10.0,
            xml_escape(&series.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{MaskProvider, StrategyConfig};
    use crate::metrics::MetricRecord;
    use proptest::num::f64::{NORMAL, SUBNORMAL, ZERO};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn record(strategy: Strategy) -> SweepRecord {
        SweepRecord {
            index: 0,
            config: StrategyConfig::new(strategy),
            steps: 50,
            n_samples: 16,
            seed: 42,
            metrics: MetricRecord {
                fidelity_mean: -1.25,
                fidelity_std: 0.5,
                context_mean: -3.0,
                context_std: 0.1,
                n: 16,
            },
            calls_per_sample: 150.0,
            wall_ms: 1.5,
        }
    }

    #[test]
    fn numbers_keep_nine_significant_digits() {
        assert_eq!(format_number(1.5), "1.50000000");
        assert_eq!(format_number(-0.1), "-0.100000000");
        assert_eq!(format_number(150.0), "150.000000");
        assert_eq!(format_number(0.0), "0.00000000");
        assert_eq!(format_number(1234567890123.0), "1234567890123");
        assert_eq!(format_number(0.1 + 0.2), "0.30000000000000004");
        assert!(!format_number(1e-7).contains('e'));
    }

    #[test]
    fn rows_follow_the_header() {
        let row = csv_row(&record(Strategy::Mixed { omega_c: 3.5, omega_s: 3.5 }));
        assert_eq!(row.len(), CSV_HEADER.len());
        assert_eq!(row[0], "mixed");
        assert_eq!(&row[3..6], &["", "", ""]);
        assert_eq!(row[6], "tuned");
        assert_eq!(row[7], "superclass");
        assert_eq!(row[10], "42");

        let row = csv_row(&record(Strategy::Base { omega: 7.0 }));
        assert_eq!((row[1].as_str(), row[2].as_str()), ("7.00000000", ""));
        let row = csv_row(&record(Strategy::Superclass { omega: 7.0 }));
        assert_eq!((row[1].as_str(), row[2].as_str()), ("", "7.00000000"));
        let row = csv_row(&record(Strategy::Masked {
            omega_c: 3.5,
            omega_s: 3.5,
            omega_c0: 3.5,
            omega_s0: 3.5,
            t_sw: 3,
            q: 0.3,
            provider: MaskProvider::Divergence,
            basic: false,
        }));
        assert_eq!((row[3].as_str(), row[4].as_str()), ("3", "0.300000000"));
    }

    #[test]
    fn svg_marks_and_escaping() {
        let series = [
            Series { name: "mixed".into(), points: vec![(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)] },
            Series { name: "a<b & c".into(), points: vec![(2.0, f64::NAN), (0.2, 0.2)] },
        ];
        let front = [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)];
        let svg = svg_scatter(&PlotSpec {
            series: &series,
            front: Some(&front),
            x_label: "context_mean",
            y_label: "fidelity_mean",
            title: "t",
        });
        assert_eq!(svg.matches("<circle").count(), 4);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("a&lt;b &amp; c"));
        assert!(!svg.contains("NaN"));
        let again = svg_scatter(&PlotSpec {
            series: &series,
            front: Some(&front),
            x_label: "context_mean",
            y_label: "fidelity_mean",
            title: "t",
        });
        assert_eq!(svg, again);
    }

    proptest! {
        #[test]
        fn numbers_roundtrip(v in NORMAL | SUBNORMAL | ZERO) {
            let s = format_number(v);
            prop_assert_eq!(s.parse::<f64>().unwrap(), v);
            prop_assert!(!s.contains('e'));
            let digits = s.trim_start_matches('-').replace('.', "");
            let significant = digits.trim_start_matches('0').len();
            prop_assert!(significant >= 9 || v == 0.0, "{}", s);
        }
    }
}
