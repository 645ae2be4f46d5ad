//! Static SVG box plots of AUC per (subjects per class, arm).

use std::fmt::Write as _;

use tdir_core::evaluation::{median, Arm, EvalReport};

#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary. Quartiles are the medians of the lower and upper
/// halves, the middle value excluded for odd counts; one value gives a
/// degenerate box.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mid = median(&s)?;
    let (lo, hi) = if n == 1 { (&s[..], &s[..]) } else { (&s[..n / 2], &s[n.div_ceil(2)..]) };
    Some(BoxStats {
        min: s[0],
        q1: median(lo)?,
        median: mid,
        q3: median(hi)?,
        max: s[n - 1],
    })
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn colour(arm: Arm) -> &'static str {
    match arm {
        Arm::Ptr => "#1f77b4",
        Arm::Npt => "#ff7f0e",
    }
}

/// One plot for one dataset tag: a group per size, a box per arm. The exact
/// summary values ride along as `data-*` attributes.
pub fn box_plot_svg(tag: &str, reports: &[EvalReport]) -> String {
    let mut sizes: Vec<usize> = reports.iter().map(|r| r.subjects_per_class).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let arms = [Arm::Ptr, Arm::Npt];
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y = |auc: f64| TOP + (1.0 - auc.clamp(0.0, 1.0)) * plot_h;
    let group_w = plot_w / sizes.len().max(1) as f64;
    let box_w = group_w / 4.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<title>AUC by subjects per class: {}</title>"#, escape(tag));
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(tag)
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            WIDTH - RIGHT,
            LEFT - 6.0,
            y(v) + 4.0,
            y = y(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">test AUC</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (g, &size) in sizes.iter().enumerate() {
        let gx = LEFT + g as f64 * group_w;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{size}</text>"#,
            gx + group_w / 2.0,
            HEIGHT - BOTTOM + 18.0
        );
        for (a, &arm) in arms.iter().enumerate() {
            let Some(r) = reports.iter().find(|r| r.subjects_per_class == size && r.arm == arm) else {
                continue;
            };
            let Some(b) = box_stats(&r.aucs) else { continue };
            let cx = gx + group_w * (a as f64 + 1.0) / 3.0;
            let c = colour(arm);
            let _ = writeln!(
                s,
                r#"<g class="box" data-size="{size}" data-arm="{arm}" data-n="{}" data-min="{}" data-q1="{}" data-median="{}" data-q3="{}" data-max="{}">"#,
                r.aucs.len(),
                b.min,
                b.q1,
                b.median,
                b.q3,
                b.max
            );
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="{c}"/>"#,
                y(b.max),
                y(b.min)
            );
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{box_w:.2}" height="{:.2}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
                cx - box_w / 2.0,
                y(b.q3),
                (y(b.q1) - y(b.q3)).max(0.5)
            );
            let _ = writeln!(
                s,
                r#"<line class="median" x1="{:.2}" x2="{:.2}" y1="{m:.2}" y2="{m:.2}" stroke="{c}" stroke-width="2"/>"#,
                cx - box_w / 2.0,
                cx + box_w / 2.0,
                m = y(b.median)
            );
            for v in &r.aucs {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{cx:.2}" cy="{:.2}" r="2" fill="{c}"/>"#,
                    y(*v)
                );
            }
            let _ = writeln!(s, "</g>");
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">subjects per class</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - BOTTOM + 38.0
    );
    for (a, &arm) in arms.iter().enumerate() {
        let x = WIDTH - RIGHT - 120.0 + a as f64 * 60.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{arm}</text>"#,
            HEIGHT - 16.0,
            colour(arm),
            x + 14.0,
            HEIGHT - 7.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_numbers() {
        let b = box_stats(&[0.9, 0.5, 0.7, 0.6, 0.8]).unwrap();
        let got = [b.min, b.q1, b.median, b.q3, b.max];
        for (g, want) in got.iter().zip([0.5, 0.55, 0.7, 0.85, 0.9]) {
            assert!((g - want).abs() < 1e-12, "{got:?}");
        }
        let one = box_stats(&[0.6]).unwrap();
        assert_eq!((one.min, one.q1, one.median, one.q3, one.max), (0.6, 0.6, 0.6, 0.6, 0.6));
        assert!(box_stats(&[]).is_none());
    }
}
