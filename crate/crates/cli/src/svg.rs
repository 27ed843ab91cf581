//! Static grouped bar chart.

use std::fmt::Write as _;

const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One group of bars per entry of `groups`, one bar per series;
/// `values[g][s]`. The y axis starts at 0 and ends at the next multiple
/// of 10 above the maximum.
pub fn grouped_bars(
    title: &str,
    y_label: &str,
    groups: &[String],
    series: &[String],
    values: &[Vec<f64>],
) -> String {
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let bar_w = 18.0;
    let group_w = bar_w * series.len().max(1) as f64 + 24.0;
    let plot_w = group_w * groups.len().max(1) as f64;
    let plot_h = 260.0;
    let width = left + plot_w + right;
    let height = top + plot_h + bottom + 20.0 * series.len() as f64;
    let max = values
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let y_max = ((max / 10.0).ceil() * 10.0).max(10.0);
    let y = |v: f64| top + plot_h - plot_h * (v.max(0.0) / y_max);

    let mut s = String::new();
    let w = &mut s;
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        w,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        esc(title)
    )
    .unwrap();
    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let yy = y(v);
        writeln!(
            w,
            r##"<line x1="{left}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/>"##,
            left + plot_w
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
            left - 6.0,
            yy + 4.0
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        esc(y_label)
    )
    .unwrap();
    for (g, name) in groups.iter().enumerate() {
        let x0 = left + g as f64 * group_w + 12.0;
        for (k, v) in values[g].iter().enumerate() {
            let x = x0 + k as f64 * bar_w;
            let yy = y(*v);
            writeln!(
                w,
                r#"<rect x="{x:.1}" y="{yy:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {v:.2}</title></rect>"#,
                bar_w - 2.0,
                top + plot_h - yy,
                PALETTE[k % PALETTE.len()],
                esc(name),
                esc(&series[k])
            )
            .unwrap();
        }
        let cx = x0 + bar_w * series.len() as f64 / 2.0;
        writeln!(
            w,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="end" transform="rotate(-35 {cx:.1} {:.1})">{}</text>"#,
            top + plot_h + 14.0,
            top + plot_h + 14.0,
            esc(name)
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
        left + plot_w,
        top + plot_h,
        top + plot_h
    )
    .unwrap();
    for (k, name) in series.iter().enumerate() {
        let yy = top + plot_h + bottom + 20.0 * k as f64 - 10.0;
        writeln!(
            w,
            r#"<rect x="{left}" y="{:.1}" width="12" height="12" fill="{}"/>"#,
            yy - 10.0,
            PALETTE[k % PALETTE.len()]
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{:.1}" y="{yy:.1}">{}</text>"#,
            left + 18.0,
            esc(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_value_plus_legend() {
        let svg = grouped_bars(
            "spBLEU",
            "score",
            &["a-b".into(), "b-a".into()],
            &["BASE".into(), "BT&REC".into()],
            &[vec![1.0, 2.0], vec![3.0, 40.5]],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 1 + 4 + 2);
        assert!(svg.contains("BT&amp;REC"));
        assert!(svg.contains(">50</text>"));
    }
}
