//! Minimal SVG figures, written only when the config asks for plots.

use std::fmt::Write;

const CELL: usize = 56;
const MARGIN: usize = 64;

/// Annotated heatmap of a square matrix (percent values), greyscale from
/// the smallest to the largest finite entry.
pub fn heatmap_svg<const N: usize>(
    title: &str,
    labels: &[&str; N],
    matrix: &[[f64; N]; N],
) -> String {
    let finite = matrix.iter().flatten().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let size = MARGIN + N * CELL + 8;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="11">"#,
        size + 16
    );
    let _ = writeln!(s, r#"<text x="4" y="14">{}</text>"#, escape(title));
    let top = MARGIN + 16;
    for (i, label) in labels.iter().enumerate() {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#,
            top - 6,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN - 6,
            top + i * CELL + CELL / 2 + 4,
            escape(label)
        );
    }
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (MARGIN + j * CELL, top + i * CELL);
            let shade = if v.is_finite() {
                235.0 - 185.0 * (v - lo) / span
            } else {
                255.0
            };
            let g = shade.round() as u8;
            let ink = if g < 140 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})" stroke="white"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
