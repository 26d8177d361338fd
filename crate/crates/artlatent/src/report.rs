//! Report emission: delimited-text series and small vector charts rendered
//! from them. Everything is written atomically and deterministically, so an
//! unchanged workspace re-emits byte-identical files.

use std::path::Path;

use thiserror::Error;

use crate::util::atomic_write;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad series: {0}")]
    BadSeries(String),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Fixed-notation float formatting so output never depends on value
/// magnitude quirks; 6 significant decimals is plenty for plotting.
pub fn fmt_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.6}")
    }
}

/// Write a UTF-8 TSV with a header row.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    for row in rows {
        if row.len() != header.len() {
            return Err(ReportError::BadSeries(format!(
                "row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
    }
    let mut text = header.join("\t");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join("\t"));
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

/// One named line or scatter series.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Draw connecting lines; false gives a scatter.
    pub line: bool,
}

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 420.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f6fb2", "#c23b22", "#3a8f3a", "#8a5fb0", "#b08a2e", "#4a4a4a"];

/// Render a minimal SVG chart. Axes are linear with 5 labeled ticks each.
pub fn render_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if points.is_empty() {
        return Err(ReportError::BadSeries("chart has no points".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (CHART_W - 2.0 * MARGIN);
    let sy = |y: f64| CHART_H - MARGIN - (y - y0) / (y1 - y0) * (CHART_H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        CHART_W / 2.0,
        escape(title)
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = CHART_H - MARGIN,
        r = CHART_W - MARGIN,
        t = MARGIN
    ));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            sx(fx),
            CHART_H - MARGIN + 16.0,
            fmt_value(fx)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            sy(fy) + 4.0,
            fmt_value(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        CHART_W / 2.0,
        CHART_H - 8.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        CHART_H / 2.0,
        CHART_H / 2.0,
        escape(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.line && s.points.len() > 1 {
            let coords: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                coords.join(" ")
            ));
        } else {
            for &(x, y) in &s.points {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>\n",
                    sx(x),
                    sy(y)
                ));
            }
        }
        // Legend entry.
        let ly = MARGIN + 14.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            CHART_W - MARGIN - 130.0,
            ly - 9.0,
            CHART_W - MARGIN - 116.0,
            ly,
            escape(s.label)
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    atomic_write(path, svg.as_bytes())?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_roundtrip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.tsv");
        let rows = vec![
            vec!["1500".to_string(), fmt_value(0.125)],
            vec!["1510".to_string(), fmt_value(2.0)],
        ];
        write_tsv(&path, &["decade", "value"], &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "decade\tvalue\n1500\t0.125000\n1510\t2.0\n");
        let bad = vec![vec!["only-one".to_string()]];
        assert!(write_tsv(&path, &["a", "b"], &bad).is_err());
    }

    #[test]
    fn emission_is_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("t.tsv");
        let svg = dir.path().join("c.svg");
        let rows = vec![vec!["1".to_string(), "2".to_string()]];
        let series = [Series {
            label: "trend",
            points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)],
            line: true,
        }];
        write_tsv(&tsv, &["x", "y"], &rows).unwrap();
        render_chart(&svg, "title", "x", "y", &series).unwrap();
        let t1 = std::fs::read(&tsv).unwrap();
        let s1 = std::fs::read(&svg).unwrap();
        write_tsv(&tsv, &["x", "y"], &rows).unwrap();
        render_chart(&svg, "title", "x", "y", &series).unwrap();
        assert_eq!(t1, std::fs::read(&tsv).unwrap());
        assert_eq!(s1, std::fs::read(&svg).unwrap());
    }

    #[test]
    fn chart_is_valid_enough_svg() {
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("c.svg");
        let series = [
            Series { label: "a & b", points: vec![(0.0, 0.0), (1.0, 1.0)], line: true },
            Series { label: "dots", points: vec![(0.5, 0.7)], line: false },
        ];
        render_chart(&svg, "x < y", "x", "y", &series).unwrap();
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.ends_with("</svg>\n"));
        assert!(text.contains("a &amp; b"));
        assert!(text.contains("x &lt; y"));
        assert!(text.contains("<polyline"));
        assert!(text.contains("<circle"));
        assert!(render_chart(&svg, "t", "x", "y", &[]).is_err());
    }
}
