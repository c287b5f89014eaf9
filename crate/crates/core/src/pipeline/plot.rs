//! Minimal SVG charts rendered from already-written CSV artifacts.

use crate::Error;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 320.0;
const H: f64 = 220.0;
const PAD: f64 = 36.0;

fn read_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>, Error> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| Error::Data(e.to_string()))?;
            Ok(headers.iter().map(str::to_owned).zip(r.iter().map(str::to_owned)).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, k: &str) -> f64 {
    row.get(k).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

struct Panel {
    x0: f64,
    y0: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn new(index: usize, cols: usize, xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Panel {
            x0: (index % cols) as f64 * W,
            y0: (index / cols) as f64 * H,
            xr: range(&mut xs.clone()),
            yr: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + PAD + (x - self.xr.0) / (self.xr.1 - self.xr.0) * (W - 1.5 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + H - PAD - (y - self.yr.0) / (self.yr.1 - self.yr.0) * (H - 1.5 * PAD)
    }

    fn frame(&self, out: &mut String, title: &str) {
        let _ = write!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#999"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
            self.x0 + PAD,
            self.y0 + PAD / 2.0,
            W - 1.5 * PAD,
            H - 2.0 * PAD,
            self.x0 + PAD,
            self.y0 + PAD / 2.0 - 4.0,
            escape(title)
        );
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="9">{:.3e}</text><text x="{:.1}" y="{:.1}" font-size="9">{:.3e}</text>"#,
            self.x0 + 2.0,
            self.py(self.yr.1) + 3.0,
            self.yr.1,
            self.x0 + 2.0,
            self.py(self.yr.0),
            self.yr.0
        );
    }

    fn polyline(&self, out: &mut String, pts: &[(f64, f64)], colour: &str) {
        let p: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y)))
            .collect();
        let _ = write!(out, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, p.join(" "));
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn document(panels: usize, cols: usize, body: &str) -> String {
    let rows = panels.div_ceil(cols).max(1);
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\">{body}</svg>\n",
        W * cols as f64,
        H * rows as f64
    )
}

/// Centroid curves, one panel per sub-sector.
pub fn centroids_svg(path: &Path) -> Result<String, Error> {
    let rows = read_rows(path)?;
    let mut by: BTreeMap<String, BTreeMap<(String, String), Vec<(f64, f64)>>> = BTreeMap::new();
    for r in &rows {
        by.entry(r["subsector"].clone())
            .or_default()
            .entry((r["cluster"].clone(), r["regime"].clone()))
            .or_default()
            .push((num(r, "t"), num(r, "value")));
    }
    let cols = 3;
    let mut body = String::new();
    for (i, (sector, curves)) in by.iter().enumerate() {
        let pts = curves.values().flatten();
        let p = Panel::new(i, cols, pts.clone().map(|q| q.0), pts.map(|q| q.1));
        p.frame(&mut body, sector);
        for ((_, regime), c) in curves {
            p.polyline(&mut body, c, if regime == "high" { "#c0392b" } else { "#2c6fbb" });
        }
    }
    Ok(document(by.len(), cols, &body))
}

/// Coefficient estimates against -log p, one panel per coefficient, with the
/// mean estimate marked.
pub fn scatter_svg(path: &Path) -> Result<String, Error> {
    let rows = read_rows(path)?;
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.get("converged").map(String::as_str) == Some("true")) {
        by.entry(r["coefficient"].clone())
            .or_default()
            .push((num(r, "estimate"), num(r, "neg_log_p")));
    }
    let cols = 3;
    let mut body = String::new();
    for (i, (name, pts)) in by.iter().enumerate() {
        let p = Panel::new(i, cols, pts.iter().map(|q| q.0), pts.iter().map(|q| q.1));
        p.frame(&mut body, name);
        for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(body, r##"<circle cx="{:.1}" cy="{:.1}" r="1.5" fill="#555" fill-opacity="0.4"/>"##, p.px(x), p.py(y));
        }
        let mean = pts.iter().map(|q| q.0).sum::<f64>() / pts.len().max(1) as f64;
        p.polyline(&mut body, &[(mean, p.yr.0), (mean, p.yr.1)], "#e67e22");
    }
    Ok(document(by.len(), cols, &body))
}

/// Coefficient curves with their pointwise bands and the zero line.
pub fn bands_svg(path: &Path) -> Result<String, Error> {
    let rows = read_rows(path)?;
    let mut by: BTreeMap<String, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
    for r in &rows {
        by.entry(r["coefficient"].clone()).or_default().push((
            num(r, "t"),
            num(r, "estimate"),
            num(r, "lower"),
            num(r, "upper"),
        ));
    }
    let cols = 3;
    let mut body = String::new();
    for (i, (name, pts)) in by.iter().enumerate() {
        let ys = pts.iter().flat_map(|q| [q.2, q.3, 0.0]);
        let p = Panel::new(i, cols, pts.iter().map(|q| q.0), ys);
        p.frame(&mut body, name);
        let mut poly: Vec<String> = pts.iter().map(|q| format!("{:.1},{:.1}", p.px(q.0), p.py(q.3))).collect();
        poly.extend(pts.iter().rev().map(|q| format!("{:.1},{:.1}", p.px(q.0), p.py(q.2))));
        let _ = write!(body, r##"<polygon fill="#9ecae1" fill-opacity="0.6" points="{}"/>"##, poly.join(" "));
        p.polyline(&mut body, &[(p.xr.0, 0.0), (p.xr.1, 0.0)], "#999");
        let est: Vec<(f64, f64)> = pts.iter().map(|q| (q.0, q.1)).collect();
        p.polyline(&mut body, &est, "#08519c");
    }
    Ok(document(by.len(), cols, &body))
}
