//! Line plots from CSV columns as standalone SVG.

use std::fmt::Write as _;

use log::warn;

use crate::CliError;

#[derive(Clone, Debug, Default)]
pub struct PlotSpec {
    pub x_col: String,
    pub y_col: String,
    pub group_col: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
    pub title: Option<String>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CliError> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        CliError::Usage(format!("column '{name}' not found; available: {}", headers.iter().collect::<Vec<_>>().join(", ")))
    })
}

fn parse_num(s: &str, col: &str, row: usize) -> Result<f64, CliError> {
    s.trim().parse().map_err(|_| CliError::Usage(format!("row {row}: column '{col}' value '{s}' is not a number")))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Groups rows by `group_col` in order of first appearance; rows sharing a
/// group and x value are merged into their median y.
fn read_series(csv_text: &str, spec: &PlotSpec) -> Result<Vec<Series>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let headers = rdr.headers().map_err(|e| CliError::Usage(format!("unreadable CSV header: {e}")))?.clone();
    let xi = column(&headers, &spec.x_col)?;
    let yi = column(&headers, &spec.y_col)?;
    let gi = spec.group_col.as_deref().map(|g| column(&headers, g)).transpose()?;
    let mut groups: Vec<(String, Vec<(f64, Vec<f64>)>)> = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Usage(format!("bad CSV row {}: {e}", n + 1)))?;
        let x = parse_num(&rec[xi], &spec.x_col, n + 1)?;
        let y = parse_num(&rec[yi], &spec.y_col, n + 1)?;
        if (spec.log_x && x <= 0.0) || (spec.log_y && y <= 0.0) || !x.is_finite() || !y.is_finite() {
            warn!("row {}: point ({x}, {y}) cannot be drawn on these axes; skipped", n + 1);
            continue;
        }
        let g = gi.map_or_else(|| spec.y_col.clone(), |i| format!("{}={}", &headers[i], &rec[i]));
        let idx = match groups.iter().position(|(name, _)| *name == g) {
            Some(i) => i,
            None => {
                groups.push((g, Vec::new()));
                groups.len() - 1
            }
        };
        let pts = &mut groups[idx].1;
        match pts.iter_mut().find(|(px, _)| *px == x) {
            Some((_, ys)) => ys.push(y),
            None => pts.push((x, vec![y])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(name, pts)| {
            let mut points: Vec<(f64, f64)> = pts.into_iter().map(|(x, mut ys)| (x, median(&mut ys))).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect())
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let t = |v: f64| if log { v.log10() } else { v };
        let (mut lo, mut hi) = values.map(t).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 1e-12 { 0.1 * lo.abs() } else { 1.0 };
            (lo, hi) = (lo - pad, hi + pad);
        }
        Axis { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let t = if self.log { v.log10() } else { v };
        (t - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=4)
            .map(|i| {
                let t = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                if self.log {
                    10f64.powf(t)
                } else {
                    t
                }
            })
            .collect()
    }
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders one polyline per group. Output depends only on the CSV bytes and
/// the plot settings.
pub fn render_svg(csv_text: &str, spec: &PlotSpec) -> Result<String, CliError> {
    let series = read_series(csv_text, spec)?;
    let xs = Axis::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), spec.log_x);
    let ys = Axis::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), spec.log_y);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |v: f64| LEFT + xs.frac(v) * pw;
    let py = |v: f64| TOP + (1.0 - ys.frac(v)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    if let Some(t) = &spec.title {
        let _ =
            writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(t));
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for t in xs.ticks() {
        let x = px(t);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, fmt_tick(t));
    }
    for t in ys.ticks() {
        let y = py(t);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 8.0, y + 4.0, fmt_tick(t));
    }
    let scale_note = |log: bool| if log { " (log)" } else { "" };
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(&spec.x_col),
        scale_note(spec.log_x)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&spec.y_col),
        scale_note(spec.log_y)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        if pts.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
