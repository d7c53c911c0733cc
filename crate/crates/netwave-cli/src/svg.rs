//! Tiny hand-rolled SVG line plots. Only used behind `--svg`; no numerics
//! live here, just coordinate mapping and markup.

use std::fs;
use std::path::Path;

use netwave::error::Result;

pub struct Series<'a> {
    pub label: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Option<Range> {
        let mut r: Option<Range> = None;
        for v in values.filter(|v| v.is_finite()) {
            r = Some(match r {
                None => Range { lo: v, hi: v },
                Some(Range { lo, hi }) => Range {
                    lo: lo.min(v),
                    hi: hi.max(v),
                },
            });
        }
        if let Some(ref mut r) = r {
            if r.hi - r.lo < 1e-300 {
                r.lo -= 0.5;
                r.hi += 0.5;
            }
        }
        r
    }

    fn map(&self, v: f64, out_lo: f64, out_hi: f64) -> f64 {
        out_lo + (v - self.lo) / (self.hi - self.lo) * (out_hi - out_lo)
    }
}

fn fmt_tick(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

/// Writes a line plot. With `log_y`, y values are plotted as log10 and
/// non-positive points are dropped.
pub fn write_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    log_y: bool,
    series: &[Series<'_>],
) -> Result<()> {
    let transform = |y: f64| if log_y { y.log10() } else { y };
    let keep = |y: f64| y.is_finite() && (!log_y || y > 0.0);

    let xr = Range::of(series.iter().flat_map(|s| s.xs.iter().cloned()));
    let yr = Range::of(
        series
            .iter()
            .flat_map(|s| s.ys.iter().cloned())
            .filter(|&y| keep(y))
            .map(transform),
    );

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        title
    ));
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    out.push_str(&format!(
        "<rect x=\"{x0}\" y=\"{y1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>\n",
        x1 - x0,
        y0 - y1
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        x_label
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        y_label
    ));

    if let (Some(xr), Some(yr)) = (xr, yr) {
        // Ticks: four per axis, at even fractions of the range.
        for k in 0..=3 {
            let f = k as f64 / 3.0;
            let xv = xr.lo + f * (xr.hi - xr.lo);
            let xpix = xr.map(xv, x0, x1);
            out.push_str(&format!(
                "<line x1=\"{xpix:.1}\" y1=\"{y0:.1}\" x2=\"{xpix:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
                y0 + 5.0
            ));
            out.push_str(&format!(
                "<text x=\"{xpix:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                y0 + 20.0,
                fmt_tick(xv, false)
            ));
            let yv = yr.lo + f * (yr.hi - yr.lo);
            let ypix = yr.map(yv, y0, y1);
            out.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{ypix:.1}\" x2=\"{x0:.1}\" y2=\"{ypix:.1}\" stroke=\"#333\"/>\n",
                x0 - 5.0
            ));
            out.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
                x0 - 9.0,
                ypix + 4.0,
                fmt_tick(yv, log_y)
            ));
        }

        for (si, s) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let mut points = String::new();
            for (&x, &y) in s.xs.iter().zip(s.ys) {
                if !x.is_finite() || !keep(y) {
                    continue;
                }
                let px = xr.map(x, x0, x1);
                let py = yr.map(transform(y), y0, y1);
                points.push_str(&format!("{px:.2},{py:.2} "));
            }
            if !points.is_empty() {
                out.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                    points.trim_end()
                ));
            }
            let ly = TOP + 18.0 + 18.0 * si as f64;
            out.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                x1 - 150.0,
                ly - 4.0,
                x1 - 122.0,
                ly - 4.0
            ));
            out.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>\n",
                x1 - 116.0,
                s.label
            ));
        }
    } else {
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#777\">no data</text>\n",
            (x0 + x1) / 2.0,
            (y0 + y1) / 2.0
        ));
    }

    out.push_str("</svg>\n");
    fs::write(path, out)?;
    Ok(())
}
