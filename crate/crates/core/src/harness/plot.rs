use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str, y: (f64, f64)) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
"#,
        W / 2.0,
        escape(title),
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
        MARGIN - 4.0,
        H - MARGIN,
        y.0,
        MARGIN - 4.0,
        MARGIN + 4.0,
        y.1,
    );
}

/// Line chart of one or more series.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut svg = String::new();
    frame(&mut svg, title, x_label, y_label, (y0, y1));
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{}">{x0:.3}</text><text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, H - MARGIN + 16.0, W - MARGIN, H - MARGIN + 16.0);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, W - MARGIN + 4.0, MARGIN + 16.0 * i as f64, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Vertical bar chart with one labelled bar per entry.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-12);
    let mut svg = String::new();
    frame(&mut svg, title, "", y_label, (0.0, top));
    let slot = (W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = if v.is_finite() { v / top * (H - 2.0 * MARGIN) } else { 0.0 };
        let x = MARGIN + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/><text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            H - MARGIN - h,
            slot * 0.8,
            COLORS[i % COLORS.len()],
            x + slot * 0.4,
            H - MARGIN + 16.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// `[C, H, W]` normalized image to 8-bit RGB using the normalization
/// constants; single-channel images are replicated to gray.
pub fn to_rgb(image: &DenseTensor, mean: &[f32; 3], std: &[f32; 3]) -> Result<(usize, usize, Vec<u8>)> {
    let [c, h, w] = <[usize; 3]>::try_from(image.shape()).map_err(|_| Error::dim("to_rgb expects [C,H,W]"))?;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch.min(c - 1) };
            let v = d[src * h * w + i] * std[ch] + mean[ch];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((w, h, out))
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png header: {e}")))?;
    writer.write_image_data(rgb).map_err(|e| Error::Data(format!("png data: {e}")))?;
    Ok(())
}

/// Panels side by side with a white gutter, written as one PNG.
pub fn write_panels(path: &Path, panels: &[&DenseTensor], mean: &[f32; 3], std: &[f32; 3]) -> Result<()> {
    const GAP: usize = 2;
    let imgs = panels.iter().map(|p| to_rgb(p, mean, std)).collect::<Result<Vec<_>>>()?;
    let (w, h) = imgs.first().map(|i| (i.0, i.1)).ok_or_else(|| Error::usage("no panels"))?;
    if imgs.iter().any(|i| (i.0, i.1) != (w, h)) {
        return Err(Error::dim("panels differ in size"));
    }
    let total_w = imgs.len() * w + (imgs.len() - 1) * GAP;
    let mut rgb = vec![255u8; total_w * h * 3];
    for (k, (_, _, px)) in imgs.iter().enumerate() {
        let x0 = k * (w + GAP);
        for y in 0..h {
            let dst = (y * total_w + x0) * 3;
            rgb[dst..dst + 3 * w].copy_from_slice(&px[y * w * 3..(y + 1) * w * 3]);
        }
    }
    write_png(path, total_w, h, &rgb)
}
