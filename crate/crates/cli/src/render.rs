use std::fmt::Write as _;
use std::path::Path;

use ocdd::ballworld::{DisplayState, Shape, BAR_HALF_THICKNESS};
use ocdd::{Error, Result};

const PIXELS: u32 = 400;

fn shape_svg(s: &DisplayState, opacity: f64, out: &mut String) {
    // clipped for display only
    let x = s.x.clamp(0.0, 1.0);
    let y = s.y.clamp(0.0, 1.0);
    match s.shape {
        Shape::Ball => {
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.5}" cy="{y:.5}" r="{:.5}" fill="{}" fill-opacity="{opacity:.3}"/>"#,
                s.size.abs(),
                s.color
            );
        }
        Shape::Bar => {
            let (a, h) = (s.size.abs(), BAR_HALF_THICKNESS);
            let _ = writeln!(
                out,
                r#"<rect x="{:.5}" y="{:.5}" width="{:.5}" height="{:.5}" transform="translate({x:.5} {y:.5}) rotate({:.4})" fill="{}" fill-opacity="{opacity:.3}"/>"#,
                -a,
                -h,
                2.0 * a,
                2.0 * h,
                s.rotation.to_degrees(),
                s.color
            );
        }
    }
}

fn document(body: &str) -> String {
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{p}" height="{p}" viewBox="0 0 1 1">"#,
            "\n",
            r#"<rect x="0" y="0" width="1" height="1" fill="white" stroke="silver" stroke-width="0.004"/>"#,
            "\n",
            r#"<g transform="matrix(1 0 0 -1 0 1)">"#,
            "\n{body}</g>\n</svg>\n"
        ),
        p = PIXELS,
        body = body
    )
}

/// One frame as a standalone SVG document.
pub fn frame_svg(frame: &[DisplayState]) -> String {
    let mut body = String::new();
    for s in frame {
        shape_svg(s, 1.0, &mut body);
    }
    document(&body)
}

/// All frames overlaid, later frames more opaque.
pub fn overlay_svg(frames: &[Vec<DisplayState>]) -> String {
    let mut body = String::new();
    let n = frames.len().max(2) - 1;
    for (l, frame) in frames.iter().enumerate() {
        let alpha = 0.15 + 0.85 * l as f64 / n as f64;
        for s in frame.iter().filter(|s| s.movable || l == 0) {
            shape_svg(s, if s.movable { alpha } else { 1.0 }, &mut body);
        }
    }
    document(&body)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `frame_NNN.svg` per frame, optional denoising snapshots, and an
/// `index.html` filmstrip.
pub fn render_dir(out: &Path, frames: &[Vec<DisplayState>], snapshots: &[(usize, Vec<Vec<DisplayState>>)]) -> Result<usize> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>trajectory</title>\n\
         <style>body{font-family:sans-serif} .strip{display:flex;flex-wrap:wrap;gap:4px} \
         .strip img{width:120px;height:120px}</style></head><body>\n<h2>Frames</h2>\n<div class=\"strip\">\n",
    );
    for (l, frame) in frames.iter().enumerate() {
        let name = format!("frame_{l:03}.svg");
        write(&out.join(&name), &frame_svg(frame))?;
        let _ = writeln!(html, r#"<img src="{name}" title="l = {l}">"#);
    }
    html.push_str("</div>\n");
    if !snapshots.is_empty() {
        html.push_str("<h2>Denoising</h2>\n<div class=\"strip\">\n");
        for (t, snap) in snapshots {
            let name = format!("denoise_t{t:04}.svg");
            write(&out.join(&name), &overlay_svg(snap))?;
            let _ = writeln!(html, r#"<figure><img src="{name}"><figcaption>t = {t}</figcaption></figure>"#);
        }
        html.push_str("</div>\n");
    }
    html.push_str("</body></html>\n");
    write(&out.join("index.html"), &html)?;
    Ok(frames.len())
}
