//! Rasterized report graphics: tamper overlays, metric bar charts, and
//! face-resolution histograms.
//!
//! Everything is drawn into plain CHW float canvases and saved as PNG, with
//! text from a built-in 5x7 pixel font, so rendering needs no system fonts
//! and is byte-deterministic across machines.

use std::path::Path;

use ndarray::Array3;

use crate::data::save_image;
use crate::error::{Error, Result};
use crate::graph::Real;

const RED: [f64; 3] = [0.86, 0.08, 0.08];
const BAR_BLUE: [f64; 3] = [0.27, 0.45, 0.70];
const INK: [f64; 3] = [0.12, 0.12, 0.12];
const GRID_GRAY: [f64; 3] = [0.82, 0.82, 0.82];

/// Semi-transparent red fill plus a solid border over every flagged face,
/// leaving all other pixels bit-identical to the input.
pub fn overlay_flags<F: Real>(image: &Array3<F>, faces: &[([f64; 4], bool)]) -> Array3<F> {
    let mut out = image.clone();
    let (_, h, w) = out.dim();
    for (bx, flagged) in faces {
        if !flagged {
            continue;
        }
        let [x0, y0, x1, y1] = *bx;
        let xa = (x0.floor().max(0.0) as usize).min(w);
        let xb = (x1.ceil().max(0.0) as usize).min(w);
        let ya = (y0.floor().max(0.0) as usize).min(h);
        let yb = (y1.ceil().max(0.0) as usize).min(h);
        for y in ya..yb {
            for x in xa..xb {
                let border = y < ya + 2 || y + 2 >= yb || x < xa + 2 || x + 2 >= xb;
                let alpha = if border { 1.0 } else { 0.45 };
                for c in 0..3 {
                    let p = out[[c, y, x]].to_f64();
                    out[[c, y, x]] = F::from_f64(p * (1.0 - alpha) + RED[c] * alpha);
                }
            }
        }
    }
    out
}

/// 5x7 glyph rows, bit 4 the leftmost column. Text is lowercased before
/// lookup; characters outside the set render as a hollow box.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_lowercase() {
        ' ' => [0, 0, 0, 0, 0, 0, 0],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'a' => [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111],
        'b' => [0b10000, 0b10000, 0b11110, 0b10001, 0b10001, 0b10001, 0b11110],
        'c' => [0b00000, 0b00000, 0b01110, 0b10000, 0b10000, 0b10001, 0b01110],
        'd' => [0b00001, 0b00001, 0b01111, 0b10001, 0b10001, 0b10001, 0b01111],
        'e' => [0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110],
        'f' => [0b00110, 0b01001, 0b01000, 0b11100, 0b01000, 0b01000, 0b01000],
        'g' => [0b00000, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'h' => [0b10000, 0b10000, 0b11110, 0b10001, 0b10001, 0b10001, 0b10001],
        'i' => [0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110],
        'j' => [0b00010, 0b00000, 0b00110, 0b00010, 0b00010, 0b10010, 0b01100],
        'k' => [0b10000, 0b10000, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010],
        'l' => [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'm' => [0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10101, 0b10101],
        'n' => [0b00000, 0b00000, 0b11110, 0b10001, 0b10001, 0b10001, 0b10001],
        'o' => [0b00000, 0b00000, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
        'p' => [0b00000, 0b00000, 0b11110, 0b10001, 0b11110, 0b10000, 0b10000],
        'q' => [0b00000, 0b00000, 0b01111, 0b10001, 0b01111, 0b00001, 0b00001],
        'r' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10000, 0b10000, 0b10000],
        's' => [0b00000, 0b00000, 0b01111, 0b10000, 0b01110, 0b00001, 0b11110],
        't' => [0b01000, 0b01000, 0b11100, 0b01000, 0b01000, 0b01001, 0b00110],
        'u' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101],
        'v' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'w' => [0b00000, 0b00000, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'x' => [0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
        'y' => [0b00000, 0b00000, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'z' => [0b00000, 0b00000, 0b11111, 0b00010, 0b00100, 0b01000, 0b11111],
        '.' => [0, 0, 0, 0, 0, 0b01100, 0b01100],
        ',' => [0, 0, 0, 0, 0b00110, 0b00110, 0b01100],
        '-' => [0, 0, 0, 0b01110, 0, 0, 0],
        '+' => [0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0],
        ':' => [0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        '=' => [0, 0, 0b11111, 0, 0b11111, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0b11111],
        _ => [0b11111, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11111],
    }
}

/// Pixel advance per character at the given integer scale.
fn char_advance(scale: usize) -> usize {
    6 * scale
}

fn text_width(text: &str, scale: usize) -> usize {
    text.chars().count() * char_advance(scale)
}

fn put_pixel(img: &mut Array3<f64>, x: i64, y: i64, color: [f64; 3]) {
    let (_, h, w) = img.dim();
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        return;
    }
    for c in 0..3 {
        img[[c, y as usize, x as usize]] = color[c];
    }
}

fn draw_text(img: &mut Array3<f64>, x: i64, y: i64, text: &str, color: [f64; 3], scale: usize) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5 {
                if bits & (1 << (4 - rx)) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put_pixel(
                                img,
                                cx + (rx * scale + sx) as i64,
                                y + (ry * scale + sy) as i64,
                                color,
                            );
                        }
                    }
                }
            }
        }
        cx += char_advance(scale) as i64;
    }
}

fn fill_rect(img: &mut Array3<f64>, x0: i64, y0: i64, x1: i64, y1: i64, color: [f64; 3]) {
    for y in y0.max(0)..y1.max(0) {
        for x in x0.max(0)..x1.max(0) {
            put_pixel(img, x, y, color);
        }
    }
}

/// Smallest value of the form {1, 2, 5} x 10^k at or above `v`.
fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let k = v.log10().floor();
    let base = 10f64.powf(k);
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * base >= v * (1.0 - 1e-12) {
            return m * base;
        }
    }
    10.0 * base
}

fn tick_decimals(y_max: f64) -> usize {
    if y_max >= 10.0 {
        0
    } else if y_max >= 1.0 {
        1
    } else if y_max >= 0.1 {
        2
    } else {
        3
    }
}

/// Splits a label into at most two lines that fit `width` pixels, breaking
/// at spaces and truncating the tail if it still does not fit.
fn wrap_label(label: &str, width: usize, scale: usize) -> Vec<String> {
    let fits = |s: &str| text_width(s, scale) <= width;
    if fits(label) {
        return vec![label.to_string()];
    }
    let max_chars = (width / char_advance(scale)).max(1);
    let mut first = String::new();
    let mut rest = String::new();
    for word in label.split(' ') {
        let candidate = if first.is_empty() { word.to_string() } else { format!("{first} {word}") };
        if fits(&candidate) && rest.is_empty() {
            first = candidate;
        } else {
            if !rest.is_empty() {
                rest.push(' ');
            }
            rest.push_str(word);
        }
    }
    if first.is_empty() {
        first = label.chars().take(max_chars).collect();
        rest.clear();
    }
    if rest.is_empty() {
        return vec![first];
    }
    if !fits(&rest) {
        let mut cut: String = rest.chars().take(max_chars.saturating_sub(1)).collect();
        cut.push('.');
        rest = cut;
    }
    vec![first, rest]
}

/// Labelled vertical bar chart saved as PNG. Values must be finite and
/// non-negative; the y-axis scales to a round upper bound automatically.
pub fn render_bar_chart(title: &str, entries: &[(String, f64)], path: &Path) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::validation("bar chart needs at least one entry"));
    }
    if entries.iter().any(|(_, v)| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation("bar chart values must be finite and non-negative"));
    }
    let slot = 110usize;
    let (left, right, top, bottom_pad) = (70usize, 25usize, 56usize, 64usize);
    let plot_h = 280usize;
    let w = left + entries.len() * slot + right;
    let h = top + plot_h + bottom_pad;
    let mut img = Array3::from_elem((3, h, w), 1.0_f64);

    draw_text(&mut img, 12, 12, title, INK, 2);
    let y_max = nice_max(entries.iter().map(|(_, v)| *v).fold(0.0, f64::max));
    let dec = tick_decimals(y_max);
    let base_y = (top + plot_h) as i64;
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        let y = base_y - (frac * plot_h as f64).round() as i64;
        let color = if t == 0 { INK } else { GRID_GRAY };
        fill_rect(&mut img, left as i64, y, (w - right) as i64, y + 1, color);
        let label = format!("{:.*}", dec, frac * y_max);
        let tx = left as i64 - 8 - text_width(&label, 1) as i64;
        draw_text(&mut img, tx, y - 3, &label, INK, 1);
    }
    fill_rect(&mut img, left as i64, top as i64, left as i64 + 1, base_y, INK);

    for (i, (label, value)) in entries.iter().enumerate() {
        let x_mid = (left + i * slot + slot / 2) as i64;
        let bar_w = (slot as f64 * 0.55) as i64;
        let bar_h = ((value / y_max) * plot_h as f64).round() as i64;
        fill_rect(&mut img, x_mid - bar_w / 2, base_y - bar_h, x_mid + bar_w / 2, base_y, BAR_BLUE);
        let vtext = format!("{value:.*}", dec + 1);
        draw_text(
            &mut img,
            x_mid - text_width(&vtext, 1) as i64 / 2,
            base_y - bar_h - 12,
            &vtext,
            INK,
            1,
        );
        for (line_no, line) in wrap_label(label, slot - 8, 1).iter().enumerate() {
            draw_text(
                &mut img,
                x_mid - text_width(line, 1) as i64 / 2,
                base_y + 10 + (line_no as i64) * 10,
                line,
                INK,
                1,
            );
        }
    }
    save_image(path, &img)
}

/// Face-size histogram with the mean annotated in the title, one bar per
/// fixed-width bin starting at 0 px.
pub fn render_resolution_histogram(
    hist: &[usize],
    bin_px: f64,
    mean: f64,
    axis: &str,
    path: &Path,
) -> Result<()> {
    if hist.is_empty() {
        return Err(Error::validation("histogram needs at least one bin"));
    }
    let entries: Vec<(String, f64)> = hist
        .iter()
        .enumerate()
        .map(|(i, &count)| (format!("{:.0}", i as f64 * bin_px), count as f64))
        .collect();
    let title = format!("face {axis} (px), mean {mean:.1}");
    render_bar_chart(&title, &entries, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_touches_only_flagged_boxes() {
        let image = Array3::from_shape_fn((3, 40, 40), |(c, y, x)| {
            ((c + 2 * y + 3 * x) % 17) as f32 / 17.0
        });
        let faces = [([4.0, 4.0, 14.0, 14.0], true), ([20.0, 20.0, 30.0, 32.0], false)];
        let out = overlay_flags(&image, &faces);
        for y in 0..40 {
            for x in 0..40 {
                let inside_flagged = (4..14).contains(&y) && (4..14).contains(&x);
                for c in 0..3 {
                    if inside_flagged {
                        let orig = image[[c, y, x]];
                        let red = RED[c] as f32;
                        let moved = (out[[c, y, x]] - red).abs() <= (orig - red).abs();
                        assert!(moved, "pixel ({y},{x}) channel {c} did not move toward red");
                    } else {
                        assert_eq!(out[[c, y, x]], image[[c, y, x]], "({y},{x},{c}) changed");
                    }
                }
            }
        }
    }

    #[test]
    fn overlay_clips_out_of_canvas_boxes() {
        let image = Array3::from_elem((3, 16, 16), 0.5_f64);
        let faces = [([-5.0, -5.0, 8.0, 40.0], true)];
        let out = overlay_flags(&image, &faces);
        assert_eq!(out.dim(), (3, 16, 16));
        assert_ne!(out[[0, 0, 0]], 0.5);
        assert_eq!(out[[0, 0, 12]], 0.5);
    }

    #[test]
    fn every_charset_glyph_has_ink() {
        for c in "0123456789abcdefghijklmnopqrstuvwxyz.,-+:%()/=_".chars() {
            assert!(glyph(c).iter().any(|&r| r != 0), "glyph {c:?} is blank");
        }
        assert!(glyph(' ').iter().all(|&r| r == 0));
        // unknown characters render as a visible box, not silence
        assert!(glyph('@').iter().any(|&r| r != 0));
    }

    #[test]
    fn nice_max_rounds_up_to_125_grid() {
        assert_eq!(nice_max(0.43), 0.5);
        assert_eq!(nice_max(0.04), 0.05);
        assert_eq!(nice_max(1.0), 1.0);
        assert_eq!(nice_max(87.0), 100.0);
        assert_eq!(nice_max(0.0), 1.0);
        assert_eq!(nice_max(2.0), 2.0);
    }

    #[test]
    fn wrap_label_breaks_at_spaces_and_truncates() {
        assert_eq!(wrap_label("short", 200, 1), vec!["short"]);
        let two = wrap_label("faceswap + jpeg q75", 80, 1);
        assert_eq!(two.len(), 2);
        assert!(text_width(&two[0], 1) <= 80);
        let cramped = wrap_label("averyverylongsinglewordlabel", 40, 1);
        assert!(text_width(&cramped[0], 1) <= 42);
    }

    #[test]
    fn bar_chart_renders_deterministic_png() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ("identity".to_string(), 0.01),
            ("jpeg q50".to_string(), 0.18),
            ("faceswap".to_string(), 0.47),
        ];
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        render_bar_chart("localizer ber per distortion", &entries, &a).unwrap();
        render_bar_chart("localizer ber per distortion", &entries, &b).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        let bytes_b = std::fs::read(&b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let img = image::open(&a).unwrap();
        assert_eq!(img.width() as usize, 70 + 3 * 110 + 25);
        assert_eq!(img.height() as usize, 56 + 280 + 64);
    }

    #[test]
    fn bar_chart_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        assert!(render_bar_chart("t", &[], &path).is_err());
        let neg = vec![("a".to_string(), -0.1)];
        assert!(render_bar_chart("t", &neg, &path).is_err());
        let nan = vec![("a".to_string(), f64::NAN)];
        assert!(render_bar_chart("t", &nan, &path).is_err());
    }

    #[test]
    fn histogram_uses_bin_starts_as_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        render_resolution_histogram(&[0, 3, 9, 4], 8.0, 21.4, "width", &path).unwrap();
        assert!(path.exists());
    }
}
