//! Shape overlays for visual prompts.
//!
//! Rasterization rule: a pixel is painted when its center `(x+0.5, y+0.5)`
//! lies inside or on the ideal shape boundary. Strokes grow inward from the
//! region edge, so a stroke-1 rectangle outline on a region is exactly the
//! region's one-pixel border ring.

use super::{Color, ImageRaster, RasterError, RectRegion};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlayShape {
    RectOutline,
    EllipseOutline,
    FilledDisc,
    Arrow,
}

/// Draws `shape` anchored to `region` and returns the modified copy. Only
/// pixels inside the shape's footprint change; the arrow extends above the
/// region and is clipped at the image edge.
pub fn draw_overlay(
    img: &ImageRaster,
    shape: OverlayShape,
    region: &RectRegion,
    color: Color,
    stroke: u32,
) -> Result<ImageRaster, RasterError> {
    region.validate(img.width(), img.height())?;
    if stroke == 0 {
        return Err(RasterError::InvalidParameter("stroke width must be at least 1".into()));
    }
    let mut out = img.clone();
    match shape {
        OverlayShape::RectOutline => rect_outline(&mut out, region, color, stroke),
        OverlayShape::EllipseOutline => ellipse(&mut out, region, color, Some(stroke)),
        OverlayShape::FilledDisc => ellipse(&mut out, region, color, None),
        OverlayShape::Arrow => arrow(&mut out, region, color, stroke),
    }
    Ok(out)
}

fn rect_outline(img: &mut ImageRaster, region: &RectRegion, color: Color, stroke: u32) {
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            let on_band = x - region.x0 < stroke
                || region.x1 - 1 - x < stroke
                || y - region.y0 < stroke
                || region.y1 - 1 - y < stroke;
            if on_band {
                img.set(x, y, color);
            }
        }
    }
}

/// Paints the ellipse inscribed in `region`; with `stroke` only the band
/// between it and a stroke-shrunken inner ellipse, otherwise filled.
fn ellipse(img: &mut ImageRaster, region: &RectRegion, color: Color, stroke: Option<u32>) {
    let cx = (region.x0 + region.x1) as f64 / 2.0;
    let cy = (region.y0 + region.y1) as f64 / 2.0;
    let rx = region.width() as f64 / 2.0;
    let ry = region.height() as f64 / 2.0;
    let inner = stroke.map(|s| ((rx - s as f64).max(0.0), (ry - s as f64).max(0.0)));
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let norm = |rx: f64, ry: f64| {
                if rx <= 0.0 || ry <= 0.0 {
                    f64::INFINITY
                } else {
                    let dx = (px - cx) / rx;
                    let dy = (py - cy) / ry;
                    dx * dx + dy * dy
                }
            };
            if norm(rx, ry) > 1.0 {
                continue;
            }
            if let Some((irx, iry)) = inner {
                if norm(irx, iry) < 1.0 {
                    continue;
                }
            }
            img.set(x, y, color);
        }
    }
}

/// Arrow length used by [`draw_overlay`]: a quarter of the smaller image
/// dimension, but never shorter than twice the stroke.
pub(crate) fn arrow_length(img_w: u32, img_h: u32, stroke: u32) -> f64 {
    (0.25 * img_w.min(img_h) as f64).max(2.0 * stroke as f64)
}

/// Vertical arrow whose tip touches the midpoint of the region's top edge,
/// pointing down at the region from above. Shaft thickness equals the stroke;
/// the head is a filled triangle 1.5 strokes wide on each side.
fn arrow(img: &mut ImageRaster, region: &RectRegion, color: Color, stroke: u32) {
    let s = stroke as f64;
    let cx = (region.x0 + region.x1) as f64 / 2.0;
    let tip_y = region.y0 as f64;
    let len = arrow_length(img.width(), img.height(), stroke);
    let head_len = (3.0 * s).min(len / 2.0);
    let head_halfw = 1.5 * s;
    let tail_y = tip_y - len;

    let x_lo = ((cx - head_halfw).floor().max(0.0)) as u32;
    let x_hi = ((cx + head_halfw).ceil() as u32).min(img.width());
    let y_lo = (tail_y.floor().max(0.0)) as u32;
    let y_hi = region.y0.min(img.height());
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if py < tail_y || py > tip_y {
                continue;
            }
            let in_shaft = (px - cx).abs() <= s / 2.0 && py <= tip_y - head_len;
            let halfw_at = head_halfw * (tip_y - py) / head_len;
            let in_head = py >= tip_y - head_len && (px - cx).abs() <= halfw_at;
            if in_shaft || in_head {
                img.set(x, y, color);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RED: Color = Color::new(255, 0, 0);
    const GRAY: Color = Color::new(120, 120, 120);

    fn base(w: u32, h: u32) -> ImageRaster {
        ImageRaster::new(w, h, GRAY).unwrap()
    }

    fn changed(a: &ImageRaster, b: &ImageRaster) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for y in 0..a.height() {
            for x in 0..a.width() {
                if a.get(x, y) != b.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn stroke_one_rect_outline_is_border_ring() {
        let img = base(8, 8);
        let region = RectRegion::new(2, 2, 5, 5);
        let out = draw_overlay(&img, OverlayShape::RectOutline, &region, RED, 1).unwrap();
        let mut expected: Vec<(u32, u32)> = Vec::new();
        for y in 2..5 {
            for x in 2..5 {
                if x == 2 || x == 4 || y == 2 || y == 4 {
                    expected.push((x, y));
                }
            }
        }
        assert_eq!(changed(&img, &out), expected);
        for &(x, y) in &expected {
            assert_eq!(out.get(x, y), RED);
        }
    }

    #[test]
    fn wide_stroke_fills_rect_region() {
        let img = base(8, 8);
        let region = RectRegion::new(1, 1, 5, 5);
        let out = draw_overlay(&img, OverlayShape::RectOutline, &region, RED, 10).unwrap();
        let touched = changed(&img, &out);
        assert_eq!(touched.len(), 16);
        assert!(touched.iter().all(|&(x, y)| region.contains(x, y)));
    }

    #[test]
    fn filled_disc_covers_tiny_region() {
        let img = base(10, 10);
        let region = RectRegion::new(4, 4, 6, 6);
        let out = draw_overlay(&img, OverlayShape::FilledDisc, &region, RED, 1).unwrap();
        assert_eq!(changed(&img, &out), vec![(4, 4), (5, 4), (4, 5), (5, 5)]);
    }

    #[test]
    fn ellipse_outline_stays_inside_region_and_leaves_center() {
        let img = base(20, 20);
        let region = RectRegion::new(3, 3, 17, 15);
        let out = draw_overlay(&img, OverlayShape::EllipseOutline, &region, RED, 2).unwrap();
        let touched = changed(&img, &out);
        assert!(!touched.is_empty());
        assert!(touched.iter().all(|&(x, y)| region.contains(x, y)));
        assert_eq!(out.get(10, 9), GRAY);
    }

    #[test]
    fn thick_ellipse_outline_equals_filled_disc() {
        let img = base(12, 12);
        let region = RectRegion::new(2, 2, 10, 10);
        let outline = draw_overlay(&img, OverlayShape::EllipseOutline, &region, RED, 6).unwrap();
        let filled = draw_overlay(&img, OverlayShape::FilledDisc, &region, RED, 6).unwrap();
        assert_eq!(outline, filled);
    }

    #[test]
    fn arrow_touches_top_edge_and_leaves_region_interior() {
        let img = base(40, 40);
        let region = RectRegion::new(10, 20, 30, 30);
        let stroke = 3;
        let out = draw_overlay(&img, OverlayShape::Arrow, &region, RED, stroke).unwrap();
        let touched = changed(&img, &out);
        assert!(!touched.is_empty());
        // Everything stays above the region's top edge, near the center column.
        let len = arrow_length(40, 40, stroke);
        for &(x, y) in &touched {
            assert!(y < region.y0);
            assert!((y as f64) >= region.y0 as f64 - len - 1.0);
            assert!((x as f64 + 0.5 - 20.0).abs() <= 1.5 * stroke as f64);
        }
        // The head reaches (almost) down to the tip; the last row may stay
        // empty when the tapering head is thinner than a pixel there.
        assert!(touched.iter().any(|&(_, y)| y >= region.y0 - 2));
    }

    #[test]
    fn arrow_clips_at_image_top() {
        let img = base(16, 16);
        let region = RectRegion::new(4, 1, 12, 8);
        let out = draw_overlay(&img, OverlayShape::Arrow, &region, RED, 2).unwrap();
        let touched = changed(&img, &out);
        assert!(touched.iter().all(|&(_, y)| y == 0));
    }

    #[test]
    fn overlay_validates_inputs() {
        let img = base(8, 8);
        let region = RectRegion::new(2, 2, 5, 5);
        assert!(draw_overlay(&img, OverlayShape::RectOutline, &region, RED, 0).is_err());
        let bad = RectRegion::new(2, 2, 9, 5);
        assert!(draw_overlay(&img, OverlayShape::RectOutline, &bad, RED, 1).is_err());
    }
}
