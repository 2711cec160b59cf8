//! Coordinate conventions and ROI-local to full-image remapping.
//!
//! Pixel values are rounded with `f64::round` (nearest, ties away from zero).
//! Box coordinates clamp to `[0, W] x [0, H]`; point anchors clamp to
//! `[0, W-1] x [0, H-1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{format_number, GeomBox, Point, RectRegion};

pub const DEFAULT_ROI_SIDE: u32 = 1024;
pub const DEFAULT_SUPPRESSION_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// Integers in `[0, 1000]` relative to the canvas.
    #[default]
    Thousand,
    /// Reals in `[0, 1]` relative to the canvas.
    Unit,
    /// Absolute pixels.
    Abs,
}

impl Convention {
    pub const ALL: [Convention; 3] = [Convention::Thousand, Convention::Unit, Convention::Abs];

    pub fn as_str(self) -> &'static str {
        match self {
            Convention::Thousand => "thousand",
            Convention::Unit => "unit",
            Convention::Abs => "abs",
        }
    }

    /// Full-scale value for a canvas side of `extent` pixels.
    fn scale(self, extent: f64) -> f64 {
        match self {
            Convention::Thousand => 1000.0,
            Convention::Unit => 1.0,
            Convention::Abs => extent,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "thousand" | "1000" => Ok(Convention::Thousand),
            "unit" => Ok(Convention::Unit),
            "abs" | "absolute" => Ok(Convention::Abs),
            other => Err(Error::Config(format!("unknown coordinate convention {other:?}"))),
        }
    }
}

/// A convention bound to a reference canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordFrame {
    pub convention: Convention,
    pub width: u32,
    pub height: u32,
}

impl CoordFrame {
    pub fn new(convention: Convention, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidCoordinate(format!(
                "canvas must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(CoordFrame {
            convention,
            width,
            height,
        })
    }

    fn extent(&self, is_y: bool) -> f64 {
        f64::from(if is_y { self.height } else { self.width })
    }

    /// One coordinate to pixels, clamped to `[0, extent]`.
    pub fn value_to_abs(&self, v: f64, is_y: bool) -> Result<f64> {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidCoordinate(format!(
                "{} value {v} must be finite and non-negative",
                self.convention
            )));
        }
        let extent = self.extent(is_y);
        let px = match self.convention {
            Convention::Abs => v,
            c => (v / c.scale(extent) * extent).round(),
        };
        Ok(px.clamp(0.0, extent))
    }

    /// Interleaved `x, y, x, y, ...` list to pixels.
    pub fn to_abs(&self, values: &[f64]) -> Result<Vec<f64>> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.value_to_abs(v, i % 2 == 1))
            .collect()
    }

    /// Converts and revalidates a box; rounding can collapse tiny boxes.
    pub fn box_to_abs(&self, b: &GeomBox) -> Result<GeomBox> {
        GeomBox::from_coords(&self.to_abs(&b.coords())?)
    }

    /// Converts a point used as a pixel anchor; clamps to the last pixel.
    pub fn anchor_to_abs(&self, p: Point) -> Result<Point> {
        let x = self.value_to_abs(p.x, false)?;
        let y = self.value_to_abs(p.y, true)?;
        Ok(Point::new(
            x.min(f64::from(self.width - 1)),
            y.min(f64::from(self.height - 1)),
        ))
    }

    /// Pixel value to this convention, quantized to its granularity
    /// (integers for thousand and abs, 1e-4 for unit).
    pub fn value_from_abs(&self, px: f64, is_y: bool) -> f64 {
        let extent = self.extent(is_y);
        match self.convention {
            Convention::Thousand => (px / extent * 1000.0).round(),
            Convention::Unit => (px / extent * 10_000.0).round() / 10_000.0,
            Convention::Abs => px.round(),
        }
    }

    pub fn from_abs(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.value_from_abs(v, i % 2 == 1))
            .collect()
    }

    pub fn box_from_abs(&self, b: &GeomBox) -> GeomBox {
        b.map_coords(|v, is_y| self.value_from_abs(v, is_y))
    }

    /// Renders a pixel-space box as a bracketed list in this convention.
    pub fn render_box(&self, b: &GeomBox) -> String {
        render_list(&self.from_abs(&b.coords()))
    }

    pub fn render_point(&self, p: Point) -> String {
        render_list(&self.from_abs(&[p.x, p.y]))
    }

    /// Largest legal value in this convention along one axis.
    pub fn max_value(&self, is_y: bool) -> f64 {
        self.convention.scale(self.extent(is_y))
    }
}

pub fn render_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|&v| format_number(v)).collect();
    format!("[{}]", parts.join(", "))
}

/// Square crop window in absolute pixels. `valid_w x valid_h` is the image
/// content; extraction pads right and bottom to `side x side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiWindow {
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
    pub valid_w: u32,
    pub valid_h: u32,
}

impl RoiWindow {
    /// Window covering the whole image, used when the image is the ROI.
    pub fn full(width: u32, height: u32) -> Self {
        RoiWindow {
            x0: 0,
            y0: 0,
            side: width.max(height),
            valid_w: width,
            valid_h: height,
        }
    }

    /// Window over an explicit region. The side grows to fit regions larger
    /// than `side`, so local coordinates never need to exceed full scale.
    pub fn from_region(region: &RectRegion, side: u32, width: u32, height: u32) -> Result<Self> {
        region.validate()?;
        let r = region.clip(f64::from(width), f64::from(height));
        let x0 = r.x1.floor().max(0.0) as u32;
        let y0 = r.y1.floor().max(0.0) as u32;
        let x1 = (r.x2.ceil() as u32).min(width);
        let y1 = (r.y2.ceil() as u32).min(height);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidGeometry(format!(
                "region {region:?} lies outside the {width}x{height} image"
            )));
        }
        let (valid_w, valid_h) = (x1 - x0, y1 - y0);
        Ok(RoiWindow {
            x0,
            y0,
            side: side.max(valid_w).max(valid_h),
            valid_w,
            valid_h,
        })
    }

    /// Image content covered by the window.
    pub fn rect(&self) -> RectRegion {
        RectRegion::new(
            f64::from(self.x0),
            f64::from(self.y0),
            f64::from(self.x0 + self.valid_w),
            f64::from(self.y0 + self.valid_h),
        )
    }

    /// Frame for coordinates local to the padded `side x side` crop.
    pub fn local_frame(&self, convention: Convention) -> CoordFrame {
        CoordFrame {
            convention,
            width: self.side,
            height: self.side,
        }
    }
}

/// Window of `side` centered on `anchor`; edges that fall outside the
/// image are clipped, not shifted.
pub fn make_roi(anchor: Point, side: u32, width: u32, height: u32) -> Result<RoiWindow> {
    if side == 0 || width == 0 || height == 0 {
        return Err(Error::InvalidGeometry("ROI side and image must be non-empty".into()));
    }
    let (w, h) = (f64::from(width), f64::from(height));
    if !(anchor.x.is_finite() && anchor.y.is_finite())
        || anchor.x < 0.0
        || anchor.y < 0.0
        || anchor.x > w
        || anchor.y > h
    {
        return Err(Error::InvalidCoordinate(format!(
            "anchor ({}, {}) outside the {width}x{height} image",
            anchor.x, anchor.y
        )));
    }
    let axis = |a: f64, extent: u32| -> (u32, u32) {
        let a = (a.round() as i64).min(i64::from(extent) - 1);
        let start = a - i64::from(side / 2);
        let end = (start + i64::from(side)).min(i64::from(extent));
        let start = start.max(0);
        (start as u32, (end - start) as u32)
    };
    let (x0, valid_w) = axis(anchor.x, width);
    let (y0, valid_h) = axis(anchor.y, height);
    Ok(RoiWindow {
        x0,
        y0,
        side,
        valid_w,
        valid_h,
    })
}

/// Maps ROI-local values in `convention` (relative to the padded crop) to
/// full-image pixels, clamped to the window's image content.
pub fn roi_local_to_full_in(values: &[f64], convention: Convention, roi: &RoiWindow) -> Result<Vec<f64>> {
    let side = f64::from(roi.side);
    let full_scale = convention.scale(side);
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() || v < 0.0 || v > full_scale {
                return Err(Error::InvalidCoordinate(format!(
                    "local {convention} value {v} outside [0, {}]",
                    format_number(full_scale)
                )));
            }
            let (origin, valid) = if i % 2 == 0 {
                (roi.x0, roi.valid_w)
            } else {
                (roi.y0, roi.valid_h)
            };
            let offset = (v / full_scale * side).round().min(f64::from(valid));
            Ok(f64::from(origin) + offset)
        })
        .collect()
}

/// ROI-local 1000-base values to full-image pixels.
pub fn roi_local_to_full(values: &[f64], roi: &RoiWindow) -> Result<Vec<f64>> {
    roi_local_to_full_in(values, Convention::Thousand, roi)
}

/// Greedy in input order: a window is dropped when its IoU with any kept
/// window exceeds `iou_threshold`.
pub fn suppress_overlaps(windows: &[RoiWindow], iou_threshold: f64) -> Vec<RoiWindow> {
    let mut kept: Vec<RoiWindow> = Vec::with_capacity(windows.len());
    for w in windows {
        let r = w.rect();
        if kept.iter().all(|k| k.rect().iou(&r) <= iou_threshold) {
            kept.push(*w);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(c: Convention) -> CoordFrame {
        CoordFrame::new(c, 4000, 3000).unwrap()
    }

    #[test]
    fn to_abs_examples() {
        let f = frame(Convention::Thousand);
        assert_eq!(f.to_abs(&[500.0, 500.0]).unwrap(), vec![2000.0, 1500.0]);
        assert_eq!(f.to_abs(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(f.to_abs(&[1000.0, 1000.0]).unwrap(), vec![4000.0, 3000.0]);
        assert_eq!(frame(Convention::Unit).value_to_abs(0.25, false).unwrap(), 1000.0);
        assert_eq!(frame(Convention::Abs).to_abs(&[12.5, 7.0]).unwrap(), vec![12.5, 7.0]);
        assert!(f.to_abs(&[-1.0, 0.0]).is_err());
        assert!(f.to_abs(&[f64::NAN, 0.0]).is_err());
        assert_eq!(f.to_abs(&[1200.0, 0.0]).unwrap(), vec![4000.0, 0.0]);
    }

    #[test]
    fn rounding_is_ties_away() {
        let f = CoordFrame::new(Convention::Thousand, 1, 1).unwrap();
        assert_eq!(f.value_to_abs(500.0, false).unwrap(), 1.0);
        let f = CoordFrame::new(Convention::Thousand, 3, 3).unwrap();
        assert_eq!(f.value_to_abs(500.0, false).unwrap(), 2.0);
    }

    #[test]
    fn anchors_clamp_to_last_pixel() {
        let f = frame(Convention::Thousand);
        assert_eq!(f.anchor_to_abs(Point::new(1000.0, 1000.0)).unwrap(), Point::new(3999.0, 2999.0));
    }

    #[test]
    fn make_roi_examples() {
        let r = make_roi(Point::new(2000.0, 1500.0), 1024, 4000, 3000).unwrap();
        assert_eq!((r.x0, r.y0, r.valid_w, r.valid_h), (1488, 988, 1024, 1024));
        let r = make_roi(Point::new(40.0, 30.0), 1024, 4000, 3000).unwrap();
        assert_eq!((r.x0, r.y0, r.valid_w, r.valid_h, r.side), (0, 0, 552, 542, 1024));
        let r = make_roi(Point::new(512.0, 512.0), 1024, 1024, 1024).unwrap();
        assert_eq!((r.x0, r.y0, r.valid_w, r.valid_h), (0, 0, 1024, 1024));
        assert!(make_roi(Point::new(4001.0, 0.0), 1024, 4000, 3000).is_err());
        let r = make_roi(Point::new(4000.0, 3000.0), 1024, 4000, 3000).unwrap();
        assert_eq!((r.x0 + r.valid_w, r.y0 + r.valid_h), (4000, 3000));
    }

    #[test]
    fn local_to_full_examples() {
        let roi = RoiWindow { x0: 1488, y0: 988, side: 1024, valid_w: 1024, valid_h: 1024 };
        assert_eq!(
            roi_local_to_full(&[0.0, 0.0, 1000.0, 1000.0], &roi).unwrap(),
            vec![1488.0, 988.0, 2512.0, 2012.0]
        );
        let origin = RoiWindow { x0: 0, y0: 0, side: 1024, valid_w: 1024, valid_h: 1024 };
        assert_eq!(roi_local_to_full(&[500.0, 500.0], &origin).unwrap(), vec![512.0, 512.0]);
        assert!(roi_local_to_full(&[1001.0, 0.0], &origin).is_err());
        assert!(roi_local_to_full(&[-1.0, 0.0], &origin).is_err());

        let whole = RoiWindow::full(1024, 1024);
        let f = CoordFrame::new(Convention::Thousand, 1024, 1024).unwrap();
        let local = [123.0, 456.0, 789.0, 999.0];
        assert_eq!(roi_local_to_full(&local, &whole).unwrap(), f.to_abs(&local).unwrap());
    }

    #[test]
    fn padded_area_clamps_to_content() {
        let r = make_roi(Point::new(40.0, 30.0), 1024, 4000, 3000).unwrap();
        assert_eq!(roi_local_to_full(&[1000.0, 1000.0], &r).unwrap(), vec![552.0, 542.0]);
    }

    #[test]
    fn region_window_fits_region() {
        let region = RectRegion::new(100.0, 200.0, 1600.0, 500.0);
        let r = RoiWindow::from_region(&region, 1024, 4000, 3000).unwrap();
        assert_eq!((r.x0, r.y0, r.valid_w, r.valid_h, r.side), (100, 200, 1500, 300, 1500));
    }

    #[test]
    fn suppression_examples() {
        let a = RoiWindow { x0: 0, y0: 0, side: 100, valid_w: 100, valid_h: 100 };
        assert_eq!(suppress_overlaps(&[a, a], 0.5), vec![a]);
        // 100x100 windows offset by dx overlap (100-dx)*100; IoU 0.2 at dx=200/3.
        let b = RoiWindow { x0: 67, ..a };
        assert!(a.rect().iou(&b.rect()) < 0.5);
        assert_eq!(suppress_overlaps(&[a, b], 0.5).len(), 2);
        // IoU 0.6 needs overlap 75 -> dx = 25.
        let mid = RoiWindow { x0: 25, ..a };
        assert!((a.rect().iou(&mid.rect()) - 0.6).abs() < 1e-12);
        let far = RoiWindow { x0: 500, ..a };
        assert_eq!(suppress_overlaps(&[a, mid, far], 0.5), vec![a, far]);
    }

    #[test]
    fn convention_parsing() {
        for c in Convention::ALL {
            assert_eq!(c.as_str().parse::<Convention>().unwrap(), c);
        }
        assert!("pixels?".parse::<Convention>().is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_granularity(x in 0.0f64..=1000.0, y in 0.0f64..=1000.0, w in 1000u32..8000, h in 1000u32..8000) {
            // Canvases at least 1000 px wide, so one pixel is at most one unit.
            let xs = [x.round(), y.round()];
            let f = CoordFrame::new(Convention::Thousand, w, h).unwrap();
            let back = f.from_abs(&f.to_abs(&xs).unwrap());
            prop_assert!((back[0] - xs[0]).abs() <= 1.0);
            prop_assert!((back[1] - xs[1]).abs() <= 1.0);
        }

        #[test]
        fn unit_round_trip(x in 0.0f64..=1.0, w in 1000u32..6000) {
            let f = CoordFrame::new(Convention::Unit, w, w).unwrap();
            let back = f.value_from_abs(f.value_to_abs(x, false).unwrap(), false);
            prop_assert!((back - x).abs() <= 1.0 / f64::from(w));
        }

        #[test]
        fn roi_inside_image(ax in 0.0f64..=1.0, ay in 0.0f64..=1.0, side in 1u32..3000, w in 1u32..5000, h in 1u32..5000) {
            let anchor = Point::new(ax * f64::from(w), ay * f64::from(h));
            let r = make_roi(anchor, side, w, h).unwrap();
            prop_assert!(r.valid_w > 0 && r.valid_h > 0);
            prop_assert!(r.valid_w <= side && r.valid_h <= side);
            prop_assert!(r.x0 + r.valid_w <= w && r.y0 + r.valid_h <= h);
            let origin = roi_local_to_full(&[0.0, 0.0], &r).unwrap();
            prop_assert_eq!(origin, vec![f64::from(r.x0), f64::from(r.y0)]);
        }
    }
}
