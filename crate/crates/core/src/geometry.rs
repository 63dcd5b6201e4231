//! Axis-aligned boxes, the overlap-based degree of interest, and frame clamping.
//!
//! Coordinates are real-valued pixels with the origin at the top-left corner.
//! Rounding only happens when pixels are actually sampled.

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x, y, w, h)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and non-positive sizes.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x}, {y}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got {w}x{h}"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    /// Full-frame box of an image.
    pub fn frame(width: usize, height: usize) -> Self {
        BBox {
            x: 0.0,
            y: 0.0,
            w: width as f64,
            h: height as f64,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    /// True when the box lies inside a `width`×`height` frame, up to `tol` pixels.
    pub fn within_image(&self, width: usize, height: usize, tol: f64) -> bool {
        self.x >= -tol && self.y >= -tol && self.right() <= width as f64 + tol && self.bottom() <= height as f64 + tol
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Pre-normalization importance of a region, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DegreeOfInterest(f64);

impl DegreeOfInterest {
    pub const ZERO: DegreeOfInterest = DegreeOfInterest(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(DegreeOfInterest(value))
        } else {
            Err(Error::InvalidArgument(format!(
                "degree of interest {value} outside [0, 1]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Area of the geometric intersection of two boxes; zero when disjoint.
pub fn intersect_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.right().min(b.right()) - a.x.max(b.x);
    let h = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Fraction of `annotation` covered by `region`.
pub fn coverage(region: &BBox, annotation: &BBox) -> f64 {
    if region.contains(annotation) {
        // exact 1 regardless of rounding in the product
        return 1.0;
    }
    (intersect_area(region, annotation) / annotation.area()).clamp(0.0, 1.0)
}

/// Maximum coverage of any annotation by `region`.
///
/// Coverage is the intersection area over the annotation area.
pub fn degree_of_interest(region: &BBox, annotations: &[BBox]) -> Result<DegreeOfInterest> {
    if annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let best = annotations.iter().map(|a| coverage(region, a)).fold(0.0_f64, f64::max);
    Ok(DegreeOfInterest(best))
}

/// Translates `b` by the smallest offset that puts it inside the image frame.
pub fn clamp_to_image(b: &BBox, img_w: usize, img_h: usize) -> Result<BBox> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "image size must be positive, got {img_w}x{img_h}"
        )));
    }
    let (iw, ih) = (img_w as f64, img_h as f64);
    if b.w > iw || b.h > ih {
        return Err(Error::InvalidBox(format!(
            "{}x{} box does not fit a {img_w}x{img_h} image",
            b.w, b.h
        )));
    }
    let x = b.x.max(0.0).min(iw - b.w);
    let y = b.y.max(0.0).min(ih - b.h);
    Ok(BBox { x, y, w: b.w, h: b.h })
}
