//! Multi-scale test-time evaluation over a fixed eleven-region layout.

use rayon::prelude::*;
use serde::Serialize;

use crate::baggen::Label;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::{crop_resize, Image};
use crate::model::{self, ModelParams};

pub const TEST_REGION_COUNT: usize = 11;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Test layout for a `img_w × img_h` image, coarse to fine:
/// the full frame, then five regions at 2/3 scale and five at 1/2 scale,
/// each group ordered top-left, top-right, bottom-left, bottom-right, centre.
pub fn test_regions(img_w: usize, img_h: usize) -> Vec<BBox> {
    let (w, h) = (img_w.max(1), img_h.max(1));
    let mut regions = Vec::with_capacity(TEST_REGION_COUNT);
    regions.push(BBox::frame(w, h));
    for (rw, rh) in [((2 * w) / 3, (2 * h) / 3), (w / 2, h / 2)] {
        let (rw, rh) = (rw.max(1), rh.max(1));
        let (right, bottom) = (w - rw, h - rh);
        for (x, y) in [
            (0, 0),
            (right, 0),
            (0, bottom),
            (right, bottom),
            (right / 2, bottom / 2),
        ] {
            regions.push(BBox {
                x: x as f64,
                y: y as f64,
                w: rw as f64,
                h: rh as f64,
            });
        }
    }
    regions
}

/// Outcome of classifying one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub label: Label,
    /// Largest region probability among the evaluated regions.
    pub score: f64,
    /// First region whose probability reached the threshold.
    pub triggering_region: Option<[f64; 4]>,
    pub regions_evaluated: usize,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")))
    }
}

fn region_probability(params: &ModelParams, img: &Image, region: &BBox) -> Result<f64> {
    let size = params.architecture().input_size;
    let pixels = crop_resize(img, region, size, size)?;
    Ok(model::score(params, &pixels)?.p_pos)
}

/// Positive-class probability of every test region, in layout order.
pub fn region_scores(params: &ModelParams, img: &Image) -> Result<Vec<f64>> {
    test_regions(img.width(), img.height())
        .par_iter()
        .map(|r| region_probability(params, img, r))
        .collect()
}

/// Classifies an image: positive as soon as one region reaches `threshold`.
///
/// With `early_exit` regions are scored sequentially and scoring stops at the
/// first trigger; otherwise all eleven are scored and the score is their max.
pub fn classify(params: &ModelParams, img: &Image, threshold: f64, early_exit: bool) -> Result<Verdict> {
    check_threshold(threshold)?;
    let regions = test_regions(img.width(), img.height());
    if early_exit {
        let mut best = 0.0_f64;
        for (i, region) in regions.iter().enumerate() {
            let p = region_probability(params, img, region)?;
            best = best.max(p);
            if p >= threshold {
                return Ok(Verdict {
                    label: Label::Positive,
                    score: best,
                    triggering_region: Some(region.as_array()),
                    regions_evaluated: i + 1,
                });
            }
        }
        return Ok(Verdict {
            label: Label::Negative,
            score: best,
            triggering_region: None,
            regions_evaluated: regions.len(),
        });
    }
    let scores = region_scores(params, img)?;
    Ok(verdict_from_scores(&regions, &scores, threshold))
}

/// Exhaustive-mode verdict from precomputed region scores.
pub fn verdict_from_scores(regions: &[BBox], scores: &[f64], threshold: f64) -> Verdict {
    let score = scores.iter().copied().fold(0.0_f64, f64::max);
    let trigger = scores.iter().position(|&p| p >= threshold);
    Verdict {
        label: if trigger.is_some() {
            Label::Positive
        } else {
            Label::Negative
        },
        score,
        triggering_region: trigger.map(|i| regions[i].as_array()),
        regions_evaluated: scores.len(),
    }
}
