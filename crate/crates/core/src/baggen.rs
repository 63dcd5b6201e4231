//! Training bag construction.
//!
//! Positive images get windows sampled around each annotated box: the window
//! side is a random multiple of the annotation's larger side, the window keeps
//! the image's aspect ratio, and its centre is displaced uniformly around the
//! annotation centre before being clamped into the frame. Each window's degree
//! of interest decides its sub-bag; degrees in the positive sub-bag are
//! normalized to sum to one. Negative images reuse the test-time layout.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clamp_to_image, degree_of_interest, BBox};
use crate::infer::test_regions;
use crate::milloss::WEIGHT_SUM_TOLERANCE;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

/// Parameters of positive-bag sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct BagSpec {
    pub scale_factors: Vec<f64>,
    pub regions_per_positive: usize,
    /// Half-range of the centre displacement, as a fraction of the window size.
    pub displacement: f64,
    pub rng_seed: u64,
}

impl Default for BagSpec {
    fn default() -> Self {
        BagSpec {
            scale_factors: vec![2.0, 2.5, 3.0],
            regions_per_positive: 100,
            displacement: 0.75,
            rng_seed: 0,
        }
    }
}

impl BagSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factors.is_empty() {
            return Err(Error::InvalidArgument("no scale factors".into()));
        }
        if let Some(f) = self.scale_factors.iter().find(|f| !(f.is_finite() && **f > 1.0)) {
            return Err(Error::InvalidArgument(format!("scale factor {f} must exceed 1")));
        }
        if self.regions_per_positive == 0 {
            return Err(Error::InvalidArgument("regions_per_positive must be >= 1".into()));
        }
        if !(self.displacement.is_finite() && self.displacement >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "displacement {} must be non-negative",
                self.displacement
            )));
        }
        Ok(())
    }
}

/// One image's regions with their degrees of interest and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    image_id: String,
    label: Label,
    frame: (usize, usize),
    regions: Vec<BBox>,
    degrees: Vec<f64>,
    weights: Vec<f64>,
}

impl Bag {
    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn regions(&self) -> &[BBox] {
        &self.regions
    }

    /// Degree of interest of each region before normalization.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    /// Checks every structural invariant of a bag.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.regions.len();
        if n == 0 || self.weights.len() != n || self.degrees.len() != n {
            return Err(Error::Shape("bag arrays misaligned or empty".into()));
        }
        let pos_sum: f64 = self.weights.iter().filter(|&&w| w > 0.0).sum();
        if self.n_pos() > 0 && (pos_sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("positive weights sum to {pos_sum}")));
        }
        if self.label == Label::Negative && self.n_pos() > 0 {
            return Err(Error::InvalidArgument("negative bag with weighted regions".into()));
        }
        let (w, h) = self.frame;
        if let Some(r) = self.regions.iter().find(|r| !r.within_image(w, h, 1e-9)) {
            return Err(Error::OutOfBounds {
                region: r.as_array(),
                width: w,
                height: h,
            });
        }
        Ok(())
    }
}

fn normalized(degrees: &[f64]) -> Vec<f64> {
    let total: f64 = degrees.iter().filter(|&&d| d > 0.0).sum();
    degrees.iter().map(|&d| if d > 0.0 { d / total } else { 0.0 }).collect()
}

/// Window of the given scale around `ann`, keeping the image aspect ratio.
/// The annotation side that is larger relative to the image sets the scale.
/// The window spans at least `factor` times the annotation both ways.
fn window_size(ann: &BBox, factor: f64, img_w: f64, img_h: f64) -> (f64, f64) {
    let (ww, wh) = if ann.w * img_h >= ann.h * img_w {
        let ww = factor * ann.w;
        (ww, ww * img_h / img_w)
    } else {
        let wh = factor * ann.h;
        (wh * img_w / img_h, wh)
    };
    if ww >= img_w || wh >= img_h {
        (img_w, img_h)
    } else {
        (ww, wh)
    }
}

/// Samples `spec.regions_per_positive` windows around the annotations of a
/// `frame.0 × frame.1` image.
///
/// The first window of every annotation is undisplaced, so it contains its
/// annotation and has degree 1.
pub fn generate_positive_bag(
    image_id: &str,
    frame: (usize, usize),
    annotations: &[BBox],
    spec: &BagSpec,
) -> Result<Bag> {
    spec.validate()?;
    if annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let (img_w, img_h) = frame;
    if img_w == 0 || img_h == 0 {
        return Err(Error::InvalidArgument(format!("empty frame {img_w}x{img_h}")));
    }
    if let Some(a) = annotations.iter().find(|a| !a.within_image(img_w, img_h, 1e-9)) {
        return Err(Error::OutOfBounds {
            region: a.as_array(),
            width: img_w,
            height: img_h,
        });
    }
    let mut rng = seeds::rng(seeds::derive(spec.rng_seed, &[seeds::hash_id(image_id)]));
    let (fw, fh) = (img_w as f64, img_h as f64);
    let total = spec.regions_per_positive;
    let per = total / annotations.len();
    let extra = total % annotations.len();

    let mut regions = Vec::with_capacity(total);
    for (j, ann) in annotations.iter().enumerate() {
        let count = per + usize::from(j < extra);
        let (acx, acy) = ann.center();
        for i in 0..count {
            let factor = spec.scale_factors[rng.random_range(0..spec.scale_factors.len())];
            let (ww, wh) = window_size(ann, factor, fw, fh);
            let (dx, dy) = if i == 0 || spec.displacement == 0.0 {
                (0.0, 0.0)
            } else {
                let (rx, ry) = (spec.displacement * ww, spec.displacement * wh);
                (rng.random_range(-rx..=rx), rng.random_range(-ry..=ry))
            };
            let window = BBox::centered(acx + dx, acy + dy, ww, wh);
            regions.push(clamp_to_image(&window, img_w, img_h)?);
        }
    }
    let degrees = regions
        .iter()
        .map(|r| degree_of_interest(r, annotations).map(|d| d.value()))
        .collect::<Result<Vec<_>>>()?;
    let weights = normalized(&degrees);
    Ok(Bag {
        image_id: image_id.to_string(),
        label: Label::Positive,
        frame,
        regions,
        degrees,
        weights,
    })
}

/// Negative images use the eleven test regions, all in the negative sub-bag.
pub fn generate_negative_bag(image_id: &str, frame: (usize, usize)) -> Bag {
    let regions = test_regions(frame.0, frame.1);
    let n = regions.len();
    Bag {
        image_id: image_id.to_string(),
        label: Label::Negative,
        frame: (frame.0.max(1), frame.1.max(1)),
        regions,
        degrees: vec![0.0; n],
        weights: vec![0.0; n],
    }
}

/// Single-region bag covering the whole image.
pub fn whole_image_bag(image_id: &str, frame: (usize, usize), label: Label) -> Bag {
    let w = if label.is_positive() { 1.0 } else { 0.0 };
    Bag {
        image_id: image_id.to_string(),
        label,
        frame,
        regions: vec![BBox::frame(frame.0, frame.1)],
        degrees: vec![w],
        weights: vec![w],
    }
}

/// Same regions with every positive-sub-bag weight set to `1/n⁺`.
pub fn with_uniform_weights(bag: &Bag) -> Bag {
    let n_pos = bag.n_pos();
    let mut out = bag.clone();
    for w in &mut out.weights {
        if *w > 0.0 {
            *w = 1.0 / n_pos as f64;
        }
    }
    out
}

/// Stratified subsample of `k` regions.
///
/// Each non-empty sub-bag keeps at least one region, the rest are allotted in
/// proportion to sub-bag sizes, and the kept positive weights are
/// renormalized. Region order is preserved. `k ≥ n` returns the bag as is.
pub fn subsample_bag(bag: &Bag, k: usize, rng_seed: u64) -> Result<Bag> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("subsample size {k} must be >= 2")));
    }
    let n = bag.len();
    if k >= n {
        return Ok(bag.clone());
    }
    let pos: Vec<usize> = (0..n).filter(|&i| bag.weights[i] > 0.0).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| bag.weights[i] == 0.0).collect();
    let k_pos = if pos.is_empty() {
        0
    } else if neg.is_empty() {
        k
    } else {
        let share = (k as f64 * pos.len() as f64 / n as f64).round() as usize;
        share.clamp(1, k - 1).min(pos.len()).max(k - k.min(neg.len()))
    };
    let k_neg = k - k_pos;

    let mut rng = seeds::rng(seeds::derive(rng_seed, &[seeds::hash_id(&bag.image_id)]));
    let mut keep: Vec<usize> = index::sample(&mut rng, pos.len(), k_pos)
        .into_iter()
        .map(|i| pos[i])
        .chain(index::sample(&mut rng, neg.len(), k_neg).into_iter().map(|i| neg[i]))
        .collect();
    keep.sort_unstable();

    let regions = keep.iter().map(|&i| bag.regions[i]).collect();
    let degrees = keep.iter().map(|&i| bag.degrees[i]).collect();
    let kept: Vec<f64> = keep.iter().map(|&i| bag.weights[i]).collect();
    Ok(Bag {
        image_id: bag.image_id.clone(),
        label: bag.label,
        frame: bag.frame,
        regions,
        degrees,
        weights: normalized(&kept),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn spec(seed: u64) -> BagSpec {
        BagSpec {
            rng_seed: seed,
            ..BagSpec::default()
        }
    }

    #[test]
    fn single_annotation_bag() {
        let bag = generate_positive_bag("img", (200, 200), &[bx(40.0, 40.0, 20.0, 20.0)], &spec(7)).unwrap();
        assert_eq!(bag.len(), 100);
        assert!(bag.n_pos() >= 1);
        assert_eq!(bag.n_pos() + bag.n_neg(), 100);
        let sum: f64 = bag.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        bag.check_invariants().unwrap();
        assert_eq!(bag.degrees()[0], 1.0);
        // windows are 2, 2.5 or 3 times the 20-pixel annotation
        for r in bag.regions() {
            assert!([40.0, 50.0, 60.0].contains(&r.w), "{r:?}");
            assert_eq!(r.w, r.h);
        }
    }

    #[test]
    fn displacement_produces_both_sub_bags() {
        let bag = generate_positive_bag("img", (200, 200), &[bx(90.0, 90.0, 20.0, 20.0)], &spec(3)).unwrap();
        assert!(bag.n_pos() > 50);
        assert!(bag.n_neg() > 0);
    }

    #[test]
    fn whole_image_annotation_degenerates() {
        let bag = generate_positive_bag("img", (64, 48), &[bx(0.0, 0.0, 64.0, 48.0)], &spec(1)).unwrap();
        assert!(bag.regions().iter().all(|r| *r == BBox::frame(64, 48)));
        assert!(bag.degrees().iter().all(|&d| d == 1.0));
        assert!(bag.weights().iter().all(|&w| (w - 0.01).abs() < 1e-15));
    }

    #[test]
    fn undisplaced_windows_match_hand_geometry() {
        let s = BagSpec {
            scale_factors: vec![2.0],
            regions_per_positive: 4,
            displacement: 0.0,
            rng_seed: 11,
        };
        // 200x100 image: the side larger relative to the frame is doubled, the other keeps 2:1
        let anns = [bx(20.0, 20.0, 10.0, 6.0), bx(150.0, 60.0, 8.0, 20.0)];
        let bag = generate_positive_bag("two", (200, 100), &anns, &s).unwrap();
        let first = bx(13.0, 17.0, 24.0, 12.0);
        let second = bx(114.0, 50.0, 80.0, 40.0);
        assert_eq!(bag.regions(), &[first, first, second, second]);
        assert!(bag.degrees().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn windows_near_the_border_are_clamped() {
        let s = BagSpec {
            scale_factors: vec![3.0],
            regions_per_positive: 1,
            displacement: 0.0,
            rng_seed: 0,
        };
        let bag = generate_positive_bag("c", (100, 100), &[bx(0.0, 0.0, 10.0, 10.0)], &s).unwrap();
        assert_eq!(bag.regions()[0], bx(0.0, 0.0, 30.0, 30.0));
    }

    #[test]
    fn generation_errors() {
        assert!(matches!(
            generate_positive_bag("x", (10, 10), &[], &spec(0)),
            Err(Error::NoAnnotations)
        ));
        assert!(generate_positive_bag("x", (10, 10), &[bx(8.0, 8.0, 5.0, 5.0)], &spec(0)).is_err());
        let bad = BagSpec {
            scale_factors: vec![1.0],
            ..BagSpec::default()
        };
        assert!(generate_positive_bag("x", (10, 10), &[bx(1.0, 1.0, 2.0, 2.0)], &bad).is_err());
    }

    #[test]
    fn negative_bags() {
        let bag = generate_negative_bag("n", (300, 200));
        assert_eq!(bag.len(), 11);
        assert_eq!((bag.n_pos(), bag.n_neg()), (0, 11));
        bag.check_invariants().unwrap();
        let bag = generate_negative_bag("n", (1, 1));
        assert!(bag.regions().iter().all(|r| *r == BBox::frame(1, 1)));
        bag.check_invariants().unwrap();
    }

    fn split_bag(n_pos: usize, n_neg: usize) -> Bag {
        let n = n_pos + n_neg;
        let degrees: Vec<f64> = (0..n)
            .map(|i| {
                if i < n_pos {
                    0.3 + i as f64 / (2 * n) as f64
                } else {
                    0.0
                }
            })
            .collect();
        Bag {
            image_id: "s".into(),
            label: if n_pos > 0 { Label::Positive } else { Label::Negative },
            frame: (10, 10),
            regions: vec![BBox::frame(10, 10); n],
            weights: normalized(&degrees),
            degrees,
        }
    }

    #[test]
    fn stratified_subsample() {
        let bag = split_bag(50, 50);
        let sub = subsample_bag(&bag, 16, 5).unwrap();
        assert_eq!((sub.n_pos(), sub.n_neg()), (8, 8));
        sub.check_invariants().unwrap();
        assert_eq!(sub, subsample_bag(&bag, 16, 5).unwrap());
    }

    #[test]
    fn subsample_edge_cases() {
        let neg = generate_negative_bag("n", (50, 50));
        let sub = subsample_bag(&neg, 4, 1).unwrap();
        assert_eq!((sub.n_pos(), sub.n_neg()), (0, 4));
        assert_eq!(subsample_bag(&neg, 11, 1).unwrap(), neg);
        assert_eq!(subsample_bag(&neg, 40, 1).unwrap(), neg);
        assert!(subsample_bag(&neg, 1, 1).is_err());
        let lopsided = split_bag(98, 2);
        let sub = subsample_bag(&lopsided, 4, 2).unwrap();
        assert_eq!((sub.n_pos(), sub.n_neg()), (3, 1));
        let lopsided = split_bag(2, 98);
        let sub = subsample_bag(&lopsided, 4, 2).unwrap();
        assert_eq!((sub.n_pos(), sub.n_neg()), (1, 3));
    }

    #[test]
    fn uniform_weights_keep_partition() {
        let bag = generate_positive_bag("u", (120, 90), &[bx(50.0, 30.0, 15.0, 10.0)], &spec(4)).unwrap();
        let u = with_uniform_weights(&bag);
        assert_eq!(u.n_pos(), bag.n_pos());
        u.check_invariants().unwrap();
        let expected = 1.0 / bag.n_pos() as f64;
        assert!(u.weights().iter().all(|&w| w == 0.0 || w == expected));
    }

    proptest! {
        #[test]
        fn generated_bags_hold_invariants(
            w in 20usize..300, h in 20usize..300,
            ax in 0.0..1.0f64, ay in 0.0..1.0f64, aw in 0.05..0.6f64, ah in 0.05..0.6f64,
            n_ann in 1usize..4, seed in 0u64..1000, k in 2usize..30,
        ) {
            let anns: Vec<BBox> = (0..n_ann).map(|j| {
                let bw = (aw * w as f64 / (j + 1) as f64).max(1.0);
                let bh = (ah * h as f64 / (j + 1) as f64).max(1.0);
                bx(ax * (w as f64 - bw), ay * (h as f64 - bh), bw, bh)
            }).collect();
            let s = BagSpec { regions_per_positive: 37, ..spec(seed) };
            let bag = generate_positive_bag("p", (w, h), &anns, &s).unwrap();
            bag.check_invariants().unwrap();
            prop_assert_eq!(bag.len(), 37);
            prop_assert!(bag.degrees().contains(&1.0));
            prop_assert_eq!(&bag, &generate_positive_bag("p", (w, h), &anns, &s).unwrap());
            let sub = subsample_bag(&bag, k, seed).unwrap();
            sub.check_invariants().unwrap();
            prop_assert_eq!(sub.len(), k.min(37));
            if bag.n_pos() > 0 && k < 37 { prop_assert!(sub.n_pos() >= 1); }
            if bag.n_neg() > 0 && k < 37 { prop_assert!(sub.n_neg() >= 1); }
        }
    }
}
