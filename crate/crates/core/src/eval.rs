//! Detection rates, ROC, mean average precision, k-fold splits and the
//! corpus-level metrics report.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::baggen::Label;
use crate::error::{Error, Result};
use crate::imaging::to_grayscale;
use crate::infer::{region_scores, DEFAULT_THRESHOLD};
use crate::model::ModelParams;
use crate::seeds;
use crate::synthdata::Corpus;

/// Per-class and overall detection rates; `None` where a class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionRates {
    pub pos: Option<f64>,
    pub neg: Option<f64>,
    pub all: Option<f64>,
}

/// Rates from `(true label, predicted label)` pairs.
pub fn detection_rates(pairs: &[(Label, Label)]) -> Result<DetectionRates> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no verdicts".into()));
    }
    let count = |truth: Label| {
        let total = pairs.iter().filter(|(t, _)| *t == truth).count();
        let hit = pairs.iter().filter(|(t, p)| *t == truth && *p == truth).count();
        (hit, total)
    };
    let (tp, p) = count(Label::Positive);
    let (tn, n) = count(Label::Negative);
    let rate = |hit: usize, total: usize| (total > 0).then(|| hit as f64 / total as f64);
    Ok(DetectionRates {
        pos: rate(tp, p),
        neg: rate(tn, n),
        all: (p > 0 && n > 0).then(|| (tp + tn) as f64 / (p + n) as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses `+∞`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// From `(0, 0)` to `(1, 1)`, one point per distinct score, descending.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// `(target, tpr)` in the order the targets were given.
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

/// ROC by a descending threshold sweep with tied scores grouped.
///
/// TPR at an FPR target is read off the step curve: the highest TPR among
/// points whose FPR does not exceed the target.
pub fn roc(scored: &[(Label, f64)], fpr_targets: &[f64]) -> Result<Roc> {
    if let Some((_, s)) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    if let Some(t) = fpr_targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("FPR target {t} outside [0, 1]")));
    }
    let p = scored.iter().filter(|(l, _)| l.is_positive()).count();
    let n = scored.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument("ROC needs both classes".into()));
    }
    let mut order: Vec<&(Label, f64)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = order[i].1;
        while i < order.len() && order[i].1 == threshold {
            if order[i].0.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0);
    let tpr_at_fpr = fpr_targets
        .iter()
        .map(|&t| {
            let tpr = points
                .iter()
                .filter(|pt| pt.fpr <= t)
                .map(|pt| pt.tpr)
                .fold(0.0, f64::max);
            (t, tpr)
        })
        .collect();
    Ok(Roc {
        points,
        auc,
        tpr_at_fpr,
    })
}

/// Average precision of the descending-score ranking; ties keep input order.
pub fn mean_average_precision(scored: &[(Label, f64)]) -> Result<f64> {
    if let Some((_, s)) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let mut order: Vec<&(Label, f64)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, (label, _)) in order.iter().enumerate() {
        if label.is_positive() {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::InvalidArgument("average precision needs a positive".into()));
    }
    Ok(sum / hits as f64)
}

/// One fold: sorted training and validation indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Stratified k-fold split: each class is shuffled by `seed` and dealt
/// round-robin, the second class continuing where the first stopped.
pub fn kfold_split(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k}; need at least 2 folds")));
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for (tag, class) in [(1u64, Label::Positive), (0, Label::Negative)] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds the {} {class:?} items",
                members.len()
            )));
        }
        members.shuffle(&mut seeds::rng(seeds::derive(seed, &[tag])));
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    Ok(folds
        .into_iter()
        .map(|mut validation| {
            validation.sort_unstable();
            let mut in_fold = vec![false; labels.len()];
            for &i in &validation {
                in_fold[i] = true;
            }
            Fold {
                train: (0..labels.len()).filter(|&i| !in_fold[i]).collect(),
                validation,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub gray: bool,
    pub fpr_targets: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: DEFAULT_THRESHOLD,
            gray: false,
            fpr_targets: vec![0.01, 0.05],
        }
    }
}

/// Image-level result of exhaustive scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub id: String,
    pub label: Label,
    pub category: Option<String>,
    /// Largest region probability.
    pub score: f64,
    pub predicted: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: f64,
    pub gray: bool,
    pub detection_rate_pos: Option<f64>,
    pub detection_rate_neg: Option<f64>,
    pub detection_rate_all: Option<f64>,
    /// `[fpr, tpr]` pairs; empty when a class is missing.
    pub roc_points: Vec<[f64; 2]>,
    pub auc: Option<f64>,
    /// Keyed by the target as written, e.g. `"0.01"`.
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub map_score: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<String, DetectionRates>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Scores every image of the corpus over all test regions.
pub fn score_corpus(params: &ModelParams, corpus: &Corpus, options: &EvalOptions) -> Result<Vec<ScoredImage>> {
    if !(options.threshold > 0.0 && options.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {} outside (0, 1)",
            options.threshold
        )));
    }
    (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let (entry, img) = corpus.get(i);
            let scores = if options.gray {
                region_scores(params, &to_grayscale(img)?)?
            } else {
                region_scores(params, img)?
            };
            let score = scores.iter().copied().fold(0.0, f64::max);
            Ok(ScoredImage {
                id: entry.id.clone(),
                label: entry.label,
                category: entry.category.clone(),
                score,
                predicted: if score >= options.threshold {
                    Label::Positive
                } else {
                    Label::Negative
                },
            })
        })
        .collect()
}

/// Assembles the report from scored images.
pub fn report(scored: &[ScoredImage], options: &EvalOptions) -> Result<MetricsReport> {
    let pairs: Vec<(Label, Label)> = scored.iter().map(|s| (s.label, s.predicted)).collect();
    let rates = detection_rates(&pairs)?;
    let labelled: Vec<(Label, f64)> = scored.iter().map(|s| (s.label, s.score)).collect();
    let n_pos = pairs.iter().filter(|(t, _)| t.is_positive()).count();
    let n_neg = pairs.len() - n_pos;
    let curve = if n_pos > 0 && n_neg > 0 {
        Some(roc(&labelled, &options.fpr_targets)?)
    } else {
        None
    };
    let mut per_category: BTreeMap<String, Vec<(Label, Label)>> = BTreeMap::new();
    for s in scored {
        if let Some(c) = &s.category {
            per_category.entry(c.clone()).or_default().push((s.label, s.predicted));
        }
    }
    Ok(MetricsReport {
        n_pos,
        n_neg,
        threshold: options.threshold,
        gray: options.gray,
        detection_rate_pos: rates.pos,
        detection_rate_neg: rates.neg,
        detection_rate_all: rates.all,
        roc_points: curve
            .as_ref()
            .map(|c| c.points.iter().map(|p| [p.fpr, p.tpr]).collect())
            .unwrap_or_default(),
        auc: curve.as_ref().map(|c| c.auc),
        tpr_at_fpr: curve
            .as_ref()
            .map(|c| c.tpr_at_fpr.iter().map(|(t, v)| (t.to_string(), *v)).collect())
            .unwrap_or_default(),
        map_score: (n_pos > 0).then(|| mean_average_precision(&labelled)).transpose()?,
        per_category: per_category
            .into_iter()
            .map(|(k, v)| detection_rates(&v).map(|r| (k, r)))
            .collect::<Result<_>>()?,
    })
}

pub fn evaluate(params: &ModelParams, corpus: &Corpus, options: &EvalOptions) -> Result<MetricsReport> {
    report(&score_corpus(params, corpus, options)?, options)
}

/// `threshold,fpr,tpr` rows of a ROC curve.
pub fn roc_csv(curve: &Roc) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Negative as N, Positive as P};

    /// Every threshold among the scores plus `+∞`, counted from scratch.
    fn brute_force_points(scored: &[(Label, f64)]) -> Vec<(f64, f64)> {
        let p = scored.iter().filter(|(l, _)| l.is_positive()).count() as f64;
        let n = scored.len() as f64 - p;
        let mut thresholds: Vec<f64> = scored.iter().map(|s| s.1).collect();
        thresholds.push(f64::INFINITY);
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        thresholds
            .iter()
            .map(|&t| {
                let tp = scored.iter().filter(|(l, s)| l.is_positive() && *s >= t).count() as f64;
                let fp = scored.iter().filter(|(l, s)| !l.is_positive() && *s >= t).count() as f64;
                (fp / n, tp / p)
            })
            .collect()
    }

    /// Probability that a random positive outscores a random negative, ties half.
    fn pairwise_auc(scored: &[(Label, f64)]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (_, sa) in scored.iter().filter(|s| s.0.is_positive()) {
            for (_, sb) in scored.iter().filter(|s| !s.0.is_positive()) {
                pairs += 1.0;
                wins += if sa > sb {
                    1.0
                } else if sa == sb {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / pairs
    }

    #[test]
    fn rate_examples() {
        let all_right = [(P, P), (N, N)];
        let r = detection_rates(&all_right).unwrap();
        assert_eq!((r.pos, r.neg, r.all), (Some(1.0), Some(1.0), Some(1.0)));
        let mut mixed = vec![(P, P), (P, P), (P, P), (P, N)];
        mixed.extend([(N, N), (N, N), (N, N), (N, P), (N, P), (N, P)]);
        let r = detection_rates(&mixed).unwrap();
        assert_eq!((r.pos, r.neg, r.all), (Some(0.75), Some(0.5), Some(0.6)));
        let r = detection_rates(&[(P, N)]).unwrap();
        assert_eq!((r.pos, r.neg, r.all), (Some(0.0), None, None));
        assert!(detection_rates(&[]).is_err());
    }

    #[test]
    fn roc_examples() {
        let separated = [(P, 0.9), (P, 0.8), (N, 0.2), (N, 0.1)];
        let c = roc(&separated, &[0.01]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.tpr_at_fpr, vec![(0.01, 1.0)]);

        let tied = [(P, 0.5), (N, 0.5), (P, 0.5), (N, 0.5)];
        let c = roc(&tied, &[]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.points.len(), 2);

        let hand = [(P, 0.9), (P, 0.8), (P, 0.4), (N, 0.7), (N, 0.3), (N, 0.2)];
        let c = roc(&hand, &[0.0, 0.34]).unwrap();
        assert!((c.auc - 8.0 / 9.0).abs() < 1e-15);
        assert!((pairwise_auc(&hand) - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(c.tpr_at_fpr[0].1, 2.0 / 3.0);
        assert_eq!(c.tpr_at_fpr[1].1, 1.0);

        assert!(roc(&[(P, 0.3)], &[]).is_err());
        assert!(roc(&[(P, f64::NAN), (N, 0.1)], &[]).is_err());
        assert!(roc(&separated, &[1.5]).is_err());
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_average_precision(&[(P, 0.9), (P, 0.8), (N, 0.1)]).unwrap(), 1.0);
        let v = mean_average_precision(&[(P, 0.9), (N, 0.8), (P, 0.7)]).unwrap();
        assert_eq!(v, (1.0 + 2.0 / 3.0) / 2.0);
        // ties resolve in input order
        let v = mean_average_precision(&[(N, 0.5), (P, 0.5)]).unwrap();
        assert_eq!(v, 0.5);
        let worst: Vec<_> = (0..7).map(|i| (N, 1.0 - i as f64 * 0.1)).chain([(P, 0.0)]).collect();
        assert_eq!(mean_average_precision(&worst).unwrap(), 1.0 / 8.0);
        assert!(mean_average_precision(&[(N, 0.1)]).is_err());
    }

    #[test]
    fn kfold_examples() {
        let labels: Vec<Label> = (0..100).map(|i| if i % 3 == 0 { P } else { N }).collect();
        let folds = kfold_split(&labels, 10, 7).unwrap();
        assert_eq!(folds.len(), 10);
        let n_pos = labels.iter().filter(|l| l.is_positive()).count() as f64;
        let mut seen = vec![0; 100];
        for f in &folds {
            assert_eq!(f.validation.len(), 10);
            assert_eq!(f.train.len() + f.validation.len(), 100);
            let pos = f.validation.iter().filter(|&&i| labels[i].is_positive()).count() as f64;
            assert!((pos - n_pos / 10.0).abs() <= 1.0);
            for &i in &f.validation {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(folds, kfold_split(&labels, 10, 7).unwrap());
        assert_ne!(folds, kfold_split(&labels, 10, 8).unwrap());
        assert!(kfold_split(&[P, P, N], 3, 0).is_err());
    }

    fn arb_scored() -> impl Strategy<Value = Vec<(Label, f64)>> {
        prop::collection::vec((any::<bool>(), 0u8..8), 30).prop_filter_map("both classes", |v| {
            let s: Vec<(Label, f64)> = v
                .into_iter()
                .map(|(b, q)| (if b { P } else { N }, f64::from(q) / 8.0))
                .collect();
            (s.iter().any(|x| x.0 == P) && s.iter().any(|x| x.0 == N)).then_some(s)
        })
    }

    proptest! {
        #[test]
        fn roc_matches_brute_force(scored in arb_scored()) {
            let c = roc(&scored, &[0.1, 0.5]).unwrap();
            let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
            prop_assert_eq!(pts, brute_force_points(&scored));
            prop_assert!((0.0..=1.0).contains(&c.auc));
            prop_assert!((c.auc - pairwise_auc(&scored)).abs() < 1e-12);
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn map_invariant_under_monotone_maps(scored in arb_scored()) {
            let squashed: Vec<(Label, f64)> = scored.iter().map(|&(l, s)| (l, (3.0 * s).exp())).collect();
            prop_assert_eq!(
                mean_average_precision(&scored).unwrap(),
                mean_average_precision(&squashed).unwrap()
            );
        }

        #[test]
        fn overall_rate_is_weighted_mean(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 2..40)) {
            let pairs: Vec<(Label, Label)> = pairs
                .into_iter()
                .map(|(t, p)| (if t { P } else { N }, if p { P } else { N }))
                .collect();
            let r = detection_rates(&pairs).unwrap();
            if let (Some(pos), Some(neg), Some(all)) = (r.pos, r.neg, r.all) {
                let np = pairs.iter().filter(|x| x.0 == P).count() as f64;
                let n = pairs.len() as f64;
                prop_assert!((all - (pos * np + neg * (n - np)) / n).abs() < 1e-12);
            }
        }
    }
}
