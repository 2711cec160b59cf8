//! Scoring formulas and macro aggregation.
//!
//! All scores lie in `[0, 1]`; reports multiply by 100. Empty, invalid and
//! undecodable predictions score zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{Sample, Target};
use crate::error::{Error, Result};
use crate::geometry::{iou, GeomBox};
use crate::mask::RleMask;
use crate::parse::ParsedAnswer;
use crate::task::{Dimension, Task};

/// Box score: `IoU + (1 - IoU) * exp(-d^2 / sigma^2)` with `d` the center
/// distance and `sigma` the diagonal of the ground truth's enclosing
/// horizontal box.
pub fn s_box(g: &GeomBox, p: &GeomBox) -> Result<f64> {
    g.enclosing_diagonal()?;
    p.validate()?;
    let b = g.bounds();
    let sigma_sq = b.width() * b.width() + b.height() * b.height();
    let overlap = iou(g, p)?;
    Ok(blend(overlap, g.center().distance_sq(p.center()), sigma_sq))
}

/// Works on squared lengths so that geometrically tied pairs tie exactly.
fn blend(overlap: f64, d_sq: f64, sigma_sq: f64) -> f64 {
    (overlap + (1.0 - overlap) * (-d_sq / sigma_sq).exp()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt_index, pred_index, pair_score)` in selection order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    /// Sum of matched pair scores.
    pub t: f64,
}

/// Pairwise `s_box` matrix indexed `[gt][pred]`; unscorable pairs are 0.
pub fn score_matrix(gts: &[GeomBox], preds: &[GeomBox]) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| preds.iter().map(|p| s_box(g, p).unwrap_or(0.0)).collect())
        .collect()
}

/// Greedy one-to-one matching on `s_box`: repeatedly take the highest
/// remaining pair whose score is strictly above `floor`; ties go to the
/// lowest gt index, then the lowest prediction index.
pub fn greedy_match_with_floor(gts: &[GeomBox], preds: &[GeomBox], floor: f64) -> MatchResult {
    let scores = score_matrix(gts, preds);
    match_scores(&scores, preds.len(), floor)
}

pub fn greedy_match(gts: &[GeomBox], preds: &[GeomBox]) -> MatchResult {
    greedy_match_with_floor(gts, preds, 0.0)
}

/// Greedy matching over a precomputed `[gt][pred]` score matrix.
pub fn match_scores(scores: &[Vec<f64>], n_preds: usize, floor: f64) -> MatchResult {
    let mut candidates: Vec<(f64, usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(gi, row)| row.iter().enumerate().map(move |(pi, &s)| (s, gi, pi)))
        .filter(|&(s, _, _)| s > floor)
        .collect();
    // Descending score, then ascending indices: a stable stand-in for
    // re-scanning all remaining pairs each round.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; scores.len()];
    let mut pred_used = vec![false; n_preds];
    let mut pairs = Vec::new();
    for (s, gi, pi) in candidates {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            pairs.push((gi, pi, s));
        }
    }
    let t = pairs.iter().map(|p| p.2).sum();
    MatchResult {
        fp: n_preds - pairs.len(),
        fn_count: scores.len() - pairs.len(),
        pairs,
        t,
    }
}

/// Soft F1 over matched score mass; zero when a denominator vanishes.
pub fn soft_f1(m: &MatchResult) -> f64 {
    let p_den = m.t + m.fp as f64;
    let r_den = m.t + m.fn_count as f64;
    if p_den <= 0.0 || r_den <= 0.0 {
        return 0.0;
    }
    let (p, r) = (m.t / p_den, m.t / r_den);
    if p + r <= 0.0 {
        return 0.0;
    }
    (2.0 * p * r / (p + r)).clamp(0.0, 1.0)
}

/// Mask score: mask IoU blended with centroid distance over the ground
/// truth's pixel-extent diagonal. Mismatched or empty predictions score 0;
/// an empty ground truth is an error.
pub fn s_mask(gt: &RleMask, pred: &RleMask) -> Result<f64> {
    let b = gt.pixel_bounds()?;
    let sigma_sq = b.width() * b.width() + b.height() * b.height();
    let g_centroid = gt.centroid()?;
    let overlap = match gt.iou(pred) {
        Ok(v) => v,
        Err(Error::IncompatibleMask(..)) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    let p_centroid = match pred.centroid() {
        Ok(c) => c,
        Err(Error::EmptyMask) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    Ok(blend(overlap, g_centroid.distance_sq(p_centroid), sigma_sq))
}

/// `max(0, 1 - |pred - c| / c)`, or `[pred == 0]` when `c = 0`; `None`
/// (unparsable) scores 0.
pub fn counting_score(c: u64, pred: Option<u64>) -> f64 {
    let Some(p) = pred else { return 0.0 };
    if c == 0 {
        return if p == 0 { 1.0 } else { 0.0 };
    }
    (1.0 - p.abs_diff(c) as f64 / c as f64).max(0.0)
}

pub fn option_score(y: char, pred: &ParsedAnswer) -> f64 {
    match pred {
        ParsedAnswer::Choice(c) if c.eq_ignore_ascii_case(&y) => 1.0,
        _ => 0.0,
    }
}

/// Highest `s_box` over the predictions; zero for none.
pub fn best_box_score(g: &GeomBox, preds: &[GeomBox]) -> f64 {
    preds
        .iter()
        .filter_map(|p| s_box(g, p).ok())
        .fold(0.0, f64::max)
}

/// A prediction normalized to absolute pixels, ready for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Prediction {
    Boxes(Vec<GeomBox>),
    /// Compressed RLE text on the sample's canvas.
    Mask(String),
    Count(u64),
    #[serde(rename = "option")]
    Choice(char),
    /// The model declared the target absent.
    Null,
    Invalid(String),
    /// No usable reply (transport failure or nothing returned).
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ParseStatus {
    Ok,
    Invalid,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub task: Task,
    pub raw_score: f64,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, Value>,
    #[serde(default)]
    pub calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<bool>,
}

impl ScoreRecord {
    fn new(sample: &Sample, raw_score: f64, parse_status: ParseStatus) -> Self {
        ScoreRecord {
            sample_id: sample.id.clone(),
            task: sample.task,
            raw_score: if parse_status == ParseStatus::Ok { raw_score } else { 0.0 },
            parse_status,
            detail: BTreeMap::new(),
            calls: 0,
            prediction: None,
            diagnosis: None,
            oracle: None,
        }
    }

    pub fn display_score(&self) -> f64 {
        round2(self.raw_score * 100.0)
    }
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Scores a pixel-space prediction against the sample's target.
pub fn score_prediction(sample: &Sample, pred: &Prediction) -> ScoreRecord {
    let mut rec = match (pred, &sample.target) {
        (Prediction::Empty(reason), _) => {
            let mut r = ScoreRecord::new(sample, 0.0, ParseStatus::Empty);
            r.detail.insert("reason".into(), json!(reason));
            r
        }
        (Prediction::Invalid(reason), _) => {
            let mut r = ScoreRecord::new(sample, 0.0, ParseStatus::Invalid);
            r.detail.insert("reason".into(), json!(reason));
            r
        }
        (Prediction::Null, Target::Boxes(gts)) => {
            let mut r = ScoreRecord::new(sample, 0.0, ParseStatus::Empty);
            r.detail.insert("fn".into(), json!(gts.len()));
            r
        }
        (Prediction::Null, _) => ScoreRecord::new(sample, 0.0, ParseStatus::Empty),
        (Prediction::Boxes(preds), Target::Boxes(gts)) => score_boxes(sample, gts, preds),
        (Prediction::Mask(text), Target::Mask(gt_text)) => score_mask(sample, gt_text, text),
        (Prediction::Count(c), Target::Count(gt)) => {
            let mut r = ScoreRecord::new(sample, counting_score(*gt, Some(*c)), ParseStatus::Ok);
            r.detail.insert("count".into(), json!(c));
            r.detail.insert("target".into(), json!(gt));
            r
        }
        (Prediction::Choice(c), Target::Choice(y)) => {
            ScoreRecord::new(sample, option_score(*y, &ParsedAnswer::Choice(*c)), ParseStatus::Ok)
        }
        (other, _) => {
            let mut r = ScoreRecord::new(sample, 0.0, ParseStatus::Invalid);
            r.detail.insert("reason".into(), json!(format!("prediction kind {} does not fit task {}", kind_name(other), sample.task)));
            r
        }
    };
    rec.prediction = Some(pred.clone());
    rec
}

fn kind_name(p: &Prediction) -> &'static str {
    match p {
        Prediction::Boxes(_) => "boxes",
        Prediction::Mask(_) => "mask",
        Prediction::Count(_) => "count",
        Prediction::Choice(_) => "option",
        Prediction::Null => "null",
        Prediction::Invalid(_) => "invalid",
        Prediction::Empty(_) => "empty",
    }
}

fn score_boxes(sample: &Sample, gts: &[GeomBox], preds: &[GeomBox]) -> ScoreRecord {
    if preds.is_empty() {
        return ScoreRecord::new(sample, 0.0, ParseStatus::Empty);
    }
    if sample.task.answer_format() == crate::task::AnswerFormat::Box {
        let g = &gts[0];
        let (best_idx, best) = preds
            .iter()
            .enumerate()
            .map(|(i, p)| (i, s_box(g, p).unwrap_or(0.0)))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut r = ScoreRecord::new(sample, best.max(0.0), ParseStatus::Ok);
        let p = &preds[best_idx];
        r.detail.insert("iou".into(), json!(iou(g, p).unwrap_or(0.0)));
        r.detail.insert("center_distance".into(), json!(g.center().distance(p.center())));
        r.detail.insert("best_index".into(), json!(best_idx));
        return r;
    }
    let m = greedy_match(gts, preds);
    let mut r = ScoreRecord::new(sample, soft_f1(&m), ParseStatus::Ok);
    r.detail.insert("matched_pairs".into(), json!(m.pairs.len()));
    r.detail.insert("pair_scores".into(), json!(m.pairs.iter().map(|p| p.2).collect::<Vec<_>>()));
    r.detail.insert("fp".into(), json!(m.fp));
    r.detail.insert("fn".into(), json!(m.fn_count));
    r.detail.insert("t".into(), json!(m.t));
    r
}

fn score_mask(sample: &Sample, gt_text: &str, pred_text: &str) -> ScoreRecord {
    let gt = match RleMask::decompress(gt_text, sample.height, sample.width) {
        Ok(m) => m,
        Err(e) => {
            let mut r = ScoreRecord::new(sample, 0.0, ParseStatus::Invalid);
            r.detail.insert("reason".into(), json!(format!("ground truth: {e}")));
            return r;
        }
    };
    let pred = match RleMask::decompress(pred_text, sample.height, sample.width) {
        Ok(m) => m,
        Err(e) => {
            let mut r = ScoreRecord::new(sample, 0.0, ParseStatus::Invalid);
            r.detail.insert("reason".into(), json!(e.to_string()));
            return r;
        }
    };
    if pred.area() == 0 {
        return ScoreRecord::new(sample, 0.0, ParseStatus::Empty);
    }
    let score = s_mask(&gt, &pred).unwrap_or(0.0);
    let mut r = ScoreRecord::new(sample, score, ParseStatus::Ok);
    r.detail.insert("iou".into(), json!(gt.iou(&pred).unwrap_or(0.0)));
    r
}

/// Target expressed as a prediction; scoring it must give exactly 1.
pub fn target_as_prediction(target: &Target) -> Prediction {
    match target {
        Target::Boxes(bs) => Prediction::Boxes(bs.clone()),
        Target::Mask(m) => Prediction::Mask(m.clone()),
        Target::Count(c) => Prediction::Count(*c),
        Target::Choice(c) => Prediction::Choice(*c),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    pub samples: usize,
    /// Mean raw score in `[0, 1]`.
    pub raw: f64,
    /// `raw * 100`, two decimals.
    pub display: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub dimension: Dimension,
    pub tasks: usize,
    pub raw: Option<f64>,
    pub display: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: Vec<TaskScore>,
    /// Expected tasks without any record; excluded from every mean.
    pub missing: Vec<Task>,
    pub dimensions: Vec<DimensionScore>,
    pub overall_raw: Option<f64>,
    pub overall: Option<f64>,
    pub samples: usize,
}

impl Aggregate {
    pub fn task(&self, task: Task) -> Option<&TaskScore> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Macro aggregation: task means, dimension means of task means, and the
/// overall mean of task means.
pub fn aggregate(records: &[ScoreRecord], expected: &[Task]) -> Aggregate {
    let mut by_task: BTreeMap<Task, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task).or_default().push(r.raw_score);
    }
    let tasks: Vec<TaskScore> = by_task
        .iter()
        .map(|(&task, scores)| {
            let raw = mean(scores).unwrap_or(0.0);
            TaskScore {
                task,
                samples: scores.len(),
                raw,
                display: round2(raw * 100.0),
            }
        })
        .collect();
    let missing = expected
        .iter()
        .filter(|t| !by_task.contains_key(t))
        .copied()
        .collect();
    let dimensions = Dimension::ALL
        .iter()
        .map(|&d| {
            let member: Vec<f64> = tasks.iter().filter(|t| t.task.dimension() == d).map(|t| t.raw).collect();
            let raw = mean(&member);
            DimensionScore {
                dimension: d,
                tasks: member.len(),
                raw,
                display: raw.map(|v| round2(v * 100.0)),
            }
        })
        .collect();
    let all: Vec<f64> = tasks.iter().map(|t| t.raw).collect();
    let overall_raw = mean(&all);
    Aggregate {
        tasks,
        missing,
        dimensions,
        overall_raw,
        overall: overall_raw.map(|v| round2(v * 100.0)),
        samples: records.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SampleContext;
    use crate::mask::BinaryMask;
    use crate::task::AnswerFormat;
    use proptest::prelude::*;

    fn hbb(x1: f64, y1: f64, x2: f64, y2: f64) -> GeomBox {
        GeomBox::hbb(x1, y1, x2, y2)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }


    #[test]
    fn geometric_ties_are_exact() {
        // d^2 / sigma^2 = 1/2 for both pairs.
        let a = s_box(&GeomBox::hbb(20.0, 40.0, 30.0, 50.0), &GeomBox::hbb(20.0, 50.0, 30.0, 60.0)).unwrap();
        let b = s_box(&GeomBox::hbb(30.0, 90.0, 60.0, 100.0), &GeomBox::hbb(60.0, 90.0, 70.0, 120.0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let gts = [GeomBox::hbb(30.0, 90.0, 60.0, 100.0), GeomBox::hbb(20.0, 40.0, 30.0, 50.0)];
        let preds = [GeomBox::hbb(20.0, 50.0, 30.0, 60.0), GeomBox::hbb(60.0, 90.0, 70.0, 120.0)];
        assert_eq!(greedy_match(&gts, &preds).pairs[0].0, 0);
    }
    #[test]
    fn s_box_examples() {
        let g = hbb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(s_box(&g, &g).unwrap(), 1.0);
        let expected = 1.0 / 3.0 + (2.0 / 3.0) * (-25.0f64 / 200.0).exp();
        let got = s_box(&g, &hbb(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert!(close(got, expected));
        assert!((got - 0.92167).abs() < 1e-5);
        let far = s_box(&g, &hbb(100.0, 100.0, 110.0, 110.0)).unwrap();
        assert!(close(far, (-100.0f64).exp()));
        assert!(s_box(&hbb(0.0, 0.0, 0.0, 10.0), &g).is_err());
    }

    #[test]
    fn obb_sigma_uses_enclosing_box() {
        let diamond = GeomBox::obb([(5.0, 0.0), (10.0, 5.0), (5.0, 10.0), (0.0, 5.0)]);
        let shifted = GeomBox::obb([(8.0, 0.0), (13.0, 5.0), (8.0, 10.0), (3.0, 5.0)]);
        let overlap = iou(&diamond, &shifted).unwrap();
        let expected = overlap + (1.0 - overlap) * (-9.0f64 / 200.0).exp();
        assert!(close(s_box(&diamond, &shifted).unwrap(), expected));
    }

    #[test]
    fn matching_examples() {
        let gts = [hbb(0.0, 0.0, 10.0, 10.0), hbb(50.0, 50.0, 60.0, 60.0)];
        let m = greedy_match(&gts, &gts);
        assert_eq!((m.fp, m.fn_count, m.t), (0, 0, 2.0));
        assert_eq!(soft_f1(&m), 1.0);

        let m = greedy_match(&gts, &gts[..1]);
        assert_eq!((m.t, m.fp, m.fn_count), (1.0, 0, 1));
        assert!(close(soft_f1(&m), 2.0 / 3.0));

        // Pred 1 sits so far away that its score underflows to exactly 0.
        let preds = [hbb(2.0, 0.0, 12.0, 10.0), hbb(1000.0, 1000.0, 1010.0, 1010.0)];
        let m = greedy_match(&gts, &preds);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!((m.fp, m.fn_count), (1, 1));
        assert_eq!(s_box(&gts[1], &preds[1]).unwrap(), 0.0);
    }

    #[test]
    fn soft_f1_examples() {
        let m = MatchResult { pairs: vec![(0, 0, 0.8)], fp: 1, fn_count: 1, t: 0.8 };
        let p = 0.8 / 1.8;
        assert!(close(soft_f1(&m), p));
        assert!((soft_f1(&m) - 0.4444).abs() < 1e-4);
        let empty = MatchResult { pairs: vec![], fp: 0, fn_count: 0, t: 0.0 };
        assert_eq!(soft_f1(&empty), 0.0);
    }

    #[test]
    fn single_pair_quality_does_not_enter_f1() {
        let g = [hbb(0.0, 0.0, 10.0, 10.0)];
        let m = greedy_match(&g, &[hbb(5.0, 0.0, 15.0, 10.0)]);
        assert_eq!((m.fp, m.fn_count), (0, 0));
        assert!(close(soft_f1(&m), 1.0));
    }

    fn rows_mask(h: u32, w: u32, f: impl Fn(u32, u32) -> bool) -> RleMask {
        let mut m = BinaryMask::new(h, w);
        for r in 0..h {
            for c in 0..w {
                m.set(r, c, f(r, c));
            }
        }
        RleMask::encode(&m)
    }

    #[test]
    fn s_mask_examples() {
        let top = rows_mask(10, 10, |r, _| r < 5);
        let left = rows_mask(10, 10, |_, c| c < 5);
        assert_eq!(s_mask(&top, &top).unwrap(), 1.0);
        let expected = 1.0 / 3.0 + (2.0 / 3.0) * (-0.1f64).exp();
        assert!(close(s_mask(&top, &left).unwrap(), expected));
        assert!((expected - 0.9365).abs() < 1e-4);

        let a = rows_mask(200, 200, |r, c| r < 2 && c < 2);
        let b = rows_mask(200, 200, |r, c| r >= 198 && c >= 198);
        assert!(s_mask(&a, &b).unwrap() < 1e-12);

        let other = rows_mask(5, 5, |_, _| true);
        assert_eq!(s_mask(&top, &other).unwrap(), 0.0);
        let empty = rows_mask(10, 10, |_, _| false);
        assert_eq!(s_mask(&top, &empty).unwrap(), 0.0);
        assert!(s_mask(&empty, &top).is_err());
    }

    #[test]
    fn counting_examples() {
        assert!(close(counting_score(50, Some(49)), 0.98));
        assert_eq!(counting_score(0, Some(0)), 1.0);
        assert_eq!(counting_score(0, Some(1)), 0.0);
        assert_eq!(counting_score(4, Some(9)), 0.0);
        assert_eq!(counting_score(4, None), 0.0);
    }

    #[test]
    fn option_examples() {
        assert_eq!(option_score('A', &ParsedAnswer::Choice('A')), 1.0);
        assert_eq!(option_score('A', &ParsedAnswer::Choice('B')), 0.0);
        assert_eq!(option_score('A', &ParsedAnswer::Invalid("x".into())), 0.0);
    }

    #[test]
    fn best_box_examples() {
        let g = hbb(0.0, 0.0, 10.0, 10.0);
        let stray = [hbb(500.0, 500.0, 510.0, 510.0), g.clone(), hbb(900.0, 0.0, 910.0, 10.0)];
        assert_eq!(best_box_score(&g, &stray), 1.0);
        assert_eq!(best_box_score(&g, &[]), 0.0);
        let a = hbb(3.0, 0.0, 13.0, 10.0);
        let b = hbb(6.0, 0.0, 16.0, 10.0);
        let sa = s_box(&g, &a).unwrap();
        assert!(sa > s_box(&g, &b).unwrap());
        assert_eq!(best_box_score(&g, &[b, a]), sa);
    }

    fn sample(task: Task, target: Target) -> Sample {
        Sample {
            id: "s".into(),
            image: "i.png".into(),
            width: 100,
            height: 100,
            task,
            query: String::new(),
            region: None,
            region2: None,
            target,
            choices: vec!["a".into(), "b".into()],
            coord_protocol: None,
            markers: vec![],
            context: SampleContext::default(),
        }
    }

    #[test]
    fn records_zero_on_invalid_or_empty() {
        let s = sample(Task::GC, Target::Count(3));
        let r = score_prediction(&s, &Prediction::Invalid("no count".into()));
        assert_eq!((r.raw_score, r.parse_status), (0.0, ParseStatus::Invalid));
        let r = score_prediction(&s, &Prediction::Empty("timeout".into()));
        assert_eq!((r.raw_score, r.parse_status), (0.0, ParseStatus::Empty));
        let r = score_prediction(&s, &Prediction::Choice('A'));
        assert_eq!((r.raw_score, r.parse_status), (0.0, ParseStatus::Invalid));
        let r = score_prediction(&s, &Prediction::Count(3));
        assert_eq!(r.raw_score, 1.0);
    }

    #[test]
    fn self_scores_are_one() {
        let boxes = Target::Boxes(vec![hbb(1.0, 1.0, 9.0, 9.0), hbb(20.0, 20.0, 30.0, 40.0)]);
        let mask = crate::mask::box_fill_mask(&hbb(1.0, 1.0, 9.0, 9.0), 100, 100).unwrap().compress();
        for (task, target) in [
            (Task::GD, boxes),
            (Task::BG, Target::Boxes(vec![hbb(1.0, 1.0, 9.0, 9.0)])),
            (Task::RS, Target::Mask(mask)),
            (Task::GC, Target::Count(0)),
            (Task::OC, Target::Choice('B')),
        ] {
            let s = sample(task, target);
            assert_eq!(score_prediction(&s, &target_as_prediction(&s.target)).raw_score, 1.0, "{task}");
        }
    }

    #[test]
    fn aggregate_examples() {
        let rec = |task: Task, raw: f64| ScoreRecord {
            sample_id: format!("{task}-{raw}"),
            task,
            raw_score: raw,
            parse_status: ParseStatus::Ok,
            detail: BTreeMap::new(),
            calls: 1,
            prediction: None,
            diagnosis: None,
            oracle: None,
        };
        let ones: Vec<ScoreRecord> = Task::ALL.iter().map(|&t| rec(t, 1.0)).collect();
        let a = aggregate(&ones, &Task::ALL);
        assert_eq!(a.overall, Some(100.0));
        assert!(a.dimensions.iter().all(|d| d.display == Some(100.0)));

        let mut uneven = vec![rec(Task::GD, 1.0); 9];
        uneven.push(rec(Task::OC, 0.0));
        let a = aggregate(&uneven, &[Task::GD, Task::OC, Task::PDR]);
        assert_eq!(a.overall, Some(50.0));
        assert_eq!(a.missing, vec![Task::PDR]);

        // Fixture table: task i scores i/15 for i = 0..15.
        let table: Vec<ScoreRecord> = Task::ALL.iter().enumerate().map(|(i, &t)| rec(t, i as f64 / 15.0)).collect();
        let a = aggregate(&table, &Task::ALL);
        let dim = |d: Dimension| a.dimensions.iter().find(|x| x.dimension == d).unwrap().raw.unwrap();
        assert!(close(dim(Dimension::Grounding), 2.0 / 15.0));
        assert!(close(dim(Dimension::FineGrained), 6.5 / 15.0));
        assert!(close(dim(Dimension::Counting), 10.5 / 15.0));
        assert!(close(dim(Dimension::Spatial), 14.0 / 15.0));
        assert!(close(a.overall_raw.unwrap(), 0.5));
        assert_eq!(a.overall, Some(50.0));
        assert_eq!(Task::BG.answer_format(), AnswerFormat::Box);
    }

    /// Re-evaluates every remaining pair each round, as the rule is stated.
    fn exhaustive_greedy(gts: &[GeomBox], preds: &[GeomBox]) -> MatchResult {
        let mut gt_free = vec![true; gts.len()];
        let mut pred_free = vec![true; preds.len()];
        let mut pairs = Vec::new();
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                for (pi, p) in preds.iter().enumerate() {
                    if !gt_free[gi] || !pred_free[pi] {
                        continue;
                    }
                    let s = s_box(g, p).unwrap();
                    if s > 0.0 && best.is_none_or(|b| s > b.2) {
                        best = Some((gi, pi, s));
                    }
                }
            }
            let Some((gi, pi, s)) = best else { break };
            gt_free[gi] = false;
            pred_free[pi] = false;
            pairs.push((gi, pi, s));
        }
        let t = pairs.iter().map(|p| p.2).sum();
        MatchResult { fp: preds.len() - pairs.len(), fn_count: gts.len() - pairs.len(), pairs, t }
    }

    fn arb_box() -> impl Strategy<Value = GeomBox> {
        (0u32..40, 0u32..40, 1u32..15, 1u32..15)
            .prop_map(|(x, y, w, h)| hbb(f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h)))
    }

    proptest! {
        #[test]
        fn greedy_matches_exhaustive(gts in prop::collection::vec(arb_box(), 0..5), preds in prop::collection::vec(arb_box(), 0..5)) {
            prop_assert_eq!(greedy_match(&gts, &preds), exhaustive_greedy(&gts, &preds));
        }

        #[test]
        fn match_is_one_to_one_and_sorted(gts in prop::collection::vec(arb_box(), 0..8), preds in prop::collection::vec(arb_box(), 0..8)) {
            let m = greedy_match(&gts, &preds);
            let mut g: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
            let mut p: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
            g.dedup();
            p.sort_unstable();
            p.dedup();
            prop_assert_eq!(p.len(), m.pairs.len());
            prop_assert!(m.pairs.windows(2).all(|w| w[0].2 >= w[1].2));
            let f = soft_f1(&m);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f == 1.0, m.fp == 0 && m.fn_count == 0 && !m.pairs.is_empty());
        }

        #[test]
        fn s_box_bounded_and_monotone(g in arb_box(), dx in 0.0f64..50.0, extra in 0.0f64..50.0) {
            // Disjoint translations keep IoU at 0, isolating the distance term.
            let far = 100.0;
            let a = g.map_coords(|v, is_y| if is_y { v } else { v + far + dx });
            let b = g.map_coords(|v, is_y| if is_y { v } else { v + far + dx + extra });
            let (sa, sb) = (s_box(&g, &a).unwrap(), s_box(&g, &b).unwrap());
            prop_assert!((0.0..=1.0).contains(&sa) && (0.0..=1.0).contains(&sb));
            prop_assert!(sb <= sa);
            prop_assert_eq!(s_box(&g, &g).unwrap(), 1.0);
        }

        #[test]
        fn counting_properties(c in 0u64..10_000, d in 0u64..10_000) {
            prop_assert_eq!(counting_score(c, Some(c)), 1.0);
            if d <= c {
                prop_assert_eq!(counting_score(c, Some(c + d)), counting_score(c, Some(c - d)));
            }
        }
    }
}
