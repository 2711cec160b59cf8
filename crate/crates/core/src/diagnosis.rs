//! Rule-based grounding error taxonomy and scale-correlation statistics.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{ContextObject, Sample};
use crate::error::{Error, Result};
use crate::geometry::{intersection_area, iou, GeomBox, RectRegion, EPS};
use crate::metrics::{s_box, Prediction};

pub const DEFAULT_SUCCESS_IOU: f64 = 0.3;

/// One label per grounding prediction, assigned in the declaration order
/// below: format failure first, success second, then the hallucination
/// kinds from coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DiagnosisLabel {
    /// Instruction-following failure: nothing parsable.
    If,
    Succ,
    /// Region hallucination: center outside the annotated semantic region.
    Rh,
    /// Object hallucination: touches no annotated object.
    Oh,
    /// Category hallucination: lands on an object of another category.
    Cath,
    /// Context hallucination: right category, wrong referent.
    Ctxh,
    /// Coordinate shift: on the target but below the success IoU.
    Cs,
    Other,
}

impl DiagnosisLabel {
    pub const ALL: [DiagnosisLabel; 8] = [
        DiagnosisLabel::If,
        DiagnosisLabel::Succ,
        DiagnosisLabel::Rh,
        DiagnosisLabel::Oh,
        DiagnosisLabel::Cath,
        DiagnosisLabel::Ctxh,
        DiagnosisLabel::Cs,
        DiagnosisLabel::Other,
    ];

    pub fn code(self) -> &'static str {
        match self {
            DiagnosisLabel::If => "IF",
            DiagnosisLabel::Succ => "SUCC",
            DiagnosisLabel::Rh => "RH",
            DiagnosisLabel::Oh => "OH",
            DiagnosisLabel::Cath => "CATH",
            DiagnosisLabel::Ctxh => "CTXH",
            DiagnosisLabel::Cs => "CS",
            DiagnosisLabel::Other => "OTHER",
        }
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisContext {
    pub gt_box: GeomBox,
    pub gt_category: String,
    /// Id of the target among `objects`; found by box equality when unset.
    pub gt_id: Option<u32>,
    pub semantic_region: Option<RectRegion>,
    pub objects: Vec<ContextObject>,
    pub referring_ids: BTreeSet<u32>,
}

impl DiagnosisContext {
    /// Context for a single-box sample with scene annotations.
    pub fn from_sample(sample: &Sample) -> Option<Self> {
        let gt_box = sample.target_boxes().first()?.clone();
        let ctx = &sample.context;
        let gt_id = ctx
            .target_id
            .or_else(|| ctx.objects.iter().find(|o| o.bbox == gt_box).map(|o| o.id));
        let gt_category = ctx
            .target_category
            .clone()
            .or_else(|| ctx.objects.iter().find(|o| Some(o.id) == gt_id).map(|o| o.category.clone()))?;
        Some(DiagnosisContext {
            gt_box,
            gt_category,
            gt_id,
            semantic_region: ctx.semantic_region,
            objects: ctx.objects.clone(),
            referring_ids: ctx.referring_ids.iter().copied().collect(),
        })
    }

    fn target_id(&self) -> Option<u32> {
        self.gt_id
            .or_else(|| self.objects.iter().find(|o| o.bbox == self.gt_box).map(|o| o.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub label: DiagnosisLabel,
    pub iou: f64,
    pub best_overlap_object_id: Option<u32>,
}

/// The prediction box compared against the target: the best-scoring one
/// when several were given.
fn chosen_box(pred: &Prediction, gt: &GeomBox) -> Option<GeomBox> {
    match pred {
        Prediction::Boxes(bs) => bs
            .iter()
            .map(|b| (s_box(gt, b).unwrap_or(0.0), b))
            .fold(None::<(f64, &GeomBox)>, |acc, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            })
            .map(|(_, b)| b.clone()),
        _ => None,
    }
}

/// Object with the largest intersection; ties by IoU, then lowest id, so
/// the result does not depend on list order.
fn best_overlap<'a>(p: &GeomBox, objects: &'a [ContextObject]) -> Option<(&'a ContextObject, f64)> {
    let mut best: Option<(&ContextObject, f64, f64)> = None;
    for o in objects {
        let inter = intersection_area(p, &o.bbox).unwrap_or(0.0);
        if inter <= EPS {
            continue;
        }
        let ov = iou(p, &o.bbox).unwrap_or(0.0);
        let better = match best {
            None => true,
            Some((b, bi, bo)) => {
                inter > bi || (inter == bi && (ov > bo || (ov == bo && o.id < b.id)))
            }
        };
        if better {
            best = Some((o, inter, ov));
        }
    }
    best.map(|(o, _, ov)| (o, ov))
}

pub fn classify(pred: &Prediction, ctx: &DiagnosisContext, success_iou: f64) -> Diagnosis {
    let Some(p) = chosen_box(pred, &ctx.gt_box) else {
        return Diagnosis {
            label: DiagnosisLabel::If,
            iou: 0.0,
            best_overlap_object_id: None,
        };
    };
    let gt_iou = iou(&ctx.gt_box, &p).unwrap_or(0.0);
    let best = best_overlap(&p, &ctx.objects);
    let best_id = best.map(|(o, _)| o.id);
    let label = if gt_iou >= success_iou {
        DiagnosisLabel::Succ
    } else if ctx.semantic_region.is_some_and(|r| !r.contains(p.center())) {
        DiagnosisLabel::Rh
    } else if let Some((obj, _)) = best {
        let target_id = ctx.target_id();
        if obj.category != ctx.gt_category {
            DiagnosisLabel::Cath
        } else if Some(obj.id) != target_id && !ctx.referring_ids.contains(&obj.id) {
            DiagnosisLabel::Ctxh
        } else if Some(obj.id) == target_id && gt_iou > 0.0 {
            DiagnosisLabel::Cs
        } else {
            DiagnosisLabel::Other
        }
    } else {
        DiagnosisLabel::Oh
    };
    Diagnosis {
        label,
        iou: gt_iou,
        best_overlap_object_id: best_id,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub label: DiagnosisLabel,
    pub count: usize,
    pub percent: f64,
}

/// Counts and percentages for every label, in priority order.
pub fn diagnosis_histogram(labels: &[DiagnosisLabel]) -> Vec<HistogramRow> {
    let n = labels.len();
    DiagnosisLabel::ALL
        .iter()
        .map(|&label| {
            let count = labels.iter().filter(|&&l| l == label).count();
            HistogramRow {
                label,
                count,
                percent: if n == 0 { 0.0 } else { 100.0 * count as f64 / n as f64 },
            }
        })
        .collect()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::UndefinedCorrelation(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite observation".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}
