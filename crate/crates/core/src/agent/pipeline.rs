//! MAP three-stage inference and the single-pass baseline strategies.
//!
//! Every request goes through [`Session::call`], which is the only place
//! the call counter moves.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts::{self, Scope};
use super::{
    BackendError, BackendRequest, Decoding, ModelBackend, RequestImage, RequestMeta, Segmenter, Stage, View,
};
use crate::coords::{
    make_roi, roi_local_to_full_in, suppress_overlaps, CoordFrame, Convention, RoiWindow, DEFAULT_ROI_SIDE,
    DEFAULT_SUPPRESSION_IOU,
};
use crate::dataset::{oracle_crop, sliding_tiles, ImageCanvas, ImageProvider, Sample, Target};
use crate::error::{Error, Result};
use crate::geometry::{iou, GeomBox, Point, RectRegion};
use crate::mask::RleMask;
use crate::metrics::{score_prediction, Prediction, ScoreRecord};
use crate::parse::{parse_final, parse_local_answer, parse_points, render_boxes, AnswerKind, BoxFamily, ParsedAnswer};
use crate::task::{AnswerFormat, Task};

/// Upper bound on points read from a discovery reply before suppression.
const MAX_DISCOVERY_POINTS: usize = 64;
const ROI_OUTLINE: [u8; 3] = [0, 255, 0];

/// How many ROIs discovery may return per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RoiPolicy {
    /// Per-task budgets; explicit-region tasks skip discovery.
    TaskAdaptive,
    /// The same budget for every task, discovery always on.
    Uniform(usize),
}

impl RoiPolicy {
    /// Discovery budget K, or `None` when the ROIs come straight from the
    /// query's explicit regions.
    pub fn budget(self, task: Task) -> Option<usize> {
        match self {
            RoiPolicy::TaskAdaptive if task.requires_region() => None,
            RoiPolicy::TaskAdaptive => Some(match task {
                Task::GD | Task::MCR => 4,
                Task::RS | Task::CS => 2,
                _ => 1,
            }),
            RoiPolicy::Uniform(k) => Some(k.max(1)),
        }
    }
}

impl fmt::Display for RoiPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoiPolicy::TaskAdaptive => f.write_str("task-adaptive"),
            RoiPolicy::Uniform(k) => write!(f, "uniform-{k}"),
        }
    }
}

impl FromStr for RoiPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('_', "-");
        if t == "task-adaptive" || t == "adaptive" {
            return Ok(RoiPolicy::TaskAdaptive);
        }
        match t.strip_prefix("uniform-").map(str::parse::<usize>) {
            Some(Ok(k)) if k >= 1 => Ok(RoiPolicy::Uniform(k)),
            _ => Err(Error::Config(format!(
                "unknown ROI policy {s:?}; expected task-adaptive or uniform-K with K >= 1"
            ))),
        }
    }
}

impl From<RoiPolicy> for String {
    fn from(p: RoiPolicy) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for RoiPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Settings shared by all strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    /// ROI and query-crop side S in pixels.
    pub side: u32,
    pub policy: RoiPolicy,
    pub convention: Convention,
    pub suppression_iou: f64,
    pub decoding: Decoding,
    /// Oracle crops read the ground truth and are refused unless set.
    pub allow_oracle: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            side: DEFAULT_ROI_SIDE,
            policy: RoiPolicy::TaskAdaptive,
            convention: Convention::Thousand,
            suppression_iou: DEFAULT_SUPPRESSION_IOU,
            decoding: Decoding::default(),
            allow_oracle: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    Map,
    Native,
    /// Downsample so the long edge is N.
    Resize(u32),
    /// Crop the query's explicit region.
    QueryCrop,
    /// Crop of side N around the ground truth; diagnostic only.
    OracleCrop(u32),
    /// One call per N-pixel tile, merged programmatically.
    SlidingWindow(u32),
}

impl Strategy {
    pub fn is_oracle(self) -> bool {
        matches!(self, Strategy::OracleCrop(_))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Map => f.write_str("map"),
            Strategy::Native => f.write_str("native"),
            Strategy::Resize(n) => write!(f, "resize-{n}"),
            Strategy::QueryCrop => f.write_str("query-crop"),
            Strategy::OracleCrop(n) => write!(f, "oracle-crop-{n}"),
            Strategy::SlidingWindow(n) => write!(f, "sliding-window-{n}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('_', "-");
        let sized = |prefix: &str| -> Option<u32> {
            t.strip_prefix(prefix)
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|&n| n > 0)
        };
        let parsed = match t.as_str() {
            "map" | "map-agent" => Some(Strategy::Map),
            "native" => Some(Strategy::Native),
            "query-crop" => Some(Strategy::QueryCrop),
            _ => sized("resize-")
                .map(Strategy::Resize)
                .or_else(|| sized("oracle-crop-").map(Strategy::OracleCrop))
                .or_else(|| sized("sliding-window-").map(Strategy::SlidingWindow))
                .or_else(|| sized("sliding-").map(Strategy::SlidingWindow)),
        };
        parsed.ok_or_else(|| {
            Error::Config(format!(
                "unknown strategy {s:?}; expected map, native, resize-N, query-crop, oracle-crop-N or sliding-window-N"
            ))
        })
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// What one ROI inspection contributed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceItem {
    pub roi: RoiWindow,
    pub local_answer: ParsedAnswer,
    /// Boxes in full-image pixels; `Some` iff the local answer holds boxes.
    pub remapped: Option<Vec<GeomBox>>,
    pub summary: String,
}

/// Prediction in full-image pixels plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub prediction: Prediction,
    pub calls: usize,
    pub detail: BTreeMap<String, Value>,
    pub oracle: bool,
}

/// The services a run needs.
#[derive(Clone, Copy)]
pub struct Runtime<'a> {
    pub backend: &'a dyn ModelBackend,
    pub segmenter: &'a dyn Segmenter,
    pub images: &'a dyn ImageProvider,
}

impl<'a> Runtime<'a> {
    pub fn new(backend: &'a dyn ModelBackend, segmenter: &'a dyn Segmenter, images: &'a dyn ImageProvider) -> Self {
        Runtime {
            backend,
            segmenter,
            images,
        }
    }
}

/// Expected shape of a local or final answer for `sample`.
pub fn answer_kind(sample: &Sample) -> AnswerKind {
    match sample.answer_format() {
        AnswerFormat::Boxes | AnswerFormat::Box => AnswerKind::Boxes(sample.box_family()),
        AnswerFormat::Mask => AnswerKind::Boxes(BoxFamily::Hbb),
        AnswerFormat::Count => AnswerKind::Count,
        AnswerFormat::Option => AnswerKind::Choice(sample.labels()),
    }
}

/// Per-sample request state.
struct Session<'a> {
    rt: Runtime<'a>,
    sample: &'a Sample,
    decoding: Decoding,
    convention: Convention,
    image: Option<Arc<ImageCanvas>>,
    calls: usize,
}

impl<'a> Session<'a> {
    fn open(rt: Runtime<'a>, sample: &'a Sample, cfg: &MapConfig) -> Result<Self> {
        let needs_pixels = rt.backend.wants_pixels()
            || (sample.answer_format() == AnswerFormat::Mask && rt.segmenter.wants_pixels());
        let image = if needs_pixels { Some(rt.images.image(sample)?) } else { None };
        Ok(Session {
            rt,
            sample,
            decoding: cfg.decoding,
            convention: rt.backend.convention().or(sample.coord_protocol).unwrap_or(cfg.convention),
            image,
            calls: 0,
        })
    }

    fn full_frame(&self) -> CoordFrame {
        CoordFrame {
            convention: self.convention,
            width: self.sample.width,
            height: self.sample.height,
        }
    }

    fn view_image(&self, view: View) -> RequestImage {
        match (view, &self.image) {
            (View::Full, Some(img)) => RequestImage::shared(img.clone()),
            (View::Full, None) => RequestImage::dims_only(self.sample.width, self.sample.height),
            (View::Resized { width, height }, Some(img)) => {
                RequestImage::from_canvas(img.resize_long_edge(width.max(height)))
            }
            (View::Resized { width, height }, None) => RequestImage::dims_only(width, height),
            (View::Window { roi }, Some(img)) => RequestImage::from_canvas(img.crop(&roi)),
            (View::Window { roi }, None) => RequestImage::dims_only(roi.side, roi.side),
        }
    }

    /// Full image with the given windows outlined.
    fn annotated_image(&self, rois: &[RoiWindow]) -> RequestImage {
        match &self.image {
            Some(img) => {
                let mut canvas = (**img).clone();
                for r in rois {
                    canvas.draw_outline(&r.rect(), ROI_OUTLINE, 3);
                }
                RequestImage::from_canvas(canvas)
            }
            None => RequestImage::dims_only(self.sample.width, self.sample.height),
        }
    }

    fn call(
        &mut self,
        stage: Stage,
        index: usize,
        view: View,
        budget: usize,
        image: RequestImage,
        prompt: String,
    ) -> std::result::Result<String, BackendError> {
        self.calls += 1;
        let request = BackendRequest {
            images: vec![image],
            prompt,
            decoding: self.decoding,
            meta: RequestMeta {
                sample_id: self.sample.id.clone(),
                stage,
                index,
                view,
                budget,
            },
        };
        self.rt.backend.complete(&request)
    }

    /// Parsed final answer with boxes already mapped to full-image pixels.
    fn finish(&self, parsed: ParsedAnswer, to_full: impl Fn(&GeomBox) -> Result<GeomBox>) -> Prediction {
        match parsed {
            ParsedAnswer::Boxes(bs) => {
                let mapped: Vec<GeomBox> = bs.iter().filter_map(|b| to_full(b).ok()).collect();
                if mapped.is_empty() {
                    return Prediction::Invalid("no box inside the shown image".into());
                }
                self.boxes_prediction(mapped)
            }
            ParsedAnswer::Count(c) => Prediction::Count(c),
            ParsedAnswer::Choice(c) => Prediction::Choice(c),
            ParsedAnswer::Null => Prediction::Null,
            ParsedAnswer::Invalid(r) => Prediction::Invalid(r),
        }
    }

    /// Mask tasks turn the first box into a mask; box tasks keep all.
    fn boxes_prediction(&self, boxes: Vec<GeomBox>) -> Prediction {
        if self.sample.answer_format() != AnswerFormat::Mask {
            return Prediction::Boxes(boxes);
        }
        let prompt = boxes[0].bounds().to_box();
        let image = self.view_image(View::Full);
        match self.rt.segmenter.segment(&image, &prompt) {
            Ok(m) if m.area() > 0 => Prediction::Mask(m.compress()),
            Ok(_) | Err(Error::EmptyMask) => Prediction::Empty("segmenter returned an empty mask".into()),
            Err(e) => Prediction::Empty(format!("segmenter: {e}")),
        }
    }
}

fn local_to_full(b: &GeomBox, convention: Convention, roi: &RoiWindow) -> Result<GeomBox> {
    GeomBox::from_coords(&roi_local_to_full_in(&b.coords(), convention, roi)?)
}

fn failed(session: &Session, err: BackendError, mut detail: BTreeMap<String, Value>) -> Outcome {
    detail.insert("error".into(), json!(err.to_string()));
    Outcome {
        prediction: Prediction::Empty(err.to_string()),
        calls: session.calls,
        detail,
        oracle: false,
    }
}

/// Windows for the sample: from discovery, or straight from the query's
/// regions. The flag reports the center-window fallback.
fn discover(session: &mut Session, cfg: &MapConfig, budget: usize) -> std::result::Result<(Vec<RoiWindow>, bool), BackendError> {
    let s = session.sample;
    let prompt = prompts::discovery_prompt(s, session.convention, budget);
    let image = session.view_image(View::Full);
    let reply = session.call(Stage::Discovery, 0, View::Full, budget, image, prompt)?;
    let frame = session.full_frame();
    let windows: Vec<RoiWindow> = parse_points(&reply, MAX_DISCOVERY_POINTS)
        .into_iter()
        .filter_map(|p| frame.anchor_to_abs(p).ok())
        .filter_map(|a| make_roi(a, cfg.side, s.width, s.height).ok())
        .collect();
    let mut kept = suppress_overlaps(&windows, cfg.suppression_iou);
    kept.truncate(budget);
    if kept.is_empty() {
        log::info!("{}: discovery gave no usable point; using the image center", s.id);
        let center = Point::new(f64::from(s.width) / 2.0, f64::from(s.height) / 2.0);
        let roi = make_roi(center, cfg.side, s.width, s.height).expect("center lies inside the image");
        return Ok((vec![roi], true));
    }
    Ok((kept, false))
}

fn render_roi(frame: &CoordFrame, roi: &RoiWindow) -> String {
    frame.render_box(&roi.rect().to_box())
}

fn inspect(session: &mut Session, index: usize, roi: RoiWindow) -> std::result::Result<EvidenceItem, BackendError> {
    let prompt = prompts::inspection_prompt(session.sample, session.convention, roi.side);
    let view = View::Window { roi };
    let image = session.view_image(view);
    let reply = session.call(Stage::Inspection, index, view, 0, image, prompt)?;
    let local_answer = parse_local_answer(&reply, &answer_kind(session.sample));
    let remapped = match &local_answer {
        ParsedAnswer::Boxes(bs) => Some(
            bs.iter()
                .filter_map(|b| local_to_full(b, session.convention, &roi).ok())
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };
    let frame = session.full_frame();
    let content = match (&local_answer, &remapped) {
        (_, Some(bs)) if bs.is_empty() => "no box inside the crop".to_string(),
        (_, Some(bs)) => {
            let rendered: Vec<GeomBox> = bs.iter().map(|b| frame.box_from_abs(b)).collect();
            render_boxes(&rendered)
        }
        (ParsedAnswer::Count(c), _) => format!("count {c}"),
        (ParsedAnswer::Choice(c), _) => format!("option {c}"),
        (ParsedAnswer::Null, _) => "target not visible".to_string(),
        (ParsedAnswer::Invalid(r), _) => format!("unreadable reply ({r})"),
        (ParsedAnswer::Boxes(_), None) => unreachable!("boxes always carry a remap"),
    };
    Ok(EvidenceItem {
        roi,
        summary: format!("ROI {} at {}: {}", index + 1, render_roi(&frame, &roi), content),
        local_answer,
        remapped,
    })
}

/// Discovery, per-ROI inspection and synthesis. The number of calls is
/// always `discovery + ROIs + 1`.
pub fn run_map(rt: Runtime, sample: &Sample, cfg: &MapConfig) -> Result<Outcome> {
    let mut session = Session::open(rt, sample, cfg)?;
    let mut detail = BTreeMap::new();
    detail.insert("convention".into(), json!(session.convention));

    let budget = cfg.policy.budget(sample.task);
    let (rois, discovered) = match budget {
        Some(k) => match discover(&mut session, cfg, k) {
            Ok((rois, fallback)) => {
                if fallback {
                    detail.insert("discovery_fallback".into(), json!(true));
                }
                (rois, true)
            }
            Err(e) => return Ok(failed(&session, e, detail)),
        },
        None => {
            let rois = sample
                .explicit_regions()
                .iter()
                .map(|r| RoiWindow::from_region(r, cfg.side, sample.width, sample.height))
                .collect::<Result<Vec<_>>>()?;
            if rois.is_empty() {
                return Err(Error::Config(format!("{}: task {} needs an explicit region", sample.id, sample.task)));
            }
            (rois, false)
        }
    };
    detail.insert("rois".into(), json!(rois));

    let mut evidence = Vec::with_capacity(rois.len());
    for (i, roi) in rois.iter().enumerate() {
        match inspect(&mut session, i, *roi) {
            Ok(item) => evidence.push(item),
            Err(e) => return Ok(failed(&session, e, detail)),
        }
    }
    let summaries: Vec<String> = evidence.iter().map(|e| e.summary.clone()).collect();
    if evidence.iter().all(|e| e.local_answer == ParsedAnswer::Null) {
        detail.insert("evidence_all_null".into(), json!(true));
    }
    detail.insert("evidence".into(), json!(summaries));

    let prompt = prompts::synthesis_prompt(sample, session.convention, &summaries);
    let image = session.annotated_image(&rois);
    let reply = match session.call(Stage::Synthesis, 0, View::Full, 0, image, prompt) {
        Ok(r) => r,
        Err(e) => return Ok(failed(&session, e, detail)),
    };
    let expected = usize::from(discovered) + rois.len() + 1;
    assert_eq!(session.calls, expected, "{}: call count drifted from the MAP formula", sample.id);

    let frame = session.full_frame();
    let prediction = session.finish(parse_final(&reply, &answer_kind(sample)), |b| frame.box_to_abs(b));
    Ok(Outcome {
        prediction,
        calls: session.calls,
        detail,
        oracle: false,
    })
}

/// One direct call on `view`, boxes mapped back with `to_full`.
fn single_call(
    session: &mut Session,
    view: View,
    scope: Scope,
    to_full: impl Fn(&GeomBox) -> Result<GeomBox>,
    mut detail: BTreeMap<String, Value>,
) -> Outcome {
    let prompt = prompts::direct_prompt(session.sample, session.convention, scope);
    let image = session.view_image(view);
    match session.call(Stage::Direct, 0, view, 0, image, prompt) {
        Ok(reply) => {
            let prediction = session.finish(parse_final(&reply, &answer_kind(session.sample)), to_full);
            Outcome {
                prediction,
                calls: session.calls,
                detail,
                oracle: false,
            }
        }
        Err(e) => {
            detail.insert("error".into(), json!(e.to_string()));
            failed(session, e, detail)
        }
    }
}

/// Boxes a crop around the ground truth should cover.
fn oracle_targets(sample: &Sample) -> Vec<GeomBox> {
    match &sample.target {
        Target::Boxes(bs) if !bs.is_empty() => bs.clone(),
        Target::Mask(text) if sample.context.support.is_empty() => RleMask::decompress(text, sample.height, sample.width)
            .and_then(|m| m.pixel_bounds())
            .map(|r| vec![r.to_box()])
            .unwrap_or_default(),
        _ => sample.context.support.clone(),
    }
}

fn union(regions: &[RectRegion]) -> Option<RectRegion> {
    regions.iter().copied().reduce(|a, b| {
        RectRegion::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2))
    })
}

fn run_window(session: &mut Session, roi: RoiWindow, detail: BTreeMap<String, Value>) -> Outcome {
    let convention = session.convention;
    single_call(
        session,
        View::Window { roi },
        Scope::Crop { side: roi.side },
        |b| local_to_full(b, convention, &roi),
        detail,
    )
}

fn run_sliding(session: &mut Session, side: u32, mut detail: BTreeMap<String, Value>) -> Outcome {
    let s = session.sample;
    let tiles = sliding_tiles(s.width, s.height, side);
    let kind = answer_kind(s);
    let mut answers = Vec::with_capacity(tiles.len());
    for (i, roi) in tiles.iter().enumerate() {
        let view = View::Window { roi: *roi };
        let prompt = prompts::inspection_prompt(s, session.convention, roi.side);
        let image = session.view_image(view);
        match session.call(Stage::Tile, i, view, 0, image, prompt) {
            Ok(reply) => answers.push((*roi, parse_local_answer(&reply, &kind))),
            Err(e) => return failed(session, e, detail),
        }
    }
    detail.insert("tiles".into(), json!(tiles.len()));
    let prediction = merge_tiles(session, &answers);
    Outcome {
        prediction,
        calls: session.calls,
        detail,
        oracle: false,
    }
}

/// Programmatic merge: boxes by duplicate suppression, counts summed,
/// options by majority with ties to the earlier label.
fn merge_tiles(session: &Session, answers: &[(RoiWindow, ParsedAnswer)]) -> Prediction {
    let valid: Vec<&(RoiWindow, ParsedAnswer)> = answers.iter().filter(|(_, a)| !a.is_invalid()).collect();
    if valid.is_empty() {
        return Prediction::Invalid("no tile gave a readable answer".into());
    }
    match answer_kind(session.sample) {
        AnswerKind::Boxes(_) => {
            let mut kept: Vec<GeomBox> = Vec::new();
            for (roi, a) in &valid {
                if let ParsedAnswer::Boxes(bs) = a {
                    for b in bs.iter().filter_map(|b| local_to_full(b, session.convention, roi).ok()) {
                        if kept.iter().all(|k| iou(k, &b).map_or(true, |v| v <= DEFAULT_SUPPRESSION_IOU)) {
                            kept.push(b);
                        }
                    }
                }
            }
            if kept.is_empty() {
                Prediction::Null
            } else {
                session.boxes_prediction(kept)
            }
        }
        AnswerKind::Count => Prediction::Count(
            valid
                .iter()
                .map(|(_, a)| if let ParsedAnswer::Count(c) = a { *c } else { 0 })
                .sum(),
        ),
        AnswerKind::Choice(_) => {
            let mut votes: BTreeMap<char, usize> = BTreeMap::new();
            for (_, a) in &valid {
                if let ParsedAnswer::Choice(c) = a {
                    *votes.entry(*c).or_default() += 1;
                }
            }
            votes
                .iter()
                .fold(None, |best: Option<(char, usize)>, (&c, &n)| match best {
                    Some((_, m)) if m >= n => best,
                    _ => Some((c, n)),
                })
                .map_or(Prediction::Null, |(c, _)| Prediction::Choice(c))
        }
    }
}

/// Runs `strategy` on one sample. Configuration problems are errors;
/// backend failures become an `Empty` prediction.
pub fn run_strategy(rt: Runtime, sample: &Sample, strategy: Strategy, cfg: &MapConfig) -> Result<Outcome> {
    if strategy == Strategy::Map {
        return run_map(rt, sample, cfg);
    }
    if strategy.is_oracle() && !cfg.allow_oracle {
        return Err(Error::Config("oracle crops read the ground truth; enable them explicitly".into()));
    }
    let mut session = Session::open(rt, sample, cfg)?;
    let mut detail = BTreeMap::new();
    detail.insert("convention".into(), json!(session.convention));
    let (w, h) = (sample.width, sample.height);
    let mut outcome = match strategy {
        Strategy::Map => unreachable!("handled above"),
        Strategy::Native => {
            let frame = session.full_frame();
            single_call(&mut session, View::Full, Scope::Image { width: w, height: h }, |b| frame.box_to_abs(b), detail)
        }
        Strategy::Resize(n) => {
            let (rw, rh) = ImageCanvas::resized_dims(w, h, n);
            let shown = CoordFrame::new(session.convention, rw, rh)?;
            let (sx, sy) = (f64::from(w) / f64::from(rw), f64::from(h) / f64::from(rh));
            detail.insert("resized".into(), json!([rw, rh]));
            let to_full = |b: &GeomBox| -> Result<GeomBox> {
                let small = shown.box_to_abs(b)?;
                let big = small.map_coords(|v, is_y| {
                    if is_y {
                        (v * sy).clamp(0.0, f64::from(h))
                    } else {
                        (v * sx).clamp(0.0, f64::from(w))
                    }
                });
                big.validate()?;
                Ok(big)
            };
            single_call(
                &mut session,
                View::Resized { width: rw, height: rh },
                Scope::Image { width: rw, height: rh },
                to_full,
                detail,
            )
        }
        Strategy::QueryCrop => {
            let region = union(&sample.explicit_regions()).ok_or_else(|| {
                Error::Config(format!("{}: query crop needs a task with an explicit region, got {}", sample.id, sample.task))
            })?;
            let roi = RoiWindow::from_region(&region, cfg.side, w, h)?;
            detail.insert("roi".into(), json!(roi));
            run_window(&mut session, roi, detail)
        }
        Strategy::OracleCrop(n) => {
            let roi = oracle_crop(&oracle_targets(sample), n, w, h)?;
            detail.insert("roi".into(), json!(roi));
            run_window(&mut session, roi, detail)
        }
        Strategy::SlidingWindow(n) => run_sliding(&mut session, n, detail),
    };
    outcome.oracle = strategy.is_oracle();
    Ok(outcome)
}

/// Runs and scores one sample.
pub fn run_sample(rt: Runtime, sample: &Sample, strategy: Strategy, cfg: &MapConfig) -> Result<ScoreRecord> {
    let outcome = run_strategy(rt, sample, strategy, cfg)?;
    let mut rec = score_prediction(sample, &outcome.prediction);
    rec.calls = outcome.calls;
    for (k, v) in outcome.detail {
        rec.detail.entry(k).or_insert(v);
    }
    if outcome.oracle {
        rec.oracle = Some(true);
    }
    Ok(rec)
}
