//! Deterministic test doubles: canned replies, a ground-truth oracle and
//! fault injection.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use sha2::{Digest, Sha256};

use super::pipeline::MapConfig;
use super::prompts::evidence_section;
use super::{BackendError, BackendRequest, ModelBackend, Stage, TranscriptEntry, View};
use crate::coords::{make_roi, CoordFrame, Convention, RoiWindow};
use crate::dataset::{Sample, Target};
use crate::error::{Error, Result};
use crate::geometry::{iou, GeomBox, Point};
use crate::mask::RleMask;
use crate::parse::{parse_boxes, render_boxes, BoxFamily, ParsedAnswer};
use crate::task::AnswerFormat;

/// Produces a reply for a request, or `None` to decline.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &BackendRequest) -> Option<String>;
}

impl<F> Responder for F
where
    F: Fn(&BackendRequest) -> Option<String> + Send + Sync,
{
    fn respond(&self, request: &BackendRequest) -> Option<String> {
        self(request)
    }
}

/// Replies looked up by fingerprint, then by (sample, stage, index), then
/// from an optional responder. Anything else is an `Unscripted` error.
#[derive(Default)]
pub struct ScriptedBackend {
    by_fingerprint: HashMap<String, String>,
    by_stage: HashMap<(String, Stage, usize), String>,
    responder: Option<Box<dyn Responder>>,
    convention: Option<Convention>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        ScriptedBackend::default()
    }

    /// Answers every request with `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        ScriptedBackend::new().with_responder(move |_: &BackendRequest| Some(text.clone()))
    }

    /// Replays the responses of a transcript file, keyed by fingerprint.
    pub fn from_transcript(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut backend = ScriptedBackend::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: TranscriptEntry = serde_json::from_str(line).map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            if let Some(r) = entry.response {
                backend.by_fingerprint.insert(entry.fingerprint, r);
            }
        }
        Ok(backend)
    }

    pub fn with_reply(mut self, sample_id: &str, stage: Stage, index: usize, text: impl Into<String>) -> Self {
        self.by_stage.insert((sample_id.to_string(), stage, index), text.into());
        self
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>, text: impl Into<String>) -> Self {
        self.by_fingerprint.insert(fingerprint.into(), text.into());
        self
    }

    pub fn with_responder(mut self, responder: impl Responder + 'static) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn with_convention(mut self, convention: Convention) -> Self {
        self.convention = Some(convention);
        self
    }

    /// Exchanges so far, sorted by sample, stage and index.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        let mut v = self.transcript.lock().expect("transcript poisoned").clone();
        v.sort_by(|a, b| (&a.sample_id, a.stage, a.index).cmp(&(&b.sample_id, b.stage, b.index)));
        v
    }

    fn lookup(&self, request: &BackendRequest, fingerprint: &str) -> Option<String> {
        let m = &request.meta;
        self.by_fingerprint
            .get(fingerprint)
            .or_else(|| self.by_stage.get(&(m.sample_id.clone(), m.stage, m.index)))
            .cloned()
            .or_else(|| self.responder.as_ref().and_then(|r| r.respond(request)))
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError> {
        let fingerprint = request.fingerprint();
        let reply = self.lookup(request, &fingerprint);
        let m = &request.meta;
        self.transcript.lock().expect("transcript poisoned").push(TranscriptEntry {
            sample_id: m.sample_id.clone(),
            stage: m.stage,
            index: m.index,
            fingerprint: fingerprint.clone(),
            prompt: request.prompt.clone(),
            response: reply.clone(),
            error: None,
        });
        reply.ok_or_else(|| BackendError::Unscripted(format!("{} {} #{}", m.sample_id, m.stage, m.index)))
    }

    fn wants_pixels(&self) -> bool {
        false
    }

    fn name(&self) -> String {
        "scripted".into()
    }

    fn convention(&self) -> Option<Convention> {
        self.convention
    }
}

/// What the oracle says at the synthesis stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisMode {
    /// The ground truth, whatever the evidence says.
    GroundTruth,
    /// Only what the evidence block reports: boxes deduplicated, counts
    /// summed, the first option taken. Falls back to the ground truth when
    /// every ROI reported nothing.
    EchoEvidence,
}

/// Answers every stage from the ground truth of the sample named in the
/// request, in whatever frame the request shows.
pub struct OracleResponder {
    samples: HashMap<String, Sample>,
    convention: Convention,
    side: u32,
    suppression_iou: f64,
    mode: SynthesisMode,
}

static EVIDENCE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^ROI \d+ at \[[^\]]*\]: (.*)$").unwrap());
static COUNT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^count (\d+)$").unwrap());
static OPTION_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^option ([A-Z])$").unwrap());

impl OracleResponder {
    pub fn new(samples: &[Sample], cfg: &MapConfig, mode: SynthesisMode) -> Self {
        OracleResponder {
            samples: samples.iter().map(|s| (s.id.clone(), s.clone())).collect(),
            convention: cfg.convention,
            side: cfg.side,
            suppression_iou: cfg.suppression_iou,
            mode,
        }
    }

    /// Scripted backend driven by this oracle.
    pub fn backend(self) -> ScriptedBackend {
        ScriptedBackend::new().with_responder(self)
    }

    fn convention_for(&self, s: &Sample) -> Convention {
        s.coord_protocol.unwrap_or(self.convention)
    }

    fn frame(&self, s: &Sample, width: u32, height: u32) -> CoordFrame {
        CoordFrame {
            convention: self.convention_for(s),
            width,
            height,
        }
    }

    /// Boxes of the evidence the answer depends on, in pixels.
    fn evidence_boxes(s: &Sample) -> Vec<GeomBox> {
        let mut v = match &s.target {
            Target::Boxes(bs) => bs.clone(),
            Target::Mask(text) => mask_box(text, s).into_iter().collect(),
            _ => s.context.support.clone(),
        };
        if v.is_empty() {
            v = s.explicit_regions().iter().map(|r| r.to_box()).collect();
        }
        v
    }

    /// Evidence centers first, then a grid, keeping only anchors whose
    /// windows survive suppression, so discovery yields exactly `budget`
    /// windows whenever the image has room for them.
    fn discovery(&self, s: &Sample, budget: usize) -> String {
        let frame = self.frame(s, s.width, s.height);
        let half = f64::from(self.side / 2);
        let mut candidates: Vec<Point> = Self::evidence_boxes(s).iter().map(GeomBox::center).collect();
        let mut y = half;
        while y < f64::from(s.height) {
            let mut x = half;
            while x < f64::from(s.width) {
                candidates.push(Point::new(x, y));
                x += f64::from(self.side);
            }
            y += f64::from(self.side);
        }
        let mut kept: Vec<RoiWindow> = Vec::new();
        let mut points = Vec::new();
        for p in candidates {
            if kept.len() == budget {
                break;
            }
            let quantized = frame.from_abs(&[p.x, p.y]);
            let Ok(anchor) = frame.anchor_to_abs(Point::new(quantized[0], quantized[1])) else { continue };
            let Ok(w) = make_roi(anchor, self.side, s.width, s.height) else { continue };
            if kept.iter().all(|k| k.rect().iou(&w.rect()) <= self.suppression_iou) {
                kept.push(w);
                points.push(frame.render_point(p));
            }
        }
        format!("[{}]", points.join(", "))
    }

    /// Target as an answer in a frame of `width x height` reached from full
    /// pixels by `to_view`; `None` when nothing of it is in view. Counts
    /// cover the visible support unless the `whole` image is shown.
    fn answer(
        &self,
        s: &Sample,
        width: u32,
        height: u32,
        whole: bool,
        visible: impl Fn(&GeomBox) -> bool,
        to_view: impl Fn(&GeomBox) -> Option<GeomBox>,
    ) -> Option<String> {
        let frame = self.frame(s, width, height);
        match s.answer_format() {
            AnswerFormat::Boxes | AnswerFormat::Box | AnswerFormat::Mask => {
                let boxes: Vec<GeomBox> = Self::evidence_boxes(s)
                    .iter()
                    .filter(|b| visible(b))
                    .filter_map(&to_view)
                    .map(|b| frame.box_from_abs(&b))
                    .collect();
                (!boxes.is_empty()).then(|| render_boxes(&boxes))
            }
            AnswerFormat::Count => {
                let Target::Count(total) = s.target else { return None };
                let support = &s.context.support;
                let n = if whole || support.is_empty() {
                    total
                } else {
                    support.iter().filter(|b| visible(b)).count() as u64
                };
                Some(n.to_string())
            }
            AnswerFormat::Option => {
                let Target::Choice(c) = s.target else { return None };
                let support = &s.context.support;
                (support.is_empty() || support.iter().any(|b| visible(b))).then(|| c.to_string())
            }
        }
    }

    fn full_answer(&self, s: &Sample) -> String {
        self.answer(s, s.width, s.height, true, |_| true, |b| Some(b.clone()))
            .unwrap_or_else(|| "null".into())
    }

    fn window_answer(&self, s: &Sample, roi: &RoiWindow) -> String {
        let rect = roi.rect();
        let local = |b: &GeomBox| -> Option<GeomBox> {
            let shifted = b.map_coords(|v, is_y| {
                let (o, valid) = if is_y { (roi.y0, roi.valid_h) } else { (roi.x0, roi.valid_w) };
                (v - f64::from(o)).clamp(0.0, f64::from(valid))
            });
            shifted.validate().ok().map(|_| shifted)
        };
        self.answer(s, roi.side, roi.side, false, |b| rect.contains(b.center()), local)
            .unwrap_or_else(|| "null".into())
    }

    fn resized_answer(&self, s: &Sample, width: u32, height: u32) -> String {
        let (sx, sy) = (f64::from(width) / f64::from(s.width), f64::from(height) / f64::from(s.height));
        let scale = |b: &GeomBox| -> Option<GeomBox> {
            Some(b.map_coords(|v, is_y| if is_y { v * sy } else { v * sx }))
        };
        self.answer(s, width, height, true, |_| true, scale)
            .unwrap_or_else(|| "null".into())
    }

    fn echo(&self, s: &Sample, prompt: &str) -> String {
        let section = evidence_section(prompt);
        let contents: Vec<&str> = EVIDENCE_LINE
            .captures_iter(section)
            .filter_map(|c| c.get(1).map(|m| m.as_str()))
            .collect();
        let mut boxes: Vec<GeomBox> = Vec::new();
        let mut count = None::<u64>;
        let mut option = None::<String>;
        for c in &contents {
            if let Some(m) = COUNT_LINE.captures(c) {
                *count.get_or_insert(0) += m[1].parse::<u64>().unwrap_or(0);
            } else if let Some(m) = OPTION_LINE.captures(c) {
                option.get_or_insert_with(|| m[1].to_string());
            } else if let ParsedAnswer::Boxes(bs) = parse_boxes(c, BoxFamily::Either) {
                for b in bs {
                    if boxes.iter().all(|k| iou(k, &b).map_or(true, |v| v <= self.suppression_iou)) {
                        boxes.push(b);
                    }
                }
            }
        }
        let answer = match s.answer_format() {
            AnswerFormat::Count => count.map(|c| c.to_string()),
            AnswerFormat::Option => option,
            AnswerFormat::Box | AnswerFormat::Mask => boxes.first().map(|b| render_boxes(std::slice::from_ref(b))),
            AnswerFormat::Boxes => (!boxes.is_empty()).then(|| render_boxes(&boxes)),
        };
        answer.unwrap_or_else(|| self.full_answer(s))
    }
}

impl Responder for OracleResponder {
    fn respond(&self, request: &BackendRequest) -> Option<String> {
        let s = self.samples.get(&request.meta.sample_id)?;
        let reply = match (request.meta.stage, request.meta.view) {
            (Stage::Discovery, _) => self.discovery(s, request.meta.budget),
            (Stage::Synthesis, _) => {
                let body = match self.mode {
                    SynthesisMode::GroundTruth => self.full_answer(s),
                    SynthesisMode::EchoEvidence => self.echo(s, &request.prompt),
                };
                format!("Final answer: {body}")
            }
            (_, View::Window { roi }) => self.window_answer(s, &roi),
            (_, View::Resized { width, height }) => format!("Final answer: {}", self.resized_answer(s, width, height)),
            (_, View::Full) => format!("Final answer: {}", self.full_answer(s)),
        };
        Some(reply)
    }
}

/// Tight HBB of a mask target.
fn mask_box(text: &str, s: &Sample) -> Option<GeomBox> {
    let m = RleMask::decompress(text, s.height, s.width).ok()?;
    Some(m.pixel_bounds().ok()?.to_box())
}

/// Fails a deterministic fraction of requests, chosen by fingerprint, and
/// forwards the rest.
pub struct FlakyBackend<B> {
    inner: B,
    /// Failures per 10,000 requests.
    rate_per_10k: u64,
}

impl<B: ModelBackend> FlakyBackend<B> {
    pub fn new(inner: B, rate: f64) -> Self {
        FlakyBackend {
            inner,
            rate_per_10k: (rate.clamp(0.0, 1.0) * 10_000.0).round() as u64,
        }
    }

    pub fn fails(&self, request: &BackendRequest) -> bool {
        let digest = Sha256::digest(request.fingerprint().as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes")) % 10_000;
        bucket < self.rate_per_10k
    }
}

impl<B: ModelBackend> ModelBackend for FlakyBackend<B> {
    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError> {
        if self.fails(request) {
            return Err(BackendError::Injected(format!(
                "{} {} #{}",
                request.meta.sample_id, request.meta.stage, request.meta.index
            )));
        }
        self.inner.complete(request)
    }

    fn wants_pixels(&self) -> bool {
        self.inner.wants_pixels()
    }

    fn name(&self) -> String {
        format!("flaky({})", self.inner.name())
    }

    fn convention(&self) -> Option<Convention> {
        self.inner.convention()
    }
}
