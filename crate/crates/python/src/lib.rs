//! Python bindings for the scoring core: box and mask scores, matching,
//! the RLE codec, answer parsing and whole-sample scoring.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use microeval::dataset::Sample;
use microeval::geometry::{self, GeomBox};
use microeval::mask::{BinaryMask, RleMask};
use microeval::metrics::{self, Prediction};
use microeval::parse::{self, AnswerKind, BoxFamily};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn geom(coords: &[f64]) -> PyResult<GeomBox> {
    let b = GeomBox::from_coords(coords).map_err(err)?;
    b.validate().map_err(err)?;
    Ok(b)
}

fn boxes(list: &[Vec<f64>]) -> PyResult<Vec<GeomBox>> {
    list.iter().map(|c| geom(c)).collect()
}

/// Box score of `pred` against `gt`; 4 values for HBB, 8 for OBB.
#[pyfunction]
fn s_box(gt: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    metrics::s_box(&geom(&gt)?, &geom(&pred)?).map_err(err)
}

#[pyfunction]
fn box_iou(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    geometry::iou(&geom(&a)?, &geom(&b)?).map_err(err)
}

/// Mask score of two compressed RLE strings on a `height x width` canvas.
#[pyfunction]
fn s_mask(gt: &str, pred: &str, height: u32, width: u32) -> PyResult<f64> {
    let g = RleMask::decompress(gt, height, width).map_err(err)?;
    let p = RleMask::decompress(pred, height, width).map_err(err)?;
    metrics::s_mask(&g, &p).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (target, pred=None))]
fn counting_score(target: u64, pred: Option<u64>) -> f64 {
    metrics::counting_score(target, pred)
}

/// Greedy one-to-one matching: `{"pairs": [[gt, pred, score], ...], "t",
/// "fp", "fn", "soft_f1"}`.
#[pyfunction]
fn match_boxes<'py>(py: Python<'py>, gts: Vec<Vec<f64>>, preds: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    let m = metrics::greedy_match(&boxes(&gts)?, &boxes(&preds)?);
    let out = serde_json::json!({
        "pairs": m.pairs,
        "t": m.t,
        "fp": m.fp,
        "fn": m.fn_count,
        "soft_f1": metrics::soft_f1(&m),
    });
    to_py(py, &out)
}

/// Compressed RLE of a row-major boolean mask.
#[pyfunction]
fn rle_encode(rows: Vec<Vec<bool>>) -> PyResult<String> {
    let m = BinaryMask::from_rows(&rows).map_err(err)?;
    Ok(RleMask::encode(&m).compress())
}

#[pyfunction]
fn rle_decode(text: &str, height: u32, width: u32) -> PyResult<Vec<Vec<bool>>> {
    Ok(RleMask::decompress(text, height, width).map_err(err)?.decode().rows())
}

#[pyfunction]
fn rle_counts(text: &str, height: u32, width: u32) -> PyResult<Vec<u32>> {
    Ok(RleMask::decompress(text, height, width).map_err(err)?.counts().to_vec())
}

fn answer_kind(kind: &str) -> PyResult<AnswerKind> {
    Ok(match kind {
        "boxes" => AnswerKind::Boxes(BoxFamily::Either),
        "hbb" => AnswerKind::Boxes(BoxFamily::Hbb),
        "obb" => AnswerKind::Boxes(BoxFamily::Obb),
        "count" => AnswerKind::Count,
        other => match other.strip_prefix("option:") {
            Some(labels) if !labels.is_empty() => AnswerKind::Choice(labels.chars().collect()),
            _ => {
                return Err(PyValueError::new_err(format!(
                    "unknown answer kind {other:?}; use boxes, hbb, obb, count or option:ABCD"
                )))
            }
        },
    })
}

/// Parses a model reply. `kind` is boxes, hbb, obb, count or option:LABELS.
#[pyfunction]
#[pyo3(signature = (text, kind, local=false))]
fn parse_answer<'py>(py: Python<'py>, text: &str, kind: &str, local: bool) -> PyResult<Bound<'py, PyAny>> {
    let k = answer_kind(kind)?;
    let parsed = if local {
        parse::parse_local_answer(text, &k)
    } else {
        parse::parse_final(text, &k)
    };
    to_py(py, &parsed)
}

/// Scores a prediction (JSON, as stored in run records) against a sample
/// (one dataset line) and returns the score record.
#[pyfunction]
fn score_sample<'py>(py: Python<'py>, sample_json: &str, prediction_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let sample = Sample::from_json_line(sample_json, 1).map_err(err)?;
    let pred: Prediction = serde_json::from_str(prediction_json).map_err(err)?;
    to_py(py, &metrics::score_prediction(&sample, &pred))
}

#[pymodule]
#[pyo3(name = "microeval")]
fn microeval_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(s_box, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(s_mask, m)?)?;
    m.add_function(wrap_pyfunction!(counting_score, m)?)?;
    m.add_function(wrap_pyfunction!(match_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_counts, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(score_sample, m)?)?;
    Ok(())
}
