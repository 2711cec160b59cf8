//! Prompt construction for every stage.
//!
//! Coordinate wording follows the run's convention so the same pipeline
//! can be driven in 1000-base, unit-scale or absolute-pixel terms.

use crate::coords::Convention;
use crate::dataset::Sample;
use crate::geometry::BoxKind;
use crate::task::AnswerFormat;

pub const EVIDENCE_START: &str = "Evidence:";
pub const EVIDENCE_END: &str = "End of evidence.";
pub const FINAL_LINE: &str = "End your reply with a line that starts with \"Final answer:\".";

/// Frame that coordinates in a prompt refer to.
#[derive(Debug, Clone, Copy)]
pub enum Scope {
    /// The full image, shown at `width x height`.
    Image { width: u32, height: u32 },
    /// A square crop of `side` pixels.
    Crop { side: u32 },
}

pub fn coordinate_sentence(convention: Convention, scope: Scope) -> String {
    let (what, w, h) = match scope {
        Scope::Image { width, height } => ("the image", width, height),
        Scope::Crop { side } => ("this crop", side, side),
    };
    match convention {
        Convention::Thousand => format!(
            "Coordinates are on a 0-1000 grid over {what}: x = 0 is its left edge and x = 1000 its right edge, y = 0 its top edge and y = 1000 its bottom edge."
        ),
        Convention::Unit => format!(
            "Coordinates are fractions of {what}: x = 0.0 is its left edge and x = 1.0 its right edge, y = 0.0 its top edge and y = 1.0 its bottom edge."
        ),
        Convention::Abs => format!(
            "Coordinates are pixels of {what}, which is {w} pixels wide and {h} pixels tall; the origin is its top-left corner."
        ),
    }
}

fn box_syntax(kind: BoxKind) -> &'static str {
    match kind {
        BoxKind::Hbb => "[x1, y1, x2, y2] (top-left corner, then bottom-right corner)",
        BoxKind::Obb => "[x1, y1, x2, y2, x3, y3, x4, y4] (the four corners in order)",
    }
}

/// What a well-formed answer to the sample looks like.
pub fn answer_format_text(sample: &Sample) -> String {
    match sample.answer_format() {
        AnswerFormat::Boxes => format!(
            "a list of boxes, one per target, each written as {}",
            box_syntax(sample.box_kind())
        ),
        AnswerFormat::Box => format!("exactly one box written as {}", box_syntax(sample.box_kind())),
        AnswerFormat::Mask => format!(
            "one tight box around the target written as {}; it will seed a segmentation model",
            box_syntax(BoxKind::Hbb)
        ),
        AnswerFormat::Count => "a single integer written in digits".into(),
        AnswerFormat::Option => "only the letter of the chosen option".into(),
    }
}

fn choices_block(sample: &Sample) -> String {
    if sample.choices.is_empty() {
        return String::new();
    }
    let lines: Vec<String> = sample
        .labels()
        .iter()
        .zip(&sample.choices)
        .map(|(l, c)| format!("{l}. {c}"))
        .collect();
    format!("Options:\n{}\n", lines.join("\n"))
}

pub fn discovery_prompt(sample: &Sample, convention: Convention, budget: usize) -> String {
    format!(
        "You are shown a complete high-resolution image of {w}x{h} pixels. {coords}\n\
         Task: {query}\n{choices}\
         Do not solve the task. Point to the places most likely to hold the evidence it needs. \
         Reply with at most {budget} points as a list such as [[x1, y1], [x2, y2]]. \
         Give no boxes, masks, counts, option letters or commentary.",
        w = sample.width,
        h = sample.height,
        coords = coordinate_sentence(convention, Scope::Image { width: sample.width, height: sample.height }),
        query = sample.render_query(convention),
        choices = choices_block(sample),
    )
}

pub fn inspection_prompt(sample: &Sample, convention: Convention, side: u32) -> String {
    format!(
        "You are shown a {side}x{side} crop cut from a larger image. Judge only what is visible inside this crop. \
         {coords} Any region named in the task uses full-image coordinates, but your answer must use crop coordinates.\n\
         Task: {query}\n{choices}\
         Answer with {format}. If the target is not visible in this crop, reply with null.",
        coords = coordinate_sentence(convention, Scope::Crop { side }),
        query = sample.render_query(convention),
        choices = choices_block(sample),
        format = answer_format_text(sample),
    )
}

/// `evidence` holds one pre-rendered line per inspected ROI.
pub fn synthesis_prompt(sample: &Sample, convention: Convention, evidence: &[String]) -> String {
    let merge = if sample.answer_format() == AnswerFormat::Boxes {
        " Boxes that describe the same object seen from several crops must be merged into one."
    } else {
        ""
    };
    format!(
        "You are shown the full image with the inspected crops outlined on it. \
         The observations below were made inside those crops and are already converted to full-image coordinates. \
         {coords}\n\
         Task: {query}\n{choices}\
         {EVIDENCE_START}\n{lines}\n{EVIDENCE_END}\n\
         Give the final answer as {format}.{merge} \
         Do not add objects or regions that the evidence does not support. {FINAL_LINE}",
        coords = coordinate_sentence(convention, Scope::Image { width: sample.width, height: sample.height }),
        query = sample.render_query(convention),
        choices = choices_block(sample),
        lines = if evidence.is_empty() { "(none)".to_string() } else { evidence.join("\n") },
        format = answer_format_text(sample),
    )
}

/// Single-call prompt over the image or crop actually shown.
pub fn direct_prompt(sample: &Sample, convention: Convention, scope: Scope) -> String {
    let view = match scope {
        Scope::Image { width, height } if width == sample.width && height == sample.height => {
            "You are shown the full image.".to_string()
        }
        Scope::Image { width, height } => {
            format!("You are shown the full image downsampled to {width}x{height} pixels.")
        }
        Scope::Crop { side } => format!("You are shown a {side}x{side} crop of the image."),
    };
    format!(
        "{view} {coords}\nTask: {query}\n{choices}Give the answer as {format}. {FINAL_LINE}",
        coords = coordinate_sentence(convention, scope),
        query = sample.render_query(convention),
        choices = choices_block(sample),
        format = answer_format_text(sample),
    )
}

/// Text between the evidence markers of a synthesis prompt.
pub fn evidence_section(prompt: &str) -> &str {
    let start = prompt.find(EVIDENCE_START).map_or(0, |i| i + EVIDENCE_START.len());
    let end = prompt[start..].find(EVIDENCE_END).map_or(prompt.len(), |i| start + i);
    &prompt[start..end]
}
