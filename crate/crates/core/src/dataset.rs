//! Sample records, dataset files and image canvases.
//!
//! A dataset is a newline-delimited JSON file, one sample per line. Image
//! paths are relative to the dataset file's directory. Box targets and
//! regions are absolute pixels; masks are compressed RLE text.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::coords::{make_roi, CoordFrame, Convention, RoiWindow};
use crate::error::{Error, Result};
use crate::geometry::{BoxKind, GeomBox, Point, RectRegion, EPS};
use crate::mask::RleMask;
use crate::parse::BoxFamily;
use crate::task::{AnswerFormat, Task};

/// Ground-truth answer, typed by the task's answer format.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Boxes(Vec<GeomBox>),
    /// Compressed RLE text on the sample's canvas.
    Mask(String),
    Count(u64),
    Choice(char),
}

impl Target {
    fn to_value(&self) -> Value {
        match self {
            Target::Boxes(bs) => Value::Array(
                bs.iter()
                    .map(|b| serde_json::to_value(b).expect("box serializes"))
                    .collect(),
            ),
            Target::Mask(s) => Value::String(s.clone()),
            Target::Count(c) => Value::from(*c),
            Target::Choice(c) => Value::String(c.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerColor {
    Red,
    Blue,
}

impl MarkerColor {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            MarkerColor::Red => [255, 0, 0],
            MarkerColor::Blue => [0, 0, 255],
        }
    }
}

/// Colored outline drawn over the image before it is shown to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    #[serde(rename = "box")]
    pub bbox: GeomBox,
    pub color: MarkerColor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextObject {
    pub id: u32,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: GeomBox,
}

/// Scene facts carried alongside a sample: the evidence objects an oracle
/// would inspect, and the annotations used by error diagnosis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleContext {
    /// Boxes of the objects that determine the answer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub support: Vec<GeomBox>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<ContextObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_region: Option<RectRegion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub referring_ids: Vec<u32>,
}

impl SampleContext {
    fn is_empty(&self) -> bool {
        *self == SampleContext::default()
    }
}

/// One line of a dataset file, before validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    image: String,
    width: u32,
    height: u32,
    task: Task,
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<RectRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region2: Option<RectRegion>,
    answer_format: AnswerFormat,
    target: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coord_protocol: Option<Convention>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    markers: Vec<Marker>,
    #[serde(default, skip_serializing_if = "SampleContext::is_empty")]
    context: SampleContext,
}

/// A validated benchmark instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub task: Task,
    /// Query text; `{region}` and `{region2}` are filled in per coordinate
    /// convention when the prompt is built.
    pub query: String,
    pub region: Option<RectRegion>,
    pub region2: Option<RectRegion>,
    pub target: Target,
    /// Option texts, labelled `A`, `B`, ... in order.
    pub choices: Vec<String>,
    pub coord_protocol: Option<Convention>,
    pub markers: Vec<Marker>,
    pub context: SampleContext,
}

pub fn option_labels(n: usize) -> Vec<char> {
    (b'A'..=b'Z').take(n).map(char::from).collect()
}

fn inside_canvas(b: &GeomBox, width: u32, height: u32) -> bool {
    let r = b.bounds();
    r.x1 >= -EPS && r.y1 >= -EPS && r.x2 <= f64::from(width) + EPS && r.y2 <= f64::from(height) + EPS
}

impl Sample {
    pub fn answer_format(&self) -> AnswerFormat {
        self.task.answer_format()
    }

    pub fn labels(&self) -> Vec<char> {
        option_labels(self.choices.len())
    }

    pub fn target_boxes(&self) -> &[GeomBox] {
        match &self.target {
            Target::Boxes(bs) => bs,
            _ => &[],
        }
    }

    /// Box family the answer must use; masks are requested as HBB prompts.
    pub fn box_family(&self) -> BoxFamily {
        match self.target_boxes().first() {
            Some(b) => b.kind().into(),
            None => BoxFamily::Hbb,
        }
    }

    pub fn box_kind(&self) -> BoxKind {
        match self.box_family() {
            BoxFamily::Obb => BoxKind::Obb,
            _ => BoxKind::Hbb,
        }
    }

    /// Query with region placeholders rendered in `convention`.
    pub fn render_query(&self, convention: Convention) -> String {
        let frame = CoordFrame {
            convention,
            width: self.width,
            height: self.height,
        };
        let mut q = self.query.clone();
        if let Some(r) = &self.region {
            q = q.replace("{region}", &frame.render_box(&r.to_box()));
        }
        if let Some(r) = &self.region2 {
            q = q.replace("{region2}", &frame.render_box(&r.to_box()));
        }
        q
    }

    /// Regions the query names explicitly, in order.
    pub fn explicit_regions(&self) -> Vec<RectRegion> {
        self.region.iter().chain(self.region2.iter()).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGeometry(m));
        if self.id.trim().is_empty() {
            return bad("empty id".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dimensions must be positive".into());
        }
        for (name, region) in [("region", &self.region), ("region2", &self.region2)] {
            if let Some(r) = region {
                r.validate()?;
                if !inside_canvas(&r.to_box(), self.width, self.height) {
                    return bad(format!("{name} lies outside the {}x{} image", self.width, self.height));
                }
            }
        }
        if self.task.requires_region() && self.region.is_none() {
            return bad(format!("task {} requires a region", self.task));
        }
        if self.task.requires_second_region() && self.region2.is_none() {
            return bad(format!("task {} requires region2", self.task));
        }
        match (&self.target, self.task.answer_format()) {
            (Target::Boxes(bs), AnswerFormat::Boxes | AnswerFormat::Box) => {
                if bs.is_empty() {
                    return bad("box target is empty".into());
                }
                if self.task.answer_format() == AnswerFormat::Box && bs.len() != 1 {
                    return bad(format!("task {} takes exactly one box", self.task));
                }
                let kind = bs[0].kind();
                for b in bs {
                    b.validate()?;
                    if b.kind() != kind {
                        return bad("mixed HBB and OBB targets".into());
                    }
                    if !inside_canvas(b, self.width, self.height) {
                        return bad(format!("box {b} outside the {}x{} image", self.width, self.height));
                    }
                }
            }
            (Target::Mask(text), AnswerFormat::Mask) => {
                let m = RleMask::decompress(text, self.height, self.width)?;
                if m.area() == 0 {
                    return Err(Error::EmptyMask);
                }
            }
            (Target::Count(_), AnswerFormat::Count) => {}
            (Target::Choice(c), AnswerFormat::Option) => {
                if self.choices.len() < 2 {
                    return bad("option task needs at least two choices".into());
                }
                if !self.labels().contains(c) {
                    return bad(format!("answer {c} is not one of the choice labels"));
                }
            }
            (target, format) => {
                return bad(format!(
                    "target {target:?} does not match answer format {format:?} of task {}",
                    self.task
                ));
            }
        }
        for m in &self.markers {
            m.bbox.validate()?;
        }
        Ok(())
    }

    fn from_record(r: SampleRecord) -> std::result::Result<Self, String> {
        if r.answer_format != r.task.answer_format() {
            return Err(format!(
                "answer_format {:?} does not match task {} ({:?})",
                r.answer_format,
                r.task,
                r.task.answer_format()
            ));
        }
        let target = match r.answer_format {
            AnswerFormat::Boxes | AnswerFormat::Box => {
                let boxes: Vec<GeomBox> =
                    serde_json::from_value(r.target).map_err(|e| format!("box target: {e}"))?;
                Target::Boxes(boxes)
            }
            AnswerFormat::Mask => match r.target {
                Value::String(s) => Target::Mask(s),
                other => return Err(format!("mask target must be RLE text, got {other}")),
            },
            AnswerFormat::Count => match r.target.as_u64() {
                Some(c) => Target::Count(c),
                None => return Err(format!("count target must be a non-negative integer, got {}", r.target)),
            },
            AnswerFormat::Option => match r.target.as_str() {
                Some(s) if s.chars().count() == 1 => Target::Choice(s.chars().next().unwrap()),
                _ => return Err(format!("option target must be a single label, got {}", r.target)),
            },
        };
        let sample = Sample {
            id: r.id,
            image: r.image,
            width: r.width,
            height: r.height,
            task: r.task,
            query: r.query,
            region: r.region,
            region2: r.region2,
            target,
            choices: r.choices.unwrap_or_default(),
            coord_protocol: r.coord_protocol,
            markers: r.markers,
            context: r.context,
        };
        sample.validate().map_err(|e| e.to_string())?;
        Ok(sample)
    }

    fn to_record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            image: self.image.clone(),
            width: self.width,
            height: self.height,
            task: self.task,
            query: self.query.clone(),
            region: self.region,
            region2: self.region2,
            answer_format: self.task.answer_format(),
            target: self.target.to_value(),
            choices: (!self.choices.is_empty()).then(|| self.choices.clone()),
            coord_protocol: self.coord_protocol,
            markers: self.markers.clone(),
            context: self.context.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("sample serializes")
    }

    /// Parses and validates one record; `line` is 1-based for messages.
    pub fn from_json_line(text: &str, line: usize) -> Result<Self> {
        let record: SampleRecord =
            serde_json::from_str(text).map_err(|e| Error::Schema { line, message: e.to_string() })?;
        Sample::from_record(record).map_err(|message| Error::Schema { line, message })
    }
}

/// Reads and validates every record; the first violation aborts the load.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = Sample::from_json_line(&line, i + 1)?;
        if !ids.insert(sample.id.clone()) {
            return Err(Error::Schema {
                line: i + 1,
                message: format!("duplicate id {:?}", sample.id),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(w, "{}", s.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// 8-bit RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageCanvas {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageCanvas {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageCanvas({}x{})", self.width, self.height)
    }
}

impl ImageCanvas {
    pub fn new(width: u32, height: u32, fill: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&fill);
        }
        ImageCanvas { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::InvalidGeometry(format!(
                "raw buffer of {} bytes does not fit {width}x{height} RGB",
                data.len()
            )));
        }
        Ok(ImageCanvas { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Fills the pixels whose centers fall inside `b`, clipped to the canvas.
    pub fn fill_box(&mut self, b: &GeomBox, rgb: [u8; 3]) {
        let r = b.bounds().clip(f64::from(self.width), f64::from(self.height));
        let (x0, y0) = (r.x1.floor() as u32, r.y1.floor() as u32);
        let (x1, y1) = (r.x2.ceil() as u32, r.y2.ceil() as u32);
        let is_hbb = b.kind() == BoxKind::Hbb;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                let p = Point::new(f64::from(x) + 0.5, f64::from(y) + 0.5);
                let hit = if is_hbb { r.contains(p) && p.x < r.x2 && p.y < r.y2 } else { b.contains_point(p) };
                if hit {
                    self.put_pixel(x, y, rgb);
                }
            }
        }
    }

    /// Draws a rectangle outline `thickness` pixels wide just inside `r`.
    pub fn draw_outline(&mut self, r: &RectRegion, rgb: [u8; 3], thickness: u32) {
        let r = r.clip(f64::from(self.width), f64::from(self.height));
        let (x0, y0) = (r.x1.floor() as i64, r.y1.floor() as i64);
        let (x1, y1) = (r.x2.ceil() as i64 - 1, r.y2.ceil() as i64 - 1);
        let t = i64::from(thickness.max(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let edge = x - x0 < t || x1 - x < t || y - y0 < t || y1 - y < t;
                if edge && x >= 0 && y >= 0 && x < i64::from(self.width) && y < i64::from(self.height) {
                    self.put_pixel(x as u32, y as u32, rgb);
                }
            }
        }
    }

    /// `side x side` crop of the window's content, zero-padded right and
    /// bottom.
    pub fn crop(&self, w: &RoiWindow) -> ImageCanvas {
        let mut out = ImageCanvas::new(w.side, w.side, [0, 0, 0]);
        let row_bytes = w.valid_w.min(self.width.saturating_sub(w.x0)) as usize * 3;
        for dy in 0..w.valid_h.min(self.height.saturating_sub(w.y0)) {
            let src = self.offset(w.x0, w.y0 + dy);
            let dst = out.offset(0, dy);
            out.data[dst..dst + row_bytes].copy_from_slice(&self.data[src..src + row_bytes]);
        }
        out
    }

    /// Output size for a long-edge resize; never upscales.
    pub fn resized_dims(width: u32, height: u32, target: u32) -> (u32, u32) {
        let long = width.max(height);
        if target == 0 || target >= long {
            return (width, height);
        }
        let scale = f64::from(target) / f64::from(long);
        let short = |v: u32| ((f64::from(v) * scale).round() as u32).max(1);
        if width >= height {
            (target, short(height))
        } else {
            (short(width), target)
        }
    }

    /// Area-averaging downsample so the long edge equals `target`.
    pub fn resize_long_edge(&self, target: u32) -> ImageCanvas {
        let (ow, oh) = Self::resized_dims(self.width, self.height, target);
        if (ow, oh) == (self.width, self.height) {
            return self.clone();
        }
        let horizontal = area_weights(self.width, ow);
        let vertical = area_weights(self.height, oh);
        let mut tmp = vec![0f64; ow as usize * self.height as usize * 3];
        for y in 0..self.height as usize {
            for (ox, taps) in horizontal.iter().enumerate() {
                for &(sx, wgt) in taps {
                    let s = (y * self.width as usize + sx) * 3;
                    let d = (y * ow as usize + ox) * 3;
                    for c in 0..3 {
                        tmp[d + c] += wgt * f64::from(self.data[s + c]);
                    }
                }
            }
        }
        let mut out = ImageCanvas::new(ow, oh, [0, 0, 0]);
        for (oy, taps) in vertical.iter().enumerate() {
            for ox in 0..ow as usize {
                let mut acc = [0f64; 3];
                for &(sy, wgt) in taps {
                    let s = (sy * ow as usize + ox) * 3;
                    for c in 0..3 {
                        acc[c] += wgt * tmp[s + c];
                    }
                }
                let d = (oy * ow as usize + ox) * 3;
                for c in 0..3 {
                    out.data[d + c] = acc[c].round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer size checked at construction");
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: PathBuf::from("<memory>"),
            message: e.to_string(),
        })?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (width, height) = rgb.dimensions();
        Ok(ImageCanvas {
            width,
            height,
            data: rgb.into_raw(),
        })
    }
}

/// For each output index, the source indices and weights (summing to 1)
/// of its footprint `[o * n / m, (o + 1) * n / m)`.
fn area_weights(n: u32, m: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = f64::from(n) / f64::from(m);
    (0..m)
        .map(|o| {
            let lo = f64::from(o) * scale;
            let hi = f64::from(o + 1) * scale;
            let mut taps = Vec::new();
            let mut s = lo.floor() as u32;
            while f64::from(s) < hi && s < n {
                let cover = (hi.min(f64::from(s + 1)) - lo.max(f64::from(s))).max(0.0);
                if cover > 0.0 {
                    taps.push((s as usize, cover / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Row-major grid of `side`-pixel tiles with stride `side`; edge tiles are
/// clipped and padded.
pub fn sliding_tiles(width: u32, height: u32, side: u32) -> Vec<RoiWindow> {
    let side = side.max(1);
    let mut tiles = Vec::new();
    for y0 in (0..height).step_by(side as usize) {
        for x0 in (0..width).step_by(side as usize) {
            tiles.push(RoiWindow {
                x0,
                y0,
                side,
                valid_w: side.min(width - x0),
                valid_h: side.min(height - y0),
            });
        }
    }
    tiles
}

/// Window of `side` centered on the mean of the target centers.
pub fn oracle_crop(targets: &[GeomBox], side: u32, width: u32, height: u32) -> Result<RoiWindow> {
    if targets.is_empty() {
        return Err(Error::InvalidGeometry("oracle crop needs at least one target".into()));
    }
    let n = targets.len() as f64;
    let (sx, sy) = targets.iter().fold((0.0, 0.0), |(x, y), b| {
        let c = b.center();
        (x + c.x, y + c.y)
    });
    make_roi(Point::new(sx / n, sy / n), side, width, height)
}

/// Source of the pixels behind a sample.
pub trait ImageProvider: Send + Sync {
    /// The image as stored, without sample markers.
    fn base_image(&self, sample: &Sample) -> Result<Arc<ImageCanvas>>;

    /// The image the model sees: the stored image with the sample's
    /// markers drawn as 3-pixel outlines.
    fn image(&self, sample: &Sample) -> Result<Arc<ImageCanvas>> {
        let base = self.base_image(sample)?;
        if base.width() != sample.width || base.height() != sample.height {
            return Err(Error::Image {
                path: PathBuf::from(&sample.image),
                message: format!(
                    "image is {}x{}, record says {}x{}",
                    base.width(),
                    base.height(),
                    sample.width,
                    sample.height
                ),
            });
        }
        if sample.markers.is_empty() {
            return Ok(base);
        }
        let mut canvas = (*base).clone();
        for m in &sample.markers {
            canvas.draw_outline(&m.bbox.bounds(), m.color.rgb(), 3);
        }
        Ok(Arc::new(canvas))
    }
}

/// Decoded images behind a bounded FIFO cache.
pub struct FileImageStore {
    root: PathBuf,
    capacity: usize,
    cache: Mutex<VecDeque<(String, Arc<ImageCanvas>)>>,
}

impl FileImageStore {
    pub fn new(root: impl Into<PathBuf>, capacity: usize) -> Self {
        FileImageStore {
            root: root.into(),
            capacity: capacity.max(1),
            cache: Mutex::new(VecDeque::new()),
        }
    }

    /// Store rooted at the directory holding `dataset`.
    pub fn for_dataset(dataset: &Path, capacity: usize) -> Self {
        let root = dataset.parent().map(Path::to_path_buf).unwrap_or_default();
        FileImageStore::new(root, capacity)
    }
}

impl ImageProvider for FileImageStore {
    fn base_image(&self, sample: &Sample) -> Result<Arc<ImageCanvas>> {
        {
            let cache = self.cache.lock().expect("image cache poisoned");
            if let Some((_, img)) = cache.iter().find(|(k, _)| *k == sample.image) {
                return Ok(img.clone());
            }
        }
        let img = Arc::new(ImageCanvas::load(&self.root.join(&sample.image))?);
        let mut cache = self.cache.lock().expect("image cache poisoned");
        if !cache.iter().any(|(k, _)| *k == sample.image) {
            if cache.len() >= self.capacity {
                cache.pop_front();
            }
            cache.push_back((sample.image.clone(), img.clone()));
        }
        Ok(img)
    }
}

/// Blank canvases of the recorded size; for runs that never look at pixels.
pub struct BlankImages;

impl ImageProvider for BlankImages {
    fn base_image(&self, sample: &Sample) -> Result<Arc<ImageCanvas>> {
        Ok(Arc::new(ImageCanvas::new(sample.width, sample.height, [0, 0, 0])))
    }
}
