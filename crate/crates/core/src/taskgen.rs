//! Seeded synthetic scenes and the programmatic rules that turn them into
//! samples with exact ground truth.
//!
//! A scene is a list of colored rectangles (axis-aligned or rotated) on a
//! blocky background, a few named zones and one planted arrangement
//! pattern. Generation is a pure function of parameters and seed.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    option_labels, save_dataset, ContextObject, ImageCanvas, ImageProvider, Marker, MarkerColor, Sample,
    SampleContext, Target,
};
use crate::error::{Error, Result};
use crate::geometry::{contains_center, GeomBox, Point, RectRegion};
use crate::mask::box_fill_mask;
use crate::task::Task;

/// Placement attempts per object before generation gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const DEFAULT_DIRECTION_MARGIN_DEG: f64 = 10.0;
pub const DEFAULT_DISTANCE_RATIO: f64 = 1.3;

/// Family, category and its subcategories.
pub const TAXONOMY: &[(&str, &str, [&str; 4])] = &[
    ("vehicle", "car", ["sedan", "hatchback", "suv", "pickup"]),
    ("vehicle", "truck", ["box truck", "dump truck", "tanker truck", "flatbed truck"]),
    ("vehicle", "bus", ["city bus", "coach", "minibus", "school bus"]),
    ("vessel", "ship", ["cargo ship", "oil tanker", "container ship", "ferry"]),
    ("vessel", "boat", ["motorboat", "sailboat", "tugboat", "fishing boat"]),
    ("aircraft", "airplane", ["airliner", "cargo plane", "fighter jet", "light aircraft"]),
    ("aircraft", "helicopter", ["utility helicopter", "attack helicopter", "transport helicopter", "rescue helicopter"]),
    ("structure", "storage tank", ["fixed-roof tank", "floating-roof tank", "spherical tank", "silo"]),
    ("structure", "container", ["dry container", "reefer container", "tank container", "open-top container"]),
];

pub const COLORS: &[(&str, [u8; 3])] = &[
    ("red", [200, 40, 40]),
    ("blue", [40, 70, 200]),
    ("green", [40, 160, 60]),
    ("white", [235, 235, 235]),
    ("yellow", [220, 200, 40]),
    ("black", [25, 25, 25]),
];

pub const ZONE_NAMES: &[&str] = &[
    "harbor",
    "parking lot",
    "airfield",
    "industrial yard",
    "residential block",
    "farmland",
];

/// Eight compass labels, clockwise from north; bearings are measured
/// clockwise from image-up.
pub const COMPASS: [&str; 8] = [
    "north",
    "north-east",
    "east",
    "south-east",
    "south",
    "south-west",
    "west",
    "north-west",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Cluster,
    Row,
    Grid,
    Scattered,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Cluster, Pattern::Row, Pattern::Grid, Pattern::Scattered];

    pub fn description(self) -> &'static str {
        match self {
            Pattern::Cluster => "clustered in one area",
            Pattern::Row => "evenly spaced along a line",
            Pattern::Grid => "arranged in a regular grid",
            Pattern::Scattered => "scattered across the image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: u32,
    pub height: u32,
    /// Objects placed at random, on top of the pattern group.
    pub objects: usize,
    pub min_separation: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Probability that a scene uses rotated boxes throughout.
    pub obb_fraction: f64,
    pub zones: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 4096,
            height: 3072,
            objects: 48,
            min_separation: 48.0,
            min_size: 20.0,
            max_size: 40.0,
            obb_fraction: 0.25,
            zones: 3,
        }
    }
}

impl SceneParams {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Generation(m.into()));
        if self.width < 256 || self.height < 256 {
            return bad("canvas must be at least 256x256");
        }
        if self.objects == 0 {
            return bad("at least one object is required");
        }
        if !(self.min_size > 0.0 && self.max_size >= self.min_size) {
            return bad("object sizes must satisfy 0 < min_size <= max_size");
        }
        if self.max_size * 4.0 > f64::from(self.width.min(self.height)) {
            return bad("objects too large for the canvas");
        }
        if self.zones > ZONE_NAMES.len() || self.zones > 6 {
            return bad("at most six zones");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub category: String,
    pub subcategory: String,
    pub color: String,
    #[serde(rename = "box")]
    pub bbox: GeomBox,
}

impl SceneObject {
    fn center(&self) -> Point {
        self.bbox.center()
    }

    fn describe(&self) -> String {
        format!("{} {}", self.color, self.subcategory)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub rect: RectRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    /// Position of the scene in the generation sequence.
    pub index: u64,
    pub objects: Vec<SceneObject>,
    pub zones: Vec<Zone>,
    pub pattern: Pattern,
    pub pattern_category: String,
    pub texture_seed: u64,
}

impl Scene {
    pub fn image_name(&self) -> String {
        format!("images/scene-{:05}.png", self.index)
    }

    fn in_region<'a>(&'a self, r: &'a RectRegion) -> impl Iterator<Item = &'a SceneObject> + 'a {
        self.objects.iter().filter(move |o| contains_center(r, &o.bbox))
    }

    fn of_category<'a>(&'a self, c: &'a str) -> impl Iterator<Item = &'a SceneObject> + 'a {
        self.objects.iter().filter(move |o| o.category == c)
    }

    fn categories(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.category.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Objects whose color and subcategory no other object shares.
    fn uniquely_described(&self) -> Vec<&SceneObject> {
        let mut n: HashMap<String, usize> = HashMap::new();
        for o in &self.objects {
            *n.entry(o.describe()).or_default() += 1;
        }
        self.objects.iter().filter(|o| n[&o.describe()] == 1).collect()
    }

    fn context_objects(&self) -> Vec<ContextObject> {
        self.objects
            .iter()
            .map(|o| ContextObject {
                id: o.id,
                category: o.category.clone(),
                bbox: o.bbox.clone(),
            })
            .collect()
    }

    /// Renders the scene: blocky background, tinted zones, filled objects.
    pub fn render(&self) -> ImageCanvas {
        const BLOCK: u32 = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let (bw, bh) = (self.width.div_ceil(BLOCK), self.height.div_ceil(BLOCK));
        let noise: Vec<i16> = (0..bw * bh).map(|_| rng.random_range(-12..=12)).collect();
        let mut data = vec![0u8; self.width as usize * self.height as usize * 3];
        for y in 0..self.height {
            let tint = |x: u32| -> [i16; 3] {
                let p = Point::new(f64::from(x) + 0.5, f64::from(y) + 0.5);
                match self.zones.iter().position(|z| z.rect.contains(p)) {
                    Some(i) => [[-10, 12, -6], [14, 4, -12], [-6, -6, 14], [10, -10, 10], [0, 14, 0], [12, 12, -14]][i % 6],
                    None => [0, 0, 0],
                }
            };
            for x in 0..self.width {
                let n = noise[((y / BLOCK) * bw + x / BLOCK) as usize];
                let t = tint(x);
                let base = [112i16, 106, 96];
                let o = (y as usize * self.width as usize + x as usize) * 3;
                for c in 0..3 {
                    data[o + c] = (base[c] + n + t[c]).clamp(0, 255) as u8;
                }
            }
        }
        let mut canvas = ImageCanvas::from_raw(self.width, self.height, data).expect("buffer sized to canvas");
        for o in &self.objects {
            canvas.fill_box(&o.bbox, color_rgb(&o.color));
        }
        canvas
    }
}

fn color_rgb(name: &str) -> [u8; 3] {
    COLORS.iter().find(|(n, _)| *n == name).map_or([128, 128, 128], |(_, c)| *c)
}

fn family_of(category: &str) -> &'static str {
    TAXONOMY.iter().find(|(_, c, _)| *c == category).map_or("", |(f, _, _)| f)
}

fn subcategories(category: &str) -> &'static [&'static str] {
    TAXONOMY.iter().find(|(_, c, _)| *c == category).map_or(&[], |(_, _, s)| s)
}

struct Placer<'a> {
    params: &'a SceneParams,
    obb: bool,
    placed: Vec<GeomBox>,
}

impl Placer<'_> {
    /// Box of random size and (for rotated scenes) angle centred on `c`,
    /// or `None` if it leaves the canvas or crowds a placed object.
    fn try_at(&self, rng: &mut ChaCha8Rng, c: Point, min_sep: f64) -> Option<GeomBox> {
        let p = self.params;
        let w = rng.random_range(p.min_size..=p.max_size).round();
        let h = (w * rng.random_range(0.6..=1.6)).round().clamp(p.min_size, p.max_size * 1.5);
        let b = if self.obb {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (s, co) = theta.sin_cos();
            let corner = |dx: f64, dy: f64| {
                let x = c.x + dx * co - dy * s;
                let y = c.y + dx * s + dy * co;
                ((x * 100.0).round() / 100.0, (y * 100.0).round() / 100.0)
            };
            let (hw, hh) = (w / 2.0, h / 2.0);
            GeomBox::obb([corner(-hw, -hh), corner(hw, -hh), corner(hw, hh), corner(-hw, hh)])
        } else {
            let x1 = (c.x - w / 2.0).round();
            let y1 = (c.y - h / 2.0).round();
            GeomBox::hbb(x1, y1, x1 + w, y1 + h)
        };
        let r = b.bounds();
        let margin = 2.0;
        if r.x1 < margin
            || r.y1 < margin
            || r.x2 > f64::from(p.width) - margin
            || r.y2 > f64::from(p.height) - margin
        {
            return None;
        }
        let bc = b.center();
        if self.placed.iter().any(|o| o.center().distance(bc) < min_sep) {
            return None;
        }
        Some(b)
    }

    fn place(&mut self, rng: &mut ChaCha8Rng, mut center: impl FnMut(&mut ChaCha8Rng) -> Point, min_sep: f64) -> Result<GeomBox> {
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let c = center(rng);
            if let Some(b) = self.try_at(rng, c, min_sep) {
                self.placed.push(b.clone());
                return Ok(b);
            }
        }
        Err(Error::Generation(format!(
            "could not place object {} after {MAX_PLACEMENT_ATTEMPTS} attempts; lower the density",
            self.placed.len() + 1
        )))
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Point {
    Point::new(rng.random_range(0.0..f64::from(w)), rng.random_range(0.0..f64::from(h)))
}

fn make_zones(rng: &mut ChaCha8Rng, p: &SceneParams) -> Vec<Zone> {
    let (cw, ch) = (f64::from(p.width) / 3.0, f64::from(p.height) / 2.0);
    let mut cells: Vec<(f64, f64)> = (0..6).map(|i| (f64::from(i % 3) * cw, f64::from(i / 3) * ch)).collect();
    cells.shuffle(rng);
    let mut names: Vec<&str> = ZONE_NAMES.to_vec();
    names.shuffle(rng);
    cells
        .iter()
        .take(p.zones)
        .zip(names)
        .map(|(&(x, y), name)| {
            let w = (cw * rng.random_range(0.5..0.9)).round();
            let h = (ch * rng.random_range(0.5..0.9)).round();
            let x1 = (x + rng.random_range(0.0..cw - w)).round();
            let y1 = (y + rng.random_range(0.0..ch - h)).round();
            Zone {
                name: name.to_string(),
                rect: RectRegion::new(x1, y1, x1 + w, y1 + h),
            }
        })
        .collect()
}

/// Centers for the planted pattern group.
fn pattern_centers(rng: &mut ChaCha8Rng, p: &SceneParams, pattern: Pattern) -> Vec<Point> {
    let (w, h) = (f64::from(p.width), f64::from(p.height));
    let step = (p.max_size * 4.0).max(p.min_separation * 1.5);
    match pattern {
        Pattern::Row => {
            let n = rng.random_range(5..=7);
            let angle = [0.0f64, 90.0, 45.0, -45.0].choose(rng).copied().unwrap_or(0.0).to_radians();
            let (dx, dy) = (angle.cos() * step, angle.sin() * step);
            let span_x = dx.abs() * f64::from(n - 1);
            let span_y = dy.abs() * f64::from(n - 1);
            let pad = p.max_size * 2.0;
            let x0 = rng.random_range(pad..(w - span_x - pad).max(pad + 1.0)) + if dx < 0.0 { span_x } else { 0.0 };
            let y0 = rng.random_range(pad..(h - span_y - pad).max(pad + 1.0)) + if dy < 0.0 { span_y } else { 0.0 };
            (0..n).map(|i| Point::new(x0 + dx * f64::from(i), y0 + dy * f64::from(i))).collect()
        }
        Pattern::Grid => {
            let pad = p.max_size * 2.0;
            let x0 = rng.random_range(pad..(w - 2.0 * step - pad));
            let y0 = rng.random_range(pad..(h - 2.0 * step - pad));
            (0..9)
                .map(|i| Point::new(x0 + f64::from(i % 3) * step, y0 + f64::from(i / 3) * step))
                .collect()
        }
        Pattern::Cluster | Pattern::Scattered => Vec::new(),
    }
}

/// Generates one scene; `index` selects an independent stream of `seed`.
pub fn generate_scene(params: &SceneParams, seed: u64, index: u64) -> Result<Scene> {
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let obb = rng.random_bool(params.obb_fraction.clamp(0.0, 1.0));
    let zones = make_zones(&mut rng, params);
    let pattern = *Pattern::ALL.choose(&mut rng).expect("non-empty");
    let (_, pattern_category, pattern_subs) = *TAXONOMY.choose(&mut rng).expect("non-empty");
    let mut placer = Placer {
        params,
        obb,
        placed: Vec::new(),
    };
    let mut objects = Vec::new();
    let mut push = |rng: &mut ChaCha8Rng, b: GeomBox, category: &str, subs: &[&str]| {
        objects.push(SceneObject {
            id: objects.len() as u32 + 1,
            category: category.to_string(),
            subcategory: subs.choose(rng).expect("non-empty").to_string(),
            color: COLORS.choose(rng).expect("non-empty").0.to_string(),
            bbox: b,
        });
    };

    let (w, h) = (params.width, params.height);
    match pattern {
        Pattern::Row | Pattern::Grid => {
            for c in pattern_centers(&mut rng, params, pattern) {
                let b = placer.place(&mut rng, |_| c, params.min_separation)?;
                push(&mut rng, b, pattern_category, &pattern_subs);
            }
        }
        Pattern::Cluster => {
            let radius = params.max_size * 6.0;
            let pad = radius + params.max_size;
            let center = Point::new(
                rng.random_range(pad..f64::from(w) - pad),
                rng.random_range(pad..f64::from(h) - pad),
            );
            for _ in 0..rng.random_range(6..=8) {
                let b = placer.place(
                    &mut rng,
                    |r| {
                        let a = r.random_range(0.0..std::f64::consts::TAU);
                        let d = radius * r.random_range(0.0f64..1.0).sqrt();
                        Point::new(center.x + d * a.cos(), center.y + d * a.sin())
                    },
                    params.min_separation,
                )?;
                push(&mut rng, b, pattern_category, &pattern_subs);
            }
        }
        Pattern::Scattered => {
            let sep = f64::from(w.min(h)) / 5.0;
            for _ in 0..rng.random_range(5..=7) {
                let b = placer.place(&mut rng, |r| uniform_point(r, w, h), sep)?;
                push(&mut rng, b, pattern_category, &pattern_subs);
            }
        }
    }

    let others: Vec<&(&str, &str, [&str; 4])> = TAXONOMY.iter().filter(|t| t.1 != pattern_category).collect();
    for _ in 0..params.objects {
        let (_, category, subs) = **others.choose(&mut rng).expect("taxonomy has several categories");
        let in_zone = !zones.is_empty() && rng.random_bool(0.4);
        let zone = zones.choose(&mut rng).map(|z| z.rect);
        let b = placer.place(
            &mut rng,
            |r| match (in_zone, zone) {
                (true, Some(z)) => Point::new(r.random_range(z.x1..z.x2), r.random_range(z.y1..z.y2)),
                _ => uniform_point(r, w, h),
            },
            params.min_separation,
        )?;
        push(&mut rng, b, category, &subs);
    }
    Ok(Scene {
        width: w,
        height: h,
        index,
        objects,
        zones,
        pattern,
        pattern_category: pattern_category.to_string(),
        texture_seed: rng.random(),
    })
}

/// Bearing of `to` seen from `from`, degrees clockwise from image-up.
pub fn bearing(from: Point, to: Point) -> f64 {
    let deg = (to.x - from.x).atan2(from.y - to.y).to_degrees();
    (deg + 360.0) % 360.0
}

/// Compass sector of a bearing, or `None` when it lies closer than
/// `margin` degrees to a sector boundary.
pub fn compass_sector(bearing: f64, margin: f64) -> Option<usize> {
    let k = (bearing / 45.0).round();
    let off = (bearing - k * 45.0).abs();
    if 22.5 - off < margin {
        return None;
    }
    Some(k as usize % 8)
}

/// Index of the nearest (or farthest) distance, or `None` when the runner-up
/// is within `ratio` of it. The ratio bound is inclusive.
pub fn distance_answer(distances: &[f64], nearest: bool, ratio: f64) -> Option<usize> {
    if distances.len() < 2 || distances.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return None;
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    if !nearest {
        order.reverse();
    }
    let (best, second) = (distances[order[0]], distances[order[1]]);
    let r = if nearest { second / best } else { best / second };
    (r >= ratio).then_some(order[0])
}

/// Four shuffled options holding `correct` and three distractors, drawn
/// from `siblings` first and `others` after. `None` when fewer than three
/// distinct distractors exist.
pub fn classification_options(
    correct: &str,
    siblings: &[&str],
    others: &[&str],
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<String>, char)> {
    let mut sib: Vec<&str> = siblings.iter().copied().filter(|s| *s != correct).collect();
    sib.sort_unstable();
    sib.dedup();
    sib.shuffle(rng);
    let mut rest: Vec<&str> = others
        .iter()
        .copied()
        .filter(|s| *s != correct && !sib.contains(s))
        .collect();
    rest.sort_unstable();
    rest.dedup();
    rest.shuffle(rng);
    let distractors: Vec<&str> = sib.into_iter().chain(rest).take(3).collect();
    if distractors.len() < 3 {
        return None;
    }
    let mut options: Vec<String> = distractors.iter().map(|s| s.to_string()).collect();
    options.push(correct.to_string());
    options.shuffle(rng);
    let idx = options.iter().position(|o| o == correct).expect("correct option present");
    let label = option_labels(options.len())[idx];
    Some((options, label))
}

/// Integer-cornered region of random size holding `p`, inside the canvas.
fn region_around(rng: &mut ChaCha8Rng, p: Point, w: u32, h: u32) -> RectRegion {
    let rw = f64::from(rng.random_range(600..=1400u32).min(w));
    let rh = f64::from(rng.random_range(600..=1400u32).min(h));
    let axis = |r: &mut ChaCha8Rng, c: f64, len: f64, extent: f64| -> f64 {
        let lo = (c - len + 1.0).ceil().max(0.0);
        let hi = (c - 1.0).floor().min(extent - len).max(lo);
        r.random_range(lo..=hi).round()
    };
    let x1 = axis(rng, p.x, rw, f64::from(w));
    let y1 = axis(rng, p.y, rh, f64::from(h));
    RectRegion::new(x1, y1, x1 + rw, y1 + rh)
}

fn boxes_of<'a>(objs: impl Iterator<Item = &'a SceneObject>) -> Vec<GeomBox> {
    objs.map(|o| o.bbox.clone()).collect()
}

/// Derives samples of every task from scenes.
struct Deriver<'a> {
    scene: &'a Scene,
    per_scene: usize,
}

impl Deriver<'_> {
    fn base(&self, task: Task, k: usize, query: String, target: Target) -> Sample {
        Sample {
            id: format!("{}-{:05}-{}", task.code(), self.scene.index, k),
            image: self.scene.image_name(),
            width: self.scene.width,
            height: self.scene.height,
            task,
            query,
            region: None,
            region2: None,
            target,
            choices: Vec::new(),
            coord_protocol: None,
            markers: Vec::new(),
            context: SampleContext::default(),
        }
    }

    fn derive(&self, task: Task, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut out = Vec::new();
        let mut tried = 0;
        while out.len() < self.per_scene && tried < self.per_scene * 8 {
            tried += 1;
            if let Some(s) = self.one(task, out.len(), rng) {
                if !out.iter().any(|o: &Sample| o.query == s.query && o.region == s.region && o.markers == s.markers) {
                    out.push(s);
                }
            }
        }
        out
    }

    fn one(&self, task: Task, k: usize, rng: &mut ChaCha8Rng) -> Option<Sample> {
        let sc = self.scene;
        let (w, h) = (sc.width, sc.height);
        match task {
            Task::GD => {
                let c = sc.categories().choose(rng)?.clone();
                let t = boxes_of(sc.of_category(&c));
                let mut s = self.base(task, k, format!("Detect every {c} in the image."), Target::Boxes(t.clone()));
                s.context.support = t;
                Some(s)
            }
            Task::RD | Task::RC => {
                let anchor = sc.objects.choose(rng)?;
                let c = anchor.category.clone();
                let region = region_around(rng, anchor.center(), w, h);
                let t = boxes_of(sc.of_category(&c).filter(|o| contains_center(&region, &o.bbox)));
                if t.is_empty() {
                    return None;
                }
                let mut s = if task == Task::RD {
                    self.base(task, k, format!("Detect every {c} inside the region {{region}}."), Target::Boxes(t.clone()))
                } else {
                    self.base(
                        task,
                        k,
                        format!("How many {c} objects have their center inside the region {{region}}?"),
                        Target::Count(t.len() as u64),
                    )
                };
                s.region = Some(region);
                s.context.support = t;
                Some(s)
            }
            Task::BG => {
                let o = *sc.uniquely_described().choose(rng)?;
                let mut s = self.base(task, k, format!("Locate the {}.", o.describe()), Target::Boxes(vec![o.bbox.clone()]));
                self.grounding_context(&mut s, o, None);
                Some(s)
            }
            Task::CG => {
                let zone = sc.zones.choose(rng)?;
                let inside: Vec<&SceneObject> = sc.in_region(&zone.rect).collect();
                let unique: Vec<&&SceneObject> = inside
                    .iter()
                    .filter(|o| inside.iter().filter(|p| p.color == o.color && p.category == o.category).count() == 1)
                    .collect();
                let o = **unique.choose(rng)?;
                let mut s = self.base(
                    task,
                    k,
                    format!("Locate the {} {} in the {}.", o.color, o.category, zone.name),
                    Target::Boxes(vec![o.bbox.clone()]),
                );
                self.grounding_context(&mut s, o, Some(zone.rect));
                Some(s)
            }
            Task::MCR => {
                let zone = sc.zones.choose(rng)?;
                let o = *sc.in_region(&zone.rect).collect::<Vec<_>>().choose(rng)?;
                let t = boxes_of(
                    sc.in_region(&zone.rect)
                        .filter(|p| p.color == o.color && p.category == o.category),
                );
                let mut s = self.base(
                    task,
                    k,
                    format!("Find every {} {} located in the {}.", o.color, o.category, zone.name),
                    Target::Boxes(t.clone()),
                );
                s.context.support = t;
                Some(s)
            }
            Task::OC => {
                let o = sc.objects.choose(rng)?;
                let siblings: Vec<&str> = TAXONOMY
                    .iter()
                    .filter(|t| t.0 == family_of(&o.category))
                    .map(|t| t.1)
                    .collect();
                let others: Vec<&str> = TAXONOMY.iter().map(|t| t.1).collect();
                let (choices, y) = classification_options(&o.category, &siblings, &others, rng)?;
                Some(self.marked_choice(task, k, "What kind of object is outlined in red?".into(), choices, y, o))
            }
            Task::FGR => {
                let o = sc.objects.choose(rng)?;
                let subs = subcategories(&o.category);
                let others: Vec<&str> = TAXONOMY.iter().flat_map(|t| t.2).collect();
                let (choices, y) = classification_options(&o.subcategory, subs, &others, rng)?;
                Some(self.marked_choice(
                    task,
                    k,
                    format!("Which specific type of {} is outlined in red?", o.category),
                    choices,
                    y,
                    o,
                ))
            }
            Task::RS | Task::CS => {
                let o = *sc.uniquely_described().choose(rng)?;
                let r = o.bbox.bounds();
                let (rect, query) = if task == Task::RS {
                    (r, format!("Segment the {}.", o.describe()))
                } else {
                    let (mx, my) = ((r.x1 + r.x2) / 2.0, (r.y1 + r.y2) / 2.0);
                    let parts = [
                        ("left", RectRegion::new(r.x1, r.y1, mx, r.y2)),
                        ("right", RectRegion::new(mx, r.y1, r.x2, r.y2)),
                        ("top", RectRegion::new(r.x1, r.y1, r.x2, my)),
                        ("bottom", RectRegion::new(r.x1, my, r.x2, r.y2)),
                    ];
                    let (part, rect) = *parts.choose(rng)?;
                    (rect, format!("Segment the {part} half of the {}.", o.describe()))
                };
                let mask = box_fill_mask(&rect.to_box(), h, w).ok()?;
                let mut s = self.base(task, k, query, Target::Mask(mask.compress()));
                s.context.support = vec![rect.to_box()];
                Some(s)
            }
            Task::GC => {
                let c = sc.categories().choose(rng)?.clone();
                let t = boxes_of(sc.of_category(&c));
                let mut s = self.base(task, k, format!("How many {c} objects are in the image?"), Target::Count(t.len() as u64));
                s.context.support = t;
                Some(s)
            }
            Task::CC => {
                let o = sc.objects.choose(rng)?;
                let t = boxes_of(sc.objects.iter().filter(|p| p.color == o.color && p.category == o.category));
                let mut s = self.base(
                    task,
                    k,
                    format!("How many {} {} objects are in the image?", o.color, o.category),
                    Target::Count(t.len() as u64),
                );
                s.context.support = t;
                Some(s)
            }
            Task::CRC => {
                let a = sc.objects.choose(rng)?;
                let c = a.category.clone();
                let ra = region_around(rng, a.center(), w, h);
                let b = sc.of_category(&c).filter(|o| !contains_center(&ra, &o.bbox)).collect::<Vec<_>>();
                let b = *b.choose(rng)?;
                let rb = region_around(rng, b.center(), w, h);
                if ra.intersection_area(&rb) > 0.0 {
                    return None;
                }
                let in_a = boxes_of(sc.of_category(&c).filter(|o| contains_center(&ra, &o.bbox)));
                let in_b = boxes_of(sc.of_category(&c).filter(|o| contains_center(&rb, &o.bbox)));
                let diff = (in_a.len() as i64 - in_b.len() as i64).unsigned_abs();
                let mut s = self.base(
                    task,
                    k,
                    format!(
                        "Region A is {{region}} and region B is {{region2}}. What is the absolute difference between the number of {c} objects centered in region A and in region B?"
                    ),
                    Target::Count(diff),
                );
                s.region = Some(ra);
                s.region2 = Some(rb);
                s.context.support = in_a.into_iter().chain(in_b).collect();
                Some(s)
            }
            Task::DrR => {
                let a = sc.objects.choose(rng)?;
                let b = sc.objects.choose(rng)?;
                if a.id == b.id || a.center().distance(b.center()) < 100.0 {
                    return None;
                }
                let sector = compass_sector(bearing(a.center(), b.center()), DEFAULT_DIRECTION_MARGIN_DEG)?;
                let mut s = self.base(
                    task,
                    k,
                    "Seen from the object outlined in red, in which direction is the object outlined in blue?".into(),
                    Target::Choice(option_labels(8)[sector]),
                );
                s.choices = COMPASS.iter().map(|c| c.to_string()).collect();
                s.markers = vec![marker(a, MarkerColor::Red), marker(b, MarkerColor::Blue)];
                s.context.support = vec![a.bbox.clone(), b.bbox.clone()];
                Some(s)
            }
            Task::DsR => {
                let reference = sc.objects.choose(rng)?;
                let pool: Vec<&SceneObject> = sc.objects.iter().filter(|o| o.id != reference.id).collect();
                let picked: Vec<&SceneObject> = pool.choose_multiple(rng, 3).copied().collect();
                let names: BTreeSet<String> = picked.iter().map(|o| o.describe()).collect();
                if picked.len() < 3 || names.len() < picked.len() {
                    return None;
                }
                let nearest = rng.random_bool(0.5);
                let d: Vec<f64> = picked.iter().map(|o| o.center().distance(reference.center())).collect();
                let idx = distance_answer(&d, nearest, DEFAULT_DISTANCE_RATIO)?;
                let mut s = self.base(
                    task,
                    k,
                    format!(
                        "Which object outlined in blue is {} the object outlined in red?",
                        if nearest { "closest to" } else { "farthest from" }
                    ),
                    Target::Choice(option_labels(picked.len())[idx]),
                );
                s.choices = picked.iter().map(|o| format!("the {}", o.describe())).collect();
                s.markers = std::iter::once(marker(reference, MarkerColor::Red))
                    .chain(picked.iter().map(|o| marker(o, MarkerColor::Blue)))
                    .collect();
                s.context.support = std::iter::once(reference.bbox.clone())
                    .chain(picked.iter().map(|o| o.bbox.clone()))
                    .collect();
                Some(s)
            }
            Task::PDR => {
                if k > 0 {
                    return None;
                }
                let mut order = Pattern::ALL.to_vec();
                order.shuffle(rng);
                let idx = order.iter().position(|p| *p == sc.pattern)?;
                let c = &sc.pattern_category;
                let mut s = self.base(
                    task,
                    k,
                    format!("How are the {c} objects arranged in the image?"),
                    Target::Choice(option_labels(4)[idx]),
                );
                s.choices = order.iter().map(|p| p.description().to_string()).collect();
                s.context.support = boxes_of(sc.of_category(c));
                Some(s)
            }
        }
    }

    fn marked_choice(&self, task: Task, k: usize, query: String, choices: Vec<String>, y: char, o: &SceneObject) -> Sample {
        let mut s = self.base(task, k, query, Target::Choice(y));
        s.choices = choices;
        s.markers = vec![marker(o, MarkerColor::Red)];
        s.context.support = vec![o.bbox.clone()];
        s
    }

    fn grounding_context(&self, s: &mut Sample, o: &SceneObject, zone: Option<RectRegion>) {
        s.context.objects = self.scene.context_objects();
        s.context.target_id = Some(o.id);
        s.context.target_category = Some(o.category.clone());
        s.context.semantic_region = zone;
        s.context.referring_ids = vec![o.id];
        s.context.support = vec![o.bbox.clone()];
    }
}

fn marker(o: &SceneObject, color: MarkerColor) -> Marker {
    Marker {
        bbox: o.bbox.bounds().to_box(),
        color,
    }
}

/// Samples of `tasks` from one scene, at most `per_scene` per task.
pub fn derive_samples(scene: &Scene, tasks: &[Task], per_scene: usize, seed: u64) -> Vec<Sample> {
    let d = Deriver { scene, per_scene };
    let mut out = Vec::new();
    for task in tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.texture_seed);
        rng.set_stream(Task::ALL.iter().position(|t| t == task).unwrap_or(0) as u64);
        out.extend(d.derive(*task, &mut rng));
    }
    out
}

pub const SPLITS: [&str; 3] = ["dev", "val", "test"];

/// Per-task sample quotas for the dev, val and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub quotas: BTreeMap<Task, [usize; 3]>,
}

impl SplitPlan {
    pub fn balanced(tasks: &[Task], dev: usize, val: usize, test: usize) -> Self {
        SplitPlan {
            quotas: tasks.iter().map(|t| (*t, [dev, val, test])).collect(),
        }
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.quotas.keys().copied().collect()
    }

    fn total(&self, task: Task) -> usize {
        self.quotas.get(&task).map_or(0, |q| q.iter().sum())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub dev: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn parts(&self) -> [(&'static str, &Vec<Sample>); 3] {
        [("dev", &self.dev), ("val", &self.val), ("test", &self.test)]
    }

    fn part_mut(&mut self, i: usize) -> &mut Vec<Sample> {
        match i {
            0 => &mut self.dev,
            1 => &mut self.val,
            _ => &mut self.test,
        }
    }
}

fn task_order(t: Task) -> usize {
    Task::ALL.iter().position(|x| *x == t).unwrap_or(usize::MAX)
}

/// Seeded partition of `pool` honoring `plan`. With `disjoint_images`, an
/// image contributes to one split only.
pub fn build_splits(pool: &[Sample], plan: &SplitPlan, seed: u64, disjoint_images: bool) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_image: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in pool.iter().filter(|s| plan.quotas.contains_key(&s.task)) {
        by_image.entry(&s.image).or_default().push(s);
    }
    let mut images: Vec<&str> = by_image.keys().copied().collect();
    images.shuffle(&mut rng);
    let mut splits = Splits::default();
    let mut taken: BTreeSet<&str> = BTreeSet::new();

    for (si, _) in SPLITS.iter().enumerate() {
        let mut need: BTreeMap<Task, usize> = plan.quotas.iter().map(|(t, q)| (*t, q[si])).collect();
        for img in &images {
            if need.values().all(|n| *n == 0) {
                break;
            }
            let mut used = false;
            for s in &by_image[img] {
                if taken.contains(s.id.as_str()) {
                    continue;
                }
                if let Some(n) = need.get_mut(&s.task).filter(|n| **n > 0) {
                    *n -= 1;
                    taken.insert(&s.id);
                    splits.part_mut(si).push((*s).clone());
                    used = true;
                }
            }
            if used && disjoint_images {
                for s in &by_image[img] {
                    taken.insert(&s.id);
                }
            }
        }
        let deficits: Vec<String> = need
            .iter()
            .filter(|(_, n)| **n > 0)
            .map(|(t, n)| format!("{t} short by {n}"))
            .collect();
        if !deficits.is_empty() {
            return Err(Error::Quota(format!("{} split: {}", SPLITS[si], deficits.join(", "))));
        }
        splits.part_mut(si).sort_by(|a, b| (task_order(a.task), &a.id).cmp(&(task_order(b.task), &b.id)));
    }
    Ok(splits)
}

/// Everything needed to reproduce a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub scene: SceneParams,
    pub plan: SplitPlan,
    /// Samples derived per task and scene, at most.
    pub per_scene: usize,
    pub disjoint_images: bool,
    pub max_scenes: usize,
}

impl GenerateConfig {
    pub fn balanced(seed: u64, tasks: &[Task], dev: usize, val: usize, test: usize) -> Self {
        GenerateConfig {
            seed,
            scene: SceneParams::default(),
            plan: SplitPlan::balanced(tasks, dev, val, test),
            per_scene: 2,
            disjoint_images: true,
            max_scenes: 5000,
        }
    }
}

pub struct Generated {
    pub splits: Splits,
    /// Scenes referenced by the splits, keyed by image path.
    pub scenes: BTreeMap<String, Scene>,
}

/// Generates scenes in parallel batches until every task's pool covers its
/// quota, then partitions. Deterministic for a given config.
pub fn generate(cfg: &GenerateConfig) -> Result<Generated> {
    const BATCH: u64 = 16;
    let tasks = cfg.plan.tasks();
    let mut pool: Vec<Sample> = Vec::new();
    let mut scenes: BTreeMap<String, Scene> = BTreeMap::new();
    let mut have: BTreeMap<Task, usize> = BTreeMap::new();
    let mut next = 0u64;
    let per_scene = cfg.per_scene.max(1);
    // Disjoint splits waste part of each image, so keep a margin.
    let enough = |have: &BTreeMap<Task, usize>| {
        tasks.iter().all(|t| {
            let total = cfg.plan.total(*t);
            let margin = if cfg.disjoint_images { total / 4 + per_scene * 3 } else { 0 };
            have.get(t).copied().unwrap_or(0) >= total + margin
        })
    };
    while !enough(&have) {
        if next >= cfg.max_scenes as u64 {
            break;
        }
        let batch: Vec<u64> = (next..(next + BATCH).min(cfg.max_scenes as u64)).collect();
        next += batch.len() as u64;
        let results: Vec<Result<(Scene, Vec<Sample>)>> = batch
            .par_iter()
            .map(|&i| {
                let scene = generate_scene(&cfg.scene, cfg.seed, i)?;
                let samples = derive_samples(&scene, &tasks, per_scene, cfg.seed);
                Ok((scene, samples))
            })
            .collect();
        for r in results {
            let (scene, samples) = r?;
            for s in &samples {
                *have.entry(s.task).or_default() += 1;
            }
            scenes.insert(scene.image_name(), scene);
            pool.extend(samples);
        }
    }
    let splits = build_splits(&pool, &cfg.plan, cfg.seed, cfg.disjoint_images)?;
    let used: BTreeSet<&str> = splits
        .parts()
        .iter()
        .flat_map(|(_, v)| v.iter().map(|s| s.image.as_str()))
        .collect();
    scenes.retain(|k, _| used.contains(k.as_str()));
    Ok(Generated { splits, scenes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenerateConfig,
    pub counts: BTreeMap<String, BTreeMap<Task, usize>>,
    pub images: usize,
}

/// Writes `{dev,val,test}.jsonl`, the scene images and `manifest.json`.
pub fn write_generated(generated: &Generated, cfg: &GenerateConfig, out: &Path, render_images: bool) -> Result<Manifest> {
    fs::create_dir_all(out.join("images"))?;
    let mut counts = BTreeMap::new();
    for (name, samples) in generated.splits.parts() {
        save_dataset(&out.join(format!("{name}.jsonl")), samples)?;
        let mut c: BTreeMap<Task, usize> = BTreeMap::new();
        for s in samples {
            *c.entry(s.task).or_default() += 1;
        }
        counts.insert(name.to_string(), c);
    }
    if render_images {
        generated
            .scenes
            .par_iter()
            .map(|(name, scene)| scene.render().save_png(&out.join(name)))
            .collect::<Result<Vec<()>>>()?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        counts,
        images: generated.scenes.len(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Renders scene images on demand; for runs over freshly generated data.
pub struct SceneImageProvider {
    scenes: BTreeMap<String, Scene>,
    cache: Mutex<VecDeque<(String, Arc<ImageCanvas>)>>,
    capacity: usize,
}

impl SceneImageProvider {
    pub fn new(scenes: BTreeMap<String, Scene>, capacity: usize) -> Self {
        SceneImageProvider {
            scenes,
            cache: Mutex::new(VecDeque::new()),
            capacity: capacity.max(1),
        }
    }
}

impl ImageProvider for SceneImageProvider {
    fn base_image(&self, sample: &Sample) -> Result<Arc<ImageCanvas>> {
        if let Some((_, img)) = self.cache.lock().expect("scene cache poisoned").iter().find(|(k, _)| *k == sample.image) {
            return Ok(img.clone());
        }
        let scene = self.scenes.get(&sample.image).ok_or_else(|| Error::Image {
            path: sample.image.clone().into(),
            message: "no scene with this image name".into(),
        })?;
        let img = Arc::new(scene.render());
        let mut cache = self.cache.lock().expect("scene cache poisoned");
        if cache.len() >= self.capacity {
            cache.pop_front();
        }
        cache.push_back((sample.image.clone(), img.clone()));
        Ok(img)
    }
}
