//! Acceptance suite: one PASS/FAIL line per criterion. Each check compares
//! the library against an oracle coded here from first principles.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num::{BigRational, Signed, ToPrimitive, Zero};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use microeval::agent::scripted::{FlakyBackend, OracleResponder, SynthesisMode};
use microeval::agent::{run_sample, BoxFillSegmenter, MapConfig, Recorder, Runtime, Stage, Strategy};
use microeval::coords::{CoordFrame, Convention};
use microeval::dataset::{BlankImages, ContextObject, Sample, SampleContext, Target};
use microeval::diagnosis::{classify, diagnosis_histogram, pearson, spearman, DiagnosisContext, DiagnosisLabel};
use microeval::geometry::{iou, GeomBox, RectRegion};
use microeval::mask::{BinaryMask, RleMask};
use microeval::metrics::{
    aggregate, counting_score, greedy_match, s_box, s_mask, score_prediction, soft_f1, target_as_prediction, MatchResult,
    ParseStatus, Prediction, ScoreRecord,
};
use microeval::parse::{parse_final, parse_local_answer, parse_points, AnswerKind, BoxFamily, ParsedAnswer};
use microeval::report::{evaluate, RunConfig};
use microeval::task::Task;
use microeval::taskgen::{generate, GenerateConfig, Splits};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn hbb(x1: f64, y1: f64, x2: f64, y2: f64) -> GeomBox {
    GeomBox::hbb(x1, y1, x2, y2)
}

fn within(limit: Duration, start: Instant) -> Check {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {t:.2?}, limit {limit:?}"))
    } else {
        Ok(format!("{t:.2?}"))
    }
}

// ---------------------------------------------------------------- AC1

fn ac1_formulas() -> Check {
    let start = Instant::now();
    let g = hbb(0.0, 0.0, 10.0, 10.0);
    let cases = [
        (s_box(&g, &g).unwrap(), 1.0),
        (s_box(&g, &hbb(5.0, 0.0, 15.0, 10.0)).unwrap(), 1.0 / 3.0 + (2.0 / 3.0) * (-25.0f64 / 200.0).exp()),
        (s_box(&g, &hbb(100.0, 100.0, 110.0, 110.0)).unwrap(), (-100.0f64).exp()),
    ];
    for (i, (got, want)) in cases.iter().enumerate() {
        ensure!(close(*got, *want, 1e-6), "s_box case {i}: {got} vs {want}");
    }
    // The quoted 0.92167 is the value to five places with the last digit
    // off by one; the closed form is 0.9216646.
    ensure!(close(cases[1].1, 0.92167, 1e-5), "shifted-box reference {}", cases[1].1);

    let mut top = BinaryMask::new(10, 10);
    let mut left = BinaryMask::new(10, 10);
    for r in 0..10 {
        for c in 0..10 {
            top.set(r, c, r < 5);
            left.set(r, c, c < 5);
        }
    }
    let (m, mh) = (RleMask::encode(&top), RleMask::encode(&left));
    let want = 1.0 / 3.0 + (2.0 / 3.0) * (-12.5f64 / 125.0).exp();
    let got = s_mask(&m, &mh).unwrap();
    // The quoted 0.9365 is truncated; the closed form is 0.936558.
    ensure!(close(got, want, 1e-6) && close(want, 0.9365, 1e-4), "s_mask {got} vs {want}");
    ensure!(s_mask(&m, &m).unwrap() == 1.0, "s_mask self");
    ensure!(s_mask(&m, &RleMask::encode(&BinaryMask::new(10, 12))).unwrap() == 0.0, "mismatched mask must score 0");

    for (c, p, want) in [(50, Some(49), 0.98), (0, Some(0), 1.0), (0, Some(1), 0.0), (4, Some(9), 0.0), (4, None, 0.0), (7, Some(7), 1.0)] {
        let got = counting_score(c, p);
        ensure!(close(got, want, 1e-6), "counting {c} vs {p:?}: {got}");
    }

    let m = greedy_match(&[g.clone(), hbb(100.0, 100.0, 110.0, 110.0)], &[g.clone()]);
    ensure!(m.t == 1.0 && m.fp == 0 && m.fn_count == 1, "{m:?}");
    ensure!(close(soft_f1(&m), 2.0 / 3.0, 1e-6), "soft F1 {}", soft_f1(&m));
    let m = MatchResult {
        pairs: vec![(0, 0, 0.8)],
        fp: 1,
        fn_count: 1,
        t: 0.8,
    };
    ensure!(close(soft_f1(&m), 0.8 / 1.8, 1e-6), "soft F1 {}", soft_f1(&m));
    let none = MatchResult {
        pairs: vec![],
        fp: 0,
        fn_count: 0,
        t: 0.0,
    };
    ensure!(soft_f1(&none) == 0.0, "zero denominators");
    let d = within(Duration::from_secs(1), start)?;
    Ok(format!("s_box, s_mask, counting, soft F1 to 1e-6 in {d}"))
}

// ---------------------------------------------------------------- AC2

/// Closed-form IoU of two horizontal boxes.
fn rect_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

fn rect_score(g: [f64; 4], p: [f64; 4]) -> f64 {
    let o = rect_iou(g, p);
    let d2 = ((g[0] + g[2]) / 2.0 - (p[0] + p[2]) / 2.0).powi(2) + ((g[1] + g[3]) / 2.0 - (p[1] + p[3]) / 2.0).powi(2);
    let s2 = (g[2] - g[0]).powi(2) + (g[3] - g[1]).powi(2);
    o + (1.0 - o) * (-d2 / s2).exp()
}

/// Rescans every remaining pair each round.
fn exhaustive_greedy(gts: &[[f64; 4]], preds: &[[f64; 4]]) -> (Vec<(usize, usize)>, f64, usize, usize) {
    let mut gt_free = vec![true; gts.len()];
    let mut pred_free = vec![true; preds.len()];
    let mut pairs = Vec::new();
    let mut t = 0.0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            for (pi, p) in preds.iter().enumerate() {
                if !gt_free[gi] || !pred_free[pi] {
                    continue;
                }
                let s = rect_score(*g, *p);
                if s > 0.0 && best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, gi, pi));
                }
            }
        }
        let Some((s, gi, pi)) = best else { break };
        gt_free[gi] = false;
        pred_free[pi] = false;
        pairs.push((gi, pi));
        t += s;
    }
    (pairs.clone(), t, preds.len() - pairs.len(), gts.len() - pairs.len())
}

fn random_rect(rng: &mut ChaCha8Rng) -> [f64; 4] {
    // A coarse grid makes duplicate boxes and exact ties common.
    let x = f64::from(rng.random_range(0..12u32)) * 10.0;
    let y = f64::from(rng.random_range(0..12u32)) * 10.0;
    let w = f64::from(rng.random_range(1..5u32)) * 10.0;
    let h = f64::from(rng.random_range(1..5u32)) * 10.0;
    [x, y, x + w, y + h]
}

fn ac2_matching() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ties = 0;
    for case in 0..1000 {
        let gts: Vec<[f64; 4]> = (0..rng.random_range(0..=4)).map(|_| random_rect(&mut rng)).collect();
        let mut preds: Vec<[f64; 4]> = (0..rng.random_range(0..=4)).map(|_| random_rect(&mut rng)).collect();
        if !gts.is_empty() && preds.len() < 4 && rng.random_bool(0.3) {
            preds.push(gts[rng.random_range(0..gts.len())]);
        }
        let (pairs, t, fp, fn_count) = exhaustive_greedy(&gts, &preds);
        let to_box = |r: &[f64; 4]| hbb(r[0], r[1], r[2], r[3]);
        let m = greedy_match(&gts.iter().map(to_box).collect::<Vec<_>>(), &preds.iter().map(to_box).collect::<Vec<_>>());
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.0, p.1)).collect();
        ensure!(got == pairs, "case {case}: pairs {got:?} vs {pairs:?} for {gts:?} / {preds:?}");
        ensure!(m.fp == fp && m.fn_count == fn_count, "case {case}: fp/fn");
        ensure!(close(m.t, t, 1e-12), "case {case}: T {} vs {t}", m.t);
        let mut seen = BTreeSet::new();
        let tied = gts
            .iter()
            .flat_map(|g| preds.iter().map(|p| rect_score(*g, *p)))
            .filter(|&v| v > 0.0)
            .any(|v| !seen.insert(v.to_bits()));
        ties += usize::from(tied);
    }
    Ok(format!("1000 instances agree, {ties} with exactly tied pair scores"))
}

// ---------------------------------------------------------------- AC3

/// Column-major run lengths, background first.
fn reference_counts(m: &BinaryMask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for c in 0..m.width() {
        for r in 0..m.height() {
            if m.get(r, c) != current {
                counts.push(run);
                run = 0;
                current = !current;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Signed 5-bit groups, low first; 0x20 marks continuation; offset 48.
fn reference_compress(counts: &[u32]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = i64::from(c);
        if i > 2 {
            x -= i64::from(counts[i - 2]);
        }
        loop {
            let mut chunk = x & 0x1f;
            x >>= 5;
            let more = if chunk & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                chunk |= 0x20;
            }
            out.push(char::from(u8::try_from(chunk + 48).unwrap()));
            if !more {
                break;
            }
        }
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    let h = rng.random_range(1..=512u32);
    let w = rng.random_range(1..=512u32);
    let mut m = BinaryMask::new(h, w);
    match rng.random_range(0..4) {
        0 => {}
        1 => {
            let p = rng.random_range(0.0..1.0);
            for r in 0..h {
                for c in 0..w {
                    m.set(r, c, rng.random_bool(p));
                }
            }
        }
        _ => {
            for _ in 0..rng.random_range(1..8) {
                let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (r1, c1) = (rng.random_range(r0..h) + 1, rng.random_range(c0..w) + 1);
                for r in r0..r1 {
                    for c in c0..c1 {
                        m.set(r, c, true);
                    }
                }
            }
        }
    }
    m
}

fn ac3_rle() -> Check {
    let start = Instant::now();
    ensure!(reference_compress(&[0, 1, 3]) == "013", "reference codec gives {}", reference_compress(&[0, 1, 3]));
    ensure!(reference_compress(&[9]) == "9", "reference codec on [9]");
    let mut one = BinaryMask::new(2, 2);
    one.set(0, 0, true);
    let e = RleMask::encode(&one);
    ensure!(e.counts() == [0, 1, 3] && e.compress() == "013", "worked example {:?} {}", e.counts(), e.compress());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut longest = 0;
    for case in 0..1000 {
        let m = random_mask(&mut rng);
        let e = RleMask::encode(&m);
        let counts = reference_counts(&m);
        ensure!(e.counts() == counts.as_slice(), "case {case}: counts differ");
        let text = e.compress();
        ensure!(text == reference_compress(&counts), "case {case}: compressed text differs");
        let back = RleMask::decompress(&text, m.height(), m.width()).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(back == e, "case {case}: decompress mismatch");
        ensure!(back.decode() == m, "case {case}: decode mismatch");
        longest = longest.max(text.len());
    }
    let d = within(Duration::from_secs(10), start)?;
    Ok(format!("1000 masks round-trip, longest string {longest} chars, {d}"))
}

// ---------------------------------------------------------------- AC4

fn random_box(rng: &mut ChaCha8Rng, cx: f64, cy: f64, w: f64, h: f64) -> GeomBox {
    if rng.random_bool(0.5) {
        hbb(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    } else {
        let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = a.sin_cos();
        let corner = |dx: f64, dy: f64| (cx + dx * c - dy * s, cy + dx * s + dy * c);
        GeomBox::obb([
            corner(-w / 2.0, -h / 2.0),
            corner(w / 2.0, -h / 2.0),
            corner(w / 2.0, h / 2.0),
            corner(-w / 2.0, h / 2.0),
        ])
    }
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % n];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// IoU by counting cell centers of a 600x600 grid over both boxes.
fn raster_iou(a: &GeomBox, b: &GeomBox) -> f64 {
    let pa: Vec<(f64, f64)> = a.vertices().iter().map(|p| (p.x, p.y)).collect();
    let pb: Vec<(f64, f64)> = b.vertices().iter().map(|p| (p.x, p.y)).collect();
    let all: Vec<&(f64, f64)> = pa.iter().chain(&pb).collect();
    let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (y0, y1) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    const N: usize = 600;
    let (dx, dy) = ((x1 - x0) / N as f64, (y1 - y0) / N as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..N {
        let x = x0 + (i as f64 + 0.5) * dx;
        for j in 0..N {
            let y = y0 + (j as f64 + 0.5) * dy;
            let (ia, ib) = (inside(&pa, x, y), inside(&pb, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

fn ac4_geometry() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut disjoint = 0;
    for case in 0..1000 {
        let (w, h) = (rng.random_range(10.0..200.0), rng.random_range(10.0..200.0));
        let (cx, cy) = (rng.random_range(200.0..800.0), rng.random_range(200.0..800.0));
        let a = random_box(&mut rng, cx, cy, w, h);
        let (w2, h2) = (w * rng.random_range(0.6..1.5f64), h * rng.random_range(0.6..1.5f64));
        let (w2, h2) = (w2.max(10.0), h2.max(10.0));
        let (ox, oy) = (rng.random_range(-0.3..0.3) * w, rng.random_range(-0.3..0.3) * h);
        let b = random_box(&mut rng, cx + ox, cy + oy, w2, h2);
        ensure!(a.area() >= 100.0 && b.area() >= 100.0, "case {case}: area below 100");
        let got = iou(&a, &b).map_err(|e| format!("case {case}: {e}"))?;
        let want = raster_iou(&a, &b);
        if want == 0.0 {
            disjoint += 1;
            ensure!(got < 1e-3, "case {case}: raster says disjoint, polygon IoU {got}");
            continue;
        }
        let rel = (got - want).abs() / want;
        ensure!(rel <= 0.02, "case {case}: {got} vs raster {want} ({:.2}%) for {a:?} {b:?}", rel * 100.0);
        worst = worst.max(rel);
    }
    let d = within(Duration::from_secs(30), start)?;
    Ok(format!("1000 pairs, worst relative error {:.3}%, {disjoint} disjoint, {d}", worst * 100.0))
}

// ---------------------------------------------------------------- AC5

fn bare_sample(id: &str, task: Task, width: u32, height: u32, target: Target) -> Sample {
    Sample {
        id: id.into(),
        image: "fixture.png".into(),
        width,
        height,
        task,
        query: "Locate the target.".into(),
        region: None,
        region2: None,
        target,
        choices: vec![],
        coord_protocol: None,
        markers: vec![],
        context: SampleContext::default(),
    }
}

fn ac5_protocols() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 3];
    for (k, conv) in [Convention::Thousand, Convention::Unit, Convention::Abs].into_iter().enumerate() {
        for _ in 0..2000 {
            let (w, h) = (rng.random_range(1..20_000u32), rng.random_range(1..20_000u32));
            let frame = CoordFrame::new(conv, w, h).unwrap();
            let px = [rng.random_range(0.0..=f64::from(w)), rng.random_range(0.0..=f64::from(h))];
            let back = frame.to_abs(&frame.from_abs(&px)).map_err(|e| e.to_string())?;
            // One unit of the convention, expressed in pixels.
            let unit = |extent: u32| match conv {
                Convention::Thousand => f64::from(extent) / 1000.0,
                Convention::Unit => f64::from(extent) / 10_000.0,
                Convention::Abs => 1.0,
            }
            .max(1.0);
            for (i, ext) in [w, h].into_iter().enumerate() {
                let err = (back[i] - px[i]).abs() / unit(ext);
                ensure!(err <= 1.0, "{conv}: {px:?} on {w}x{h} came back as {back:?}");
                worst[k] = worst[k].max(err);
            }
        }
    }

    let targets = vec![hbb(1608.0, 808.0, 1640.0, 832.0), hbb(2400.0, 1200.0, 2432.0, 1224.0)];
    let mut rc = bare_sample("rc", Task::RC, 4000, 2000, Target::Count(2));
    rc.region = Some(RectRegion::new(1200.0, 600.0, 2800.0, 1400.0));
    rc.query = "How many cars are inside {region}?".into();
    rc.context.support = targets.clone();
    let fixtures = [
        bare_sample("gd", Task::GD, 4000, 2000, Target::Boxes(targets.clone())),
        bare_sample("bg", Task::BG, 4000, 2000, Target::Boxes(vec![targets[0].clone()])),
        rc,
    ];
    for s in &fixtures {
        let mut outputs = Vec::new();
        for conv in [Convention::Thousand, Convention::Unit, Convention::Abs] {
            let cfg = MapConfig {
                side: 1000,
                convention: conv,
                ..MapConfig::default()
            };
            let b = OracleResponder::new(std::slice::from_ref(s), &cfg, SynthesisMode::EchoEvidence).backend();
            let rec = run_sample(Runtime::new(&b, &BoxFillSegmenter, &BlankImages), s, Strategy::Map, &cfg)
                .map_err(|e| e.to_string())?;
            ensure!(rec.detail["convention"] == conv.to_string(), "{}: convention not applied", s.id);
            outputs.push((rec.prediction, rec.raw_score));
        }
        ensure!(outputs[0] == outputs[1] && outputs[1] == outputs[2], "{}: protocols disagree: {outputs:?}", s.id);
        ensure!(outputs[0].1 > 0.999, "{}: score {}", s.id, outputs[0].1);
    }
    Ok(format!(
        "round-trip within {:.2}/{:.2}/{:.2} units; 3 fixtures identical across protocols",
        worst[0], worst[1], worst[2]
    ))
}

// ---------------------------------------------------------------- AC6 / AC7 / AC8

fn run_config(tasks: Vec<Task>) -> RunConfig {
    RunConfig {
        dataset: PathBuf::from("synthetic.jsonl"),
        dataset_sha256: String::new(),
        strategy: Strategy::Map,
        map: MapConfig::default(),
        backend: "oracle".into(),
        backend_url: None,
        model: None,
        segmenter: "box-fill".into(),
        workers: 4,
        seed: 0,
        tasks,
        store_predictions: true,
    }
}

fn suite_200() -> Result<Vec<Sample>, String> {
    let mut cfg = GenerateConfig::balanced(606, &Task::ALL, 0, 12, 0);
    for (i, q) in cfg.plan.quotas.values_mut().enumerate() {
        q[1] = if i < 8 { 13 } else { 12 };
    }
    let val = generate(&cfg).map_err(|e| e.to_string())?.splits.val;
    ensure!(val.len() == 200, "suite has {} samples", val.len());
    Ok(val)
}

fn ac6_map_oracle(samples: &[Sample]) -> Check {
    let cfg = run_config(Task::ALL.to_vec());
    let backend = Recorder::new(OracleResponder::new(samples, &cfg.map, SynthesisMode::GroundTruth).backend());
    let out = evaluate(samples, Runtime::new(&backend, &BoxFillSegmenter, &BlankImages), &cfg).map_err(|e| e.to_string())?;
    let mut stages: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    let entries = backend.entries();
    for e in &entries {
        let slot = stages.entry(e.sample_id.as_str()).or_default();
        match e.stage {
            Stage::Discovery => slot[0] += 1,
            Stage::Inspection => slot[1] += 1,
            Stage::Synthesis => slot[2] += 1,
            other => return Err(format!("{}: unexpected stage {other}", e.sample_id)),
        }
    }
    for (s, rec) in samples.iter().zip(&out.records) {
        let discovery = usize::from(cfg.map.policy.budget(s.task).is_some());
        let k = rec.detail["rois"].as_array().map_or(0, Vec::len);
        let [d, i, y] = stages.get(s.id.as_str()).copied().unwrap_or_default();
        ensure!(
            rec.calls == discovery + k + 1 && d == discovery && i == k && y == 1,
            "{}: {} calls, K={k}, stages {d}/{i}/{y}",
            s.id,
            rec.calls
        );
    }
    let agg = aggregate(&out.records, &Task::ALL);
    let overall = agg.overall.unwrap_or(0.0);
    ensure!(overall >= 99.0, "overall {overall}");
    let worst = agg.tasks.iter().min_by(|a, b| a.raw.total_cmp(&b.raw)).unwrap();
    Ok(format!(
        "overall {overall:.2} on {} samples (lowest task {} {:.2}); call formula exact on every sample",
        samples.len(),
        worst.task,
        worst.display
    ))
}

fn ac7_budget(val: &[Sample]) -> Check {
    let cfg = run_config(Task::ALL.to_vec());
    let backend = OracleResponder::new(val, &cfg.map, SynthesisMode::GroundTruth).backend();
    let out = evaluate(val, Runtime::new(&backend, &BoxFillSegmenter, &BlankImages), &cfg).map_err(|e| e.to_string())?;
    let mean = out.records.iter().map(|r| r.calls as f64).sum::<f64>() / out.records.len() as f64;
    ensure!((3.0..=4.0).contains(&mean), "mean calls {mean}");

    let s = bare_sample("tile", Task::GD, 4800, 3200, Target::Boxes(vec![hbb(100.0, 100.0, 130.0, 120.0)]));
    let map = MapConfig::default();
    let b = Recorder::new(OracleResponder::new(std::slice::from_ref(&s), &map, SynthesisMode::GroundTruth).backend());
    let rec = run_sample(Runtime::new(&b, &BoxFillSegmenter, &BlankImages), &s, Strategy::SlidingWindow(1024), &map)
        .map_err(|e| e.to_string())?;
    let tiles = b.entries().iter().filter(|e| e.stage == Stage::Tile).count();
    ensure!(rec.calls == 20 && tiles == 20, "sliding window: {} calls, {tiles} tile requests", rec.calls);
    Ok(format!("mean {mean:.3} calls over {} balanced samples; 20 tile calls on 4800x3200", val.len()))
}

fn ac8_taskgen(splits: &Splits) -> Check {
    let mut counts: BTreeMap<Task, usize> = BTreeMap::new();
    for s in &splits.val {
        *counts.entry(s.task).or_default() += 1;
    }
    for t in Task::ALL {
        ensure!(counts.get(&t) == Some(&100), "val has {:?} {t} samples", counts.get(&t));
    }
    let mut checked = 0;
    let mut kinds = BTreeSet::new();
    for (part, samples) in [("dev", &splits.dev), ("val", &splits.val), ("test", &splits.test)] {
        for s in samples.iter() {
            let pred = target_as_prediction(&s.target);
            kinds.insert(match pred {
                Prediction::Boxes(_) => "boxes",
                Prediction::Mask(_) => "mask",
                Prediction::Count(_) => "count",
                _ => "option",
            });
            let rec = score_prediction(s, &pred);
            ensure!(
                rec.raw_score == 1.0 && rec.parse_status == ParseStatus::Ok,
                "{part} {}: self-score {} {:?}",
                s.id,
                rec.raw_score,
                rec.detail
            );
            checked += 1;
        }
    }
    ensure!(kinds.len() == 4, "only {} answer kinds generated", kinds.len());
    Ok(format!("{checked} samples self-score 1.0 across 4 answer kinds; val has 100 per task"))
}

// ---------------------------------------------------------------- AC9

fn planted() -> (DiagnosisContext, Vec<(Prediction, DiagnosisLabel)>) {
    let obj = |id, category: &str, b: GeomBox| ContextObject {
        id,
        category: category.into(),
        bbox: b,
    };
    let ctx = DiagnosisContext {
        gt_box: hbb(100.0, 100.0, 140.0, 130.0),
        gt_category: "car".into(),
        gt_id: Some(1),
        semantic_region: Some(RectRegion::new(0.0, 0.0, 600.0, 600.0)),
        objects: vec![
            obj(1, "car", hbb(100.0, 100.0, 140.0, 130.0)),
            obj(2, "car", hbb(300.0, 300.0, 340.0, 330.0)),
            obj(3, "truck", hbb(200.0, 100.0, 240.0, 130.0)),
            obj(4, "car", hbb(400.0, 100.0, 440.0, 130.0)),
        ],
        referring_ids: [4].into_iter().collect(),
    };
    let boxes = |v: &[[f64; 4]]| Prediction::Boxes(v.iter().map(|b| hbb(b[0], b[1], b[2], b[3])).collect());
    use DiagnosisLabel::*;
    let preds = vec![
        (Prediction::Invalid("garbled".into()), If),
        (Prediction::Null, If),
        (boxes(&[[100.0, 100.0, 140.0, 130.0]]), Succ),
        (boxes(&[[102.0, 101.0, 142.0, 131.0]]), Succ),
        (boxes(&[[900.0, 900.0, 920.0, 920.0], [101.0, 100.0, 141.0, 130.0]]), Succ),
        (boxes(&[[700.0, 700.0, 720.0, 720.0]]), Rh),
        (boxes(&[[590.0, 610.0, 640.0, 640.0]]), Rh),
        (boxes(&[[500.0, 500.0, 520.0, 520.0]]), Oh),
        (boxes(&[[10.0, 400.0, 40.0, 420.0]]), Oh),
        (boxes(&[[200.0, 100.0, 240.0, 130.0]]), Cath),
        (boxes(&[[300.0, 300.0, 340.0, 330.0]]), Ctxh),
        (boxes(&[[305.0, 300.0, 345.0, 330.0]]), Ctxh),
        (boxes(&[[125.0, 100.0, 165.0, 130.0]]), Cs),
        (boxes(&[[400.0, 100.0, 440.0, 130.0]]), Other),
    ];
    (ctx, preds)
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

/// Pearson coefficient from exact sums; only the final square root is
/// taken in floating point.
fn exact_pearson(x: &[BigRational], y: &[BigRational]) -> f64 {
    let n = BigRational::from_integer(x.len().into());
    let mx = x.iter().cloned().sum::<BigRational>() / &n;
    let my = y.iter().cloned().sum::<BigRational>() / &n;
    let (mut sxy, mut sxx, mut syy) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - &mx, b - &my);
        sxy += &da * &db;
        sxx += &da * &da;
        syy += &db * &db;
    }
    let r2 = (&sxy * &sxy) / (sxx * syy);
    let r = r2.to_f64().unwrap().sqrt();
    if sxy.is_negative() {
        -r
    } else {
        r
    }
}

fn exact_ranks(x: &[f64]) -> Vec<BigRational> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count();
            let equal = x.iter().filter(|&&u| u == v).count();
            // Mean of positions below+1 ..= below+equal.
            BigRational::new((2 * below + equal + 1).into(), 2.into())
        })
        .collect()
}

fn ac9_diagnosis() -> Check {
    let (ctx, preds) = planted();
    let labels: Vec<DiagnosisLabel> = preds.iter().map(|(p, _)| classify(p, &ctx, 0.3).label).collect();
    for (i, ((_, want), got)) in preds.iter().zip(&labels).enumerate() {
        ensure!(want == got, "planted case {i}: {got} instead of {want}");
    }
    let hist = diagnosis_histogram(&labels);
    let want = [2usize, 3, 2, 2, 1, 2, 1, 1];
    ensure!(hist.len() == 8, "histogram has {} rows", hist.len());
    for (row, (&n, label)) in hist.iter().zip(want.iter().zip(DiagnosisLabel::ALL)) {
        ensure!(row.label == label && row.count == n, "row {row:?}, expected {label} x{n}");
        ensure!(close(row.percent, n as f64 * 100.0 / 14.0, 0.005 + 1e-12), "row {row:?} percent");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base: Vec<_> = preds.iter().map(|(p, _)| classify(p, &ctx, 0.3)).collect();
    for _ in 0..50 {
        let mut shuffled = ctx.clone();
        shuffled.objects.shuffle(&mut rng);
        let again: Vec<_> = preds.iter().map(|(p, _)| classify(p, &shuffled, 0.3)).collect();
        ensure!(again == base, "object order changed a diagnosis");
    }

    let fixtures: Vec<(Vec<f64>, Vec<f64>)> = vec![
        (vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![2.0, 4.0, 6.0, 8.0, 10.0]),
        (vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![5.0, 3.0, 4.0, 1.0, 2.0]),
        (vec![8.0, 8.0, 12.5, 30.0, 30.0, 30.0, 64.0], vec![0.1, 0.7, 0.3, 0.9, 0.95, 0.2, 1.0]),
        (vec![0.1, 0.2, 0.3, 1e3, 1e-3], vec![1.0 / 3.0, 2.0 / 7.0, 0.5, 0.5, 0.0]),
        (
            (0..40).map(|i| f64::from(i * i % 17) + 0.25).collect(),
            (0..40).map(|i| (f64::from(i) * 0.7).sin()).collect(),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (i, (x, y)) in fixtures.iter().enumerate() {
        let xe: Vec<_> = x.iter().map(|&v| exact(v)).collect();
        let ye: Vec<_> = y.iter().map(|&v| exact(v)).collect();
        let p = pearson(x, y).map_err(|e| e.to_string())?;
        let s = spearman(x, y).map_err(|e| e.to_string())?;
        let (pw, sw) = (exact_pearson(&xe, &ye), exact_pearson(&exact_ranks(x), &exact_ranks(y)));
        ensure!(close(p, pw, 1e-9), "fixture {i}: Pearson {p} vs {pw}");
        ensure!(close(s, sw, 1e-9), "fixture {i}: Spearman {s} vs {sw}");
        worst = worst.max((p - pw).abs()).max((s - sw).abs());
    }
    ensure!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err(), "constant input must be undefined");
    Ok(format!("14 planted labels exact, 50 permutations stable, correlations within {worst:.1e}"))
}

// ---------------------------------------------------------------- AC10

const TOKENS: &[&str] = &[
    "Final answer:", "final answer :", "**Final Answer**:", "[", "]", "[[", "]]", ",", " ", "\n", "-", ".", "e", "E+", "null",
    "None", "(", ")", "A", "B", "C", "D", "Z", "0", "1", "7", "42", "999", "1000", "1e309", "NaN", "inf", "{", "}", "\"", "：",
    "，", "٣", "💥", "count", "is", "answer", "<box>", "</box>", "0.5", "-3", "18446744073709551616", "\t", "option", "x",
];

fn structurally_valid(p: &ParsedAnswer, kind: &AnswerKind) -> Result<(), String> {
    match (p, kind) {
        (ParsedAnswer::Invalid(_) | ParsedAnswer::Null, _) => Ok(()),
        (ParsedAnswer::Boxes(bs), AnswerKind::Boxes(family)) => {
            ensure!(!bs.is_empty(), "empty box list");
            for b in bs {
                ensure!(family.admits(b.kind()), "{b:?} not admitted by {family:?}");
                ensure!(b.coords().iter().all(|v| v.is_finite()), "non-finite {b:?}");
                b.validate().map_err(|e| format!("{b:?}: {e}"))?;
            }
            Ok(())
        }
        (ParsedAnswer::Count(_), AnswerKind::Count) => Ok(()),
        (ParsedAnswer::Choice(c), AnswerKind::Choice(labels)) => {
            ensure!(labels.contains(c), "label {c} outside {labels:?}");
            Ok(())
        }
        (p, k) => Err(format!("{p:?} is not a {k:?} payload")),
    }
}

fn ac10_robustness(samples: &[Sample]) -> Check {
    let kinds = [
        AnswerKind::Boxes(BoxFamily::Either),
        AnswerKind::Boxes(BoxFamily::Hbb),
        AnswerKind::Boxes(BoxFamily::Obb),
        AnswerKind::Count,
        AnswerKind::Choice(vec!['A', 'B', 'C', 'D']),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut valid = 0;
    let prev = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let fuzz = panic::catch_unwind(AssertUnwindSafe(|| -> Check {
        for case in 0..10_000 {
            let text: String = if rng.random_bool(0.2) {
                (0..rng.random_range(0..60)).map(|_| char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?')).collect()
            } else {
                (0..rng.random_range(0..30)).map(|_| *TOKENS.choose(&mut rng).unwrap()).collect()
            };
            let kind = &kinds[case % kinds.len()];
            for parsed in [parse_final(&text, kind), parse_local_answer(&text, kind)] {
                structurally_valid(&parsed, kind).map_err(|e| format!("input {text:?}: {e}"))?;
                valid += usize::from(!parsed.is_invalid());
            }
            let pts = parse_points(&text, 8);
            ensure!(pts.len() <= 8 && pts.iter().all(|p| p.x.is_finite() && p.y.is_finite()), "points from {text:?}");
        }
        Ok(String::new())
    }));
    panic::set_hook(prev);
    match fuzz {
        Ok(r) => {
            r?;
        }
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            return Err(format!("parser panicked: {msg:?}"));
        }
    }

    let cfg = run_config(Task::ALL.to_vec());
    let inner = OracleResponder::new(samples, &cfg.map, SynthesisMode::GroundTruth).backend();
    let backend = Recorder::new(FlakyBackend::new(inner, 0.1));
    let out = evaluate(samples, Runtime::new(&backend, &BoxFillSegmenter, &BlankImages), &cfg).map_err(|e| e.to_string())?;
    let entries = backend.entries();
    let failed_ids: BTreeSet<&str> = entries.iter().filter(|e| e.error.is_some()).map(|e| e.sample_id.as_str()).collect();
    let failed_calls = entries.iter().filter(|e| e.error.is_some()).count();
    ensure!(out.records.len() == samples.len(), "run incomplete");
    ensure!(!failed_ids.is_empty(), "no call failed");
    let rate = failed_calls as f64 / entries.len() as f64;
    ensure!((0.05..=0.15).contains(&rate), "failure rate {rate}");
    for r in &out.records {
        let hit = failed_ids.contains(r.sample_id.as_str());
        let empty = r.parse_status == ParseStatus::Empty;
        ensure!(hit == empty, "{}: failed call {hit}, status {:?}", r.sample_id, r.parse_status);
        ensure!(!hit || r.raw_score == 0.0, "{}: failed sample scored {}", r.sample_id, r.raw_score);
    }
    let clean: Vec<&ScoreRecord> = out.records.iter().filter(|r| !failed_ids.contains(r.sample_id.as_str())).collect();
    ensure!(clean.iter().all(|r| r.raw_score > 0.99), "clean samples lost score");
    Ok(format!(
        "10000 fuzz inputs, {valid} parsed payloads, no panics; {} of {} samples hit {failed_calls}/{} failed calls and scored 0",
        failed_ids.len(),
        samples.len(),
        entries.len()
    ))
}

// ---------------------------------------------------------------- runner

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panic: {}", msg.unwrap_or_default()))
    });
    let t = start.elapsed();
    match result {
        Ok(detail) => {
            println!("PASS {name}: {detail} [{t:.2?}]");
            true
        }
        Err(e) => {
            println!("FAIL {name}: {e} [{t:.2?}]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run("AC1 metric formulas", ac1_formulas);
    ok &= run("AC2 greedy matching vs exhaustive oracle", ac2_matching);
    ok &= run("AC3 RLE codec vs reference codec", ac3_rle);
    ok &= run("AC4 polygon IoU vs raster oracle", ac4_geometry);
    ok &= run("AC5 coordinate protocols", ac5_protocols);

    let suite = suite_200();
    ok &= run("AC6 MAP with ground-truth backend", || ac6_map_oracle(&suite.clone()?));

    let balanced = generate(&GenerateConfig::balanced(808, &Task::ALL, 10, 100, 100)).map_err(|e| e.to_string());
    ok &= run("AC7 call budget", || ac7_budget(&balanced.as_ref().map_err(Clone::clone)?.splits.val));
    ok &= run("AC8 taskgen self-consistency", || ac8_taskgen(&balanced.as_ref().map_err(Clone::clone)?.splits));
    ok &= run("AC9 diagnosis determinism", ac9_diagnosis);
    ok &= run("AC10 parser fuzz and failing backend", || ac10_robustness(&suite.clone()?));

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
