//! Binary masks as COCO-style run-length encodings.
//!
//! Runs are taken in column-major order (down each column, columns left to
//! right) and alternate background/foreground, starting with background. The
//! compressed text form is bit-compatible with the COCO `maskApi` string
//! codec, so masks round-trip through pycocotools unchanged.
//!
//! Pixel `(row r, col c)` has its center at `(c + 0.5, r + 0.5)`; centroids
//! and extents below use that convention.

use crate::error::{Error, Result};
use crate::geometry::{GeomBox, Point, RectRegion};

/// Dense row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: u32, width: u32) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height as usize * width as usize],
        }
    }

    /// Builds a grid from rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 {
            return Err(Error::MaskEncoding("mask must be at least 1x1".into()));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::MaskEncoding("ragged rows".into()));
        }
        Ok(BinaryMask {
            height: height as u32,
            width: width as u32,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.data[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.data[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.data
            .chunks(self.width as usize)
            .map(<[bool]>::to_vec)
            .collect()
    }
}

/// Run-length encoded binary mask in canonical form: counts sum to
/// `height * width` and only the leading count may be zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

#[derive(Default)]
struct RunBuilder {
    counts: Vec<u32>,
    value: bool,
    len: u64,
}

impl RunBuilder {
    fn push(&mut self, value: bool, len: u64) {
        if len == 0 {
            return;
        }
        if value == self.value {
            self.len += len;
        } else {
            self.counts.push(self.len as u32);
            self.value = value;
            self.len = len;
        }
    }

    fn finish(mut self) -> Vec<u32> {
        if self.len > 0 || self.counts.is_empty() {
            self.counts.push(self.len as u32);
        }
        self.counts
    }
}

impl RleMask {
    /// Canonicalizes raw run counts (interior zero runs merge their
    /// neighbours) and checks they cover the canvas exactly.
    pub fn from_counts(height: u32, width: u32, counts: &[u32]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::MaskEncoding("mask must be at least 1x1".into()));
        }
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let expected = u64::from(height) * u64::from(width);
        if total != expected {
            return Err(Error::MaskEncoding(format!(
                "counts sum to {total}, expected {expected}"
            )));
        }
        let mut builder = RunBuilder::default();
        for (i, &c) in counts.iter().enumerate() {
            builder.push(i % 2 == 1, u64::from(c));
        }
        Ok(RleMask {
            height,
            width,
            counts: builder.finish(),
        })
    }

    /// Column-major run-length encoding of a dense grid.
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut builder = RunBuilder::default();
        for c in 0..mask.width {
            for r in 0..mask.height {
                builder.push(mask.get(r, c), 1);
            }
        }
        RleMask {
            height: mask.height,
            width: mask.width,
            counts: builder.finish(),
        }
    }

    pub fn decode(&self) -> BinaryMask {
        let mut mask = BinaryMask::new(self.height, self.width);
        let h = u64::from(self.height);
        for (start, end) in self.foreground_runs() {
            for idx in start..end {
                mask.set((idx % h) as u32, (idx / h) as u32, true);
            }
        }
        mask
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Half-open column-major index ranges of foreground pixels.
    pub fn foreground_runs(&self) -> Vec<(u64, u64)> {
        let mut runs = Vec::with_capacity(self.counts.len() / 2);
        let mut pos = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            let next = pos + u64::from(c);
            if i % 2 == 1 {
                runs.push((pos, next));
            }
            pos = next;
        }
        runs
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }

    /// COCO compressed string: each count (delta-coded against the count two
    /// places back once past index 2) becomes 5-bit little-endian chunks with
    /// a 0x20 continuation flag, offset by ASCII 48.
    pub fn compress(&self) -> String {
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = i64::from(c);
            if i > 2 {
                x -= i64::from(self.counts[i - 2]);
            }
            loop {
                let mut chunk = (x & 0x1f) as u8;
                x >>= 5;
                let more = if chunk & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    chunk |= 0x20;
                }
                out.push(char::from(chunk + 48));
                if !more {
                    break;
                }
            }
        }
        out
    }

    pub fn decompress(text: &str, height: u32, width: u32) -> Result<Self> {
        let bytes = text.as_bytes();
        let mut counts: Vec<i64> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0u32;
            loop {
                let byte = bytes[p];
                if !(48..48 + 64).contains(&byte) {
                    return Err(Error::MaskEncoding(format!(
                        "invalid character {:?} at offset {p}",
                        char::from(byte)
                    )));
                }
                if k >= 12 {
                    return Err(Error::MaskEncoding("run length overflow".into()));
                }
                let chunk = i64::from(byte - 48);
                x |= (chunk & 0x1f) << (5 * k);
                p += 1;
                k += 1;
                if chunk & 0x20 == 0 {
                    if chunk & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
                if p >= bytes.len() {
                    return Err(Error::MaskEncoding("truncated run".into()));
                }
            }
            if counts.len() > 2 {
                x += counts[counts.len() - 2];
            }
            if !(0..=i64::from(u32::MAX)).contains(&x) {
                return Err(Error::MaskEncoding(format!("run length {x} out of range")));
            }
            counts.push(x);
        }
        let counts: Vec<u32> = counts.into_iter().map(|c| c as u32).collect();
        RleMask::from_counts(height, width, &counts)
    }

    fn check_same_shape(&self, other: &RleMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::IncompatibleMask(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &RleMask) -> Result<u64> {
        self.check_same_shape(other)?;
        let (a, b) = (self.foreground_runs(), other.foreground_runs());
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                total += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    /// Mask IoU; zero when both masks are empty.
    pub fn iou(&self, other: &RleMask) -> Result<f64> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return Ok(0.0);
        }
        Ok(inter as f64 / union as f64)
    }

    /// Visits each foreground run split at column boundaries as
    /// `(col, row_start, row_end_exclusive)`.
    fn for_each_column_segment(&self, mut f: impl FnMut(u64, u64, u64)) {
        let h = u64::from(self.height);
        for (mut s, e) in self.foreground_runs() {
            while s < e {
                let col = s / h;
                let seg_end = e.min((col + 1) * h);
                f(col, s - col * h, seg_end - col * h);
                s = seg_end;
            }
        }
    }

    /// Mean position of foreground pixel centers.
    pub fn centroid(&self) -> Result<Point> {
        let (mut n, mut sx, mut sy) = (0u64, 0.0f64, 0.0f64);
        self.for_each_column_segment(|col, r0, r1| {
            let k = r1 - r0;
            n += k;
            sx += k as f64 * (col as f64 + 0.5);
            sy += k as f64 * (r0 + r1) as f64 / 2.0;
        });
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(Point::new(sx / n as f64, sy / n as f64))
    }

    /// Tight pixel extent of the foreground as a continuous rectangle
    /// (`[c_min, r_min, c_max + 1, r_max + 1]`).
    pub fn pixel_bounds(&self) -> Result<RectRegion> {
        let mut ext: Option<(u64, u64, u64, u64)> = None;
        self.for_each_column_segment(|col, r0, r1| {
            let (c0, rr0, c1, rr1) = ext.unwrap_or((col, r0, col, r1 - 1));
            ext = Some((c0.min(col), rr0.min(r0), c1.max(col), rr1.max(r1 - 1)));
        });
        let (c0, r0, c1, r1) = ext.ok_or(Error::EmptyMask)?;
        Ok(RectRegion::new(
            c0 as f64,
            r0 as f64,
            (c1 + 1) as f64,
            (r1 + 1) as f64,
        ))
    }

    /// Diagonal of the inclusive foreground bounding box.
    pub fn bbox_diagonal(&self) -> Result<f64> {
        let b = self.pixel_bounds()?;
        Ok(b.width().hypot(b.height()))
    }
}

/// Rasterizes a box onto an `height x width` canvas. A pixel is foreground
/// when its center falls inside the box, with left/top edges inclusive and
/// right/bottom edges exclusive.
pub fn box_fill_mask(b: &GeomBox, height: u32, width: u32) -> Result<RleMask> {
    b.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::MaskEncoding("mask must be at least 1x1".into()));
    }
    let h = u64::from(height);
    let rows_for = |lo: f64, hi: f64| -> (u64, u64) {
        let r0 = (lo - 0.5).ceil().clamp(0.0, h as f64) as u64;
        let r1 = (hi - 0.5).ceil().clamp(0.0, h as f64) as u64;
        (r0, r1.max(r0))
    };
    let column_span: Box<dyn Fn(f64) -> Option<(u64, u64)>> = match *b {
        GeomBox::Hbb { x1, y1, x2, y2 } => Box::new(move |x| {
            (x >= x1 && x < x2).then(|| rows_for(y1, y2))
        }),
        GeomBox::Obb(v) => {
            let bounds = b.bounds();
            Box::new(move |x| {
                if x < bounds.x1 || x >= bounds.x2 {
                    return None;
                }
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..4 {
                    let (p, q) = (v[i], v[(i + 1) % 4]);
                    if (p.x - q.x).abs() < f64::EPSILON {
                        if (p.x - x).abs() < f64::EPSILON {
                            lo = lo.min(p.y.min(q.y));
                            hi = hi.max(p.y.max(q.y));
                        }
                    } else if (p.x <= x && x <= q.x) || (q.x <= x && x <= p.x) {
                        let y = p.y + (x - p.x) * (q.y - p.y) / (q.x - p.x);
                        lo = lo.min(y);
                        hi = hi.max(y);
                    }
                }
                (lo <= hi).then(|| rows_for(lo, hi))
            })
        }
    };
    let mut builder = RunBuilder::default();
    let mut area = 0u64;
    for c in 0..width {
        match column_span(f64::from(c) + 0.5) {
            Some((r0, r1)) if r1 > r0 => {
                builder.push(false, r0);
                builder.push(true, r1 - r0);
                builder.push(false, h - r1);
                area += r1 - r0;
            }
            _ => builder.push(false, h),
        }
    }
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(RleMask {
        height,
        width,
        counts: builder.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: u32, w: u32, on: &[(u32, u32)]) -> BinaryMask {
        let mut m = BinaryMask::new(h, w);
        for &(r, c) in on {
            m.set(r, c, true);
        }
        m
    }

    #[test]
    fn encode_examples() {
        assert_eq!(RleMask::encode(&grid(2, 2, &[(0, 0)])).counts(), &[0, 1, 3]);
        assert_eq!(RleMask::encode(&grid(3, 3, &[])).counts(), &[9]);
        let ones = BinaryMask::from_rows(&vec![vec![true; 3]; 2]).unwrap();
        assert_eq!(RleMask::encode(&ones).counts(), &[0, 6]);
    }

    #[test]
    fn compress_examples() {
        let m = RleMask::from_counts(2, 2, &[0, 1, 3]).unwrap();
        assert_eq!(m.compress(), "013");
        assert_eq!(RleMask::from_counts(3, 3, &[9]).unwrap().compress(), "9");
        assert_eq!(RleMask::decompress("013", 2, 2).unwrap(), m);
    }

    #[test]
    fn canonical_form_merges_zero_runs() {
        let m = RleMask::from_counts(2, 3, &[2, 0, 1, 3, 0]).unwrap();
        assert_eq!(m.counts(), &[3, 3]);
        assert!(RleMask::from_counts(2, 3, &[1, 1]).is_err());
    }

    #[test]
    fn decompress_rejects_garbage() {
        assert!(RleMask::decompress("01~", 2, 2).is_err());
        assert!(RleMask::decompress("0", 2, 2).is_err());
        assert!(RleMask::decompress("", 2, 2).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = RleMask::encode(&grid(3, 3, &[(1, 1)]));
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        let b = RleMask::encode(&grid(3, 3, &[(0, 0)]));
        assert_eq!(a.iou(&b).unwrap(), 0.0);

        let mut left = BinaryMask::new(10, 10);
        let mut top = BinaryMask::new(10, 10);
        for r in 0..10 {
            for c in 0..10 {
                left.set(r, c, c < 5);
                top.set(r, c, r < 5);
            }
        }
        let iou = RleMask::encode(&left).iou(&RleMask::encode(&top)).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);

        let empty = RleMask::encode(&BinaryMask::new(3, 3));
        assert_eq!(empty.iou(&empty).unwrap(), 0.0);
        let other = RleMask::encode(&BinaryMask::new(3, 4));
        assert!(matches!(a.iou(&other), Err(Error::IncompatibleMask(..))));
    }

    #[test]
    fn centroid_examples() {
        let single = RleMask::encode(&grid(10, 10, &[(3, 7)]));
        assert_eq!(single.centroid().unwrap(), Point::new(7.5, 3.5));
        let full = RleMask::from_counts(10, 10, &[0, 100]).unwrap();
        assert_eq!(full.centroid().unwrap(), Point::new(5.0, 5.0));
        let pair = RleMask::encode(&grid(10, 10, &[(0, 0), (0, 9)]));
        assert_eq!(pair.centroid().unwrap(), Point::new(5.0, 0.5));
        let empty = RleMask::from_counts(2, 2, &[4]).unwrap();
        assert!(matches!(empty.centroid(), Err(Error::EmptyMask)));
    }

    #[test]
    fn diagonal_examples() {
        let single = RleMask::encode(&grid(5, 5, &[(2, 3)]));
        assert!((single.bbox_diagonal().unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let full = RleMask::from_counts(4, 3, &[0, 12]).unwrap();
        assert_eq!(full.bbox_diagonal().unwrap(), 5.0);
        let corners = RleMask::encode(&grid(5, 5, &[(0, 0), (2, 2)]));
        assert!((corners.bbox_diagonal().unwrap() - 18f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn box_fill_examples() {
        let m = box_fill_mask(&GeomBox::hbb(0.0, 0.0, 2.0, 2.0), 4, 4).unwrap();
        assert_eq!(m.area(), 4);
        assert!(m.decode().get(1, 1) && !m.decode().get(2, 2));
        let full = box_fill_mask(&GeomBox::hbb(0.0, 0.0, 4.0, 3.0), 3, 4).unwrap();
        assert_eq!(full.counts(), &[0, 12]);
        assert!(matches!(
            box_fill_mask(&GeomBox::hbb(10.0, 10.0, 12.0, 12.0), 4, 4),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn box_fill_obb_matches_point_test() {
        let diamond = GeomBox::obb([(10.0, 2.0), (18.0, 10.0), (10.0, 18.0), (2.0, 10.0)]);
        let m = box_fill_mask(&diamond, 20, 20).unwrap().decode();
        for r in 0..20 {
            for c in 0..20 {
                let p = Point::new(f64::from(c) + 0.5, f64::from(r) + 0.5);
                let strictly_inside = (p.x - 10.0).abs() + (p.y - 10.0).abs() < 7.9;
                let outside = (p.x - 10.0).abs() + (p.y - 10.0).abs() > 8.1;
                if strictly_inside {
                    assert!(m.get(r, c), "({r},{c}) should be set");
                }
                if outside {
                    assert!(!m.get(r, c), "({r},{c}) should be clear");
                }
            }
        }
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1u32..40, 1u32..40).prop_flat_map(|(h, w)| {
            prop::collection::vec(any::<bool>(), (h * w) as usize).prop_map(move |data| {
                BinaryMask {
                    height: h,
                    width: w,
                    data,
                }
            })
        })
    }

    proptest! {
        #[test]
        fn codec_round_trips(mask in arb_mask()) {
            let rle = RleMask::encode(&mask);
            prop_assert_eq!(rle.decode(), mask.clone());
            let text = rle.compress();
            prop_assert_eq!(RleMask::decompress(&text, mask.height(), mask.width()).unwrap(), rle.clone());
            prop_assert_eq!(rle.area() as usize, mask.count());
        }

        #[test]
        fn iou_symmetric(a in arb_mask(), seed in any::<u64>()) {
            let mut b = a.clone();
            let n = b.data.len();
            b.data[(seed as usize) % n] ^= true;
            let (ra, rb) = (RleMask::encode(&a), RleMask::encode(&b));
            prop_assert_eq!(ra.iou(&rb).unwrap(), rb.iou(&ra).unwrap());
            prop_assert!(ra.iou(&rb).unwrap() < 1.0);
        }

        #[test]
        fn box_fill_self_consistent(x in 0.0f64..50.0, y in 0.0f64..50.0, w in 1.0f64..30.0, h in 1.0f64..30.0) {
            let b = GeomBox::hbb(x, y, x + w, y + h);
            if let Ok(m) = box_fill_mask(&b, 64, 64) {
                prop_assert_eq!(m.iou(&m).unwrap(), 1.0);
                let c = m.centroid().unwrap();
                prop_assert!(b.bounds().contains(c));
            }
        }
    }
}
