//! Volume-tracing tables and keypoint-to-mask rasterisation.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BinaryMask;

/// One traced chord, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// All tracing rows of one annotated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TracingRecord {
    pub video_id: String,
    pub frame_index: usize,
    /// First row of the frame in table order.
    pub long_axis: Segment,
    /// Remaining rows (the cross-chamber chords).
    pub chords: Vec<Segment>,
}

impl TracingRecord {
    /// Segments used for mask inference.
    pub fn segments(&self, include_long_axis: bool) -> Vec<Segment> {
        let mut s = Vec::with_capacity(self.chords.len() + 1);
        if include_long_axis {
            s.push(self.long_axis);
        }
        s.extend_from_slice(&self.chords);
        s
    }
}

/// Strip a trailing extension such as `.avi` from a file name.
pub fn video_stem(name: &str) -> &str {
    let name = name.trim();
    match name.rfind('.') {
        Some(i) if i > 0 && !name[i + 1..].contains('/') => &name[..i],
        _ => name,
    }
}

const TRACING_COLUMNS: [&str; 6] = ["FileName", "X1", "Y1", "X2", "Y2", "Frame"];

/// Parse a `FileName,X1,Y1,X2,Y2,Frame` table.
///
/// Records are grouped by video (extension stripped) and frame. Row numbers
/// in errors are 1-based file lines, the header being line 1.
pub fn parse_tracings<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<TracingRecord>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 6];
    for (i, name) in TRACING_COLUMNS.iter().enumerate() {
        col[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut grouped: BTreeMap<(String, usize), Vec<Segment>> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            row: line,
            reason: e.to_string(),
        })?;
        let field = |k: usize| row.get(col[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedRow {
                    row: line,
                    reason: format!("{} = `{}` is not a number", TRACING_COLUMNS[k], field(k)),
                })
        };
        let seg = Segment {
            x1: num(1)?,
            y1: num(2)?,
            x2: num(3)?,
            y2: num(4)?,
        };
        let frame = field(5).parse::<usize>().map_err(|_| Error::MalformedRow {
            row: line,
            reason: format!("Frame = `{}` is not a non-negative integer", field(5)),
        })?;
        let id = video_stem(field(0)).to_string();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                row: line,
                reason: "empty FileName".into(),
            });
        }
        grouped.entry((id, frame)).or_default().push(seg);
    }

    let mut out: BTreeMap<String, Vec<TracingRecord>> = BTreeMap::new();
    for ((video_id, frame_index), mut segs) in grouped {
        let long_axis = segs.remove(0);
        out.entry(video_id.clone()).or_default().push(TracingRecord {
            video_id,
            frame_index,
            long_axis,
            chords: segs,
        });
    }
    Ok(out)
}

/// Signed shoelace area of a closed polygon.
pub fn shoelace_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

/// Closed polygon through chord endpoints: left endpoints (smaller x) in
/// increasing y, then right endpoints in decreasing y. Chords are sorted
/// first, so the result does not depend on input order.
pub fn chord_polygon(segments: &[Segment], height: usize, width: usize) -> Vec<(f64, f64)> {
    let cx = |v: f64| v.clamp(0.0, (width - 1) as f64);
    let cy = |v: f64| v.clamp(0.0, (height - 1) as f64);
    let mut lefts = Vec::with_capacity(segments.len());
    let mut rights = Vec::with_capacity(segments.len());
    for s in segments {
        let a = (cx(s.x1), cy(s.y1));
        let b = (cx(s.x2), cy(s.y2));
        let (l, r) = if (a.0, a.1) <= (b.0, b.1) { (a, b) } else { (b, a) };
        lefts.push(l);
        rights.push(r);
    }
    let key = |p: &(f64, f64)| (p.1, p.0);
    lefts.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    rights.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap());
    lefts.extend(rights);
    lefts
}

/// Scanline fill of a closed polygon over pixel centres at integer
/// coordinates; boundary pixels are included.
pub fn rasterize_polygon(poly: &[(f64, f64)], height: usize, width: usize) -> BinaryMask {
    const EPS: f64 = 1e-9;
    let mut mask = BinaryMask::empty(height, width);
    let n = poly.len();
    let mark_span = |mask: &mut BinaryMask, y: usize, xa: f64, xb: f64| {
        let lo = (xa - EPS).ceil().max(0.0);
        let hi = (xb + EPS).floor().min((width - 1) as f64);
        if lo > hi {
            return;
        }
        for x in lo as usize..=hi as usize {
            mask.set(y, x, true);
        }
    };

    let mut xs = Vec::new();
    for y in 0..height {
        let yf = y as f64;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            if (y0 <= yf && yf < y1) || (y1 <= yf && yf < y0) {
                xs.push(x0 + (yf - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            mark_span(&mut mask, y, pair[0], pair[1]);
        }
    }

    // Closed boundary: the half-open crossing rule above drops pixels lying
    // exactly on bottom edges and horizontal runs.
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        let (ylo, yhi) = (y0.min(y1), y0.max(y1));
        let start = (ylo - EPS).ceil().max(0.0) as usize;
        let end = (yhi + EPS).floor().min((height - 1) as f64);
        if end < 0.0 || (start as f64) > end {
            continue;
        }
        for y in start..=end as usize {
            let yf = y as f64;
            if (y1 - y0).abs() < EPS {
                mark_span(&mut mask, y, x0.min(x1), x0.max(x1));
            } else {
                let x = x0 + (yf - y0) * (x1 - x0) / (y1 - y0);
                if (x - x.round()).abs() < EPS && x.round() >= 0.0 && x.round() <= (width - 1) as f64 {
                    mask.set(y, x.round() as usize, true);
                }
            }
        }
    }
    mask
}

/// Infer a filled LV mask from the traced chords of one frame.
pub fn keypoints_to_mask(
    record: &TracingRecord,
    height: usize,
    width: usize,
    include_long_axis: bool,
) -> Result<BinaryMask> {
    segments_to_mask(&record.segments(include_long_axis), height, width)
}

pub fn segments_to_mask(segments: &[Segment], height: usize, width: usize) -> Result<BinaryMask> {
    if segments.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} segments cannot bound a region (need at least 3)",
            segments.len()
        )));
    }
    let poly = chord_polygon(segments, height, width);
    if shoelace_area(&poly).abs() < 1e-9 {
        return Err(Error::DegenerateGeometry("tracing points are collinear".into()));
    }
    Ok(rasterize_polygon(&poly, height, width))
}
