//! Event data model, camera intrinsics and file ingestion.
//!
//! Timestamps are stored as 64-bit microsecond integers and converted to
//! seconds only at math boundaries, so long recordings do not lose precision.

use std::collections::BinaryHeap;
use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

/// Events arriving out of order by more than this many positions are rejected
/// by the default parser.
pub const DEFAULT_REORDER_CAPACITY: usize = 1000;

/// A single brightness-change sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    /// Timestamp in microseconds.
    pub t_us: i64,
    /// Sign of the brightness change, +1 or -1.
    pub polarity: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t_us: i64, polarity: i8) -> Self {
        Self { x, y, t_us, polarity }
    }

    /// Timestamp in seconds.
    #[inline]
    pub fn t_s(&self) -> f64 {
        self.t_us as f64 * 1e-6
    }

    /// Pixel coordinates as a float vector.
    #[inline]
    pub fn px(&self) -> Vector2<f64> {
        Vector2::new(self.x as f64, self.y as f64)
    }
}

/// Errors produced while constructing or validating an [`EventSlice`].
#[derive(Debug)]
pub enum SliceError {
    UnsortedEvents { index: usize },
    EventOutOfBounds { index: usize },
    EventOutsideTimeRange { index: usize },
    InvalidTimeRange,
}

impl fmt::Display for SliceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SliceError::UnsortedEvents { index } => {
                write!(f, "event {index} breaks non-decreasing timestamp order")
            }
            SliceError::EventOutOfBounds { index } => {
                write!(f, "event {index} lies outside the sensor area")
            }
            SliceError::EventOutsideTimeRange { index } => {
                write!(f, "event {index} lies outside [t_begin, t_end]")
            }
            SliceError::InvalidTimeRange => write!(f, "t_end must be >= t_begin"),
        }
    }
}

impl std::error::Error for SliceError {}

/// An ordered sequence of events with its time window and sensor dimensions.
#[derive(Debug, Clone)]
pub struct EventSlice {
    events: Vec<Event>,
    t_begin_s: f64,
    t_end_s: f64,
    width: u32,
    height: u32,
}

impl EventSlice {
    /// Builds a slice, validating ordering, sensor bounds and the time window.
    pub fn new(
        events: Vec<Event>,
        t_begin_s: f64,
        t_end_s: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, SliceError> {
        if t_end_s < t_begin_s {
            return Err(SliceError::InvalidTimeRange);
        }
        let mut prev = i64::MIN;
        for (i, e) in events.iter().enumerate() {
            if e.t_us < prev {
                return Err(SliceError::UnsortedEvents { index: i });
            }
            prev = e.t_us;
            if e.x as u32 >= width || e.y as u32 >= height {
                return Err(SliceError::EventOutOfBounds { index: i });
            }
            let t = e.t_s();
            // Tolerate one microsecond of rounding at the window edges.
            if t < t_begin_s - 1e-6 || t > t_end_s + 1e-6 {
                return Err(SliceError::EventOutsideTimeRange { index: i });
            }
        }
        Ok(Self { events, t_begin_s, t_end_s, width, height })
    }

    /// Empty slice covering a zero-length window.
    pub fn empty(width: u32, height: u32) -> Self {
        Self { events: Vec::new(), t_begin_s: 0.0, t_end_s: 0.0, width, height }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t_begin_s(&self) -> f64 {
        self.t_begin_s
    }

    pub fn t_end_s(&self) -> f64 {
        self.t_end_s
    }

    pub fn duration_s(&self) -> f64 {
        self.t_end_s - self.t_begin_s
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Events with `t` in `[t0, t1]` whose pixel lies inside `bbox` expanded
    /// by `margin` pixels. Ordering is preserved; an empty result is valid.
    pub fn crop_to_volume(
        &self,
        bbox: &BoundingBox,
        t0_s: f64,
        t1_s: f64,
        margin_px: f64,
    ) -> EventSlice {
        assert!(t1_s > t0_s, "crop window must have positive duration");
        let x_lo = bbox.x_min - margin_px;
        let x_hi = bbox.x_max + margin_px;
        let y_lo = bbox.y_min - margin_px;
        let y_hi = bbox.y_max + margin_px;
        let events: Vec<Event> = self
            .events
            .iter()
            .filter(|e| {
                let t = e.t_s();
                let x = e.x as f64;
                let y = e.y as f64;
                t >= t0_s && t <= t1_s && x >= x_lo && x <= x_hi && y >= y_lo && y <= y_hi
            })
            .copied()
            .collect();
        EventSlice {
            events,
            t_begin_s: t0_s,
            t_end_s: t1_s,
            width: self.width,
            height: self.height,
        }
    }
}

/// Pinhole camera intrinsics (pre-rectified; no distortion model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy, width, height }
    }

    /// Pixel coordinates to normalized image coordinates.
    #[inline]
    pub fn pixel_to_normalized(&self, px: Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    /// Normalized image coordinates back to pixel coordinates.
    #[inline]
    pub fn normalized_to_pixel(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(p.x * self.fx + self.cx, p.y * self.fy + self.cy)
    }

    pub fn from_json_reader<R: std::io::Read>(reader: R) -> Result<Self, ParseError> {
        let intr: CameraIntrinsics =
            serde_json::from_reader(reader).map_err(|e| ParseError::Json(e.to_string()))?;
        if intr.fx <= 0.0 || intr.fy <= 0.0 {
            return Err(ParseError::Json("fx and fy must be positive".into()));
        }
        Ok(intr)
    }
}

/// Axis-aligned detection box at a point in time. Fractional pixels allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub t_s: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub track_id: i64,
}

impl BoundingBox {
    pub fn new(t_s: f64, x_min: f64, y_min: f64, x_max: f64, y_max: f64, track_id: i64) -> Self {
        assert!(x_min < x_max && y_min < y_max, "box must have positive area");
        Self { t_s, x_min, y_min, x_max, y_max, track_id }
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn corners(&self) -> [Vector2<f64>; 4] {
        [
            Vector2::new(self.x_min, self.y_min),
            Vector2::new(self.x_max, self.y_min),
            Vector2::new(self.x_max, self.y_max),
            Vector2::new(self.x_min, self.y_max),
        ]
    }
}

/// Errors from file ingestion.
#[derive(Debug)]
pub enum ParseError {
    Io(std::io::Error),
    /// Line could not be parsed as `t_us x y p`.
    MalformedLine { line: usize },
    /// Event pixel outside the sensor area.
    EventOutOfBounds { line: usize },
    /// Timestamps out of order beyond the reorder buffer.
    NonMonotoneTimestamps { line: usize },
    Json(String),
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Io(e) => write!(f, "i/o error: {e}"),
            ParseError::MalformedLine { line } => write!(f, "malformed line {line}"),
            ParseError::EventOutOfBounds { line } => {
                write!(f, "event outside sensor bounds at line {line}")
            }
            ParseError::NonMonotoneTimestamps { line } => {
                write!(f, "non-monotone timestamps at line {line}")
            }
            ParseError::Json(msg) => write!(f, "json error: {msg}"),
        }
    }
}

impl std::error::Error for ParseError {}

impl From<std::io::Error> for ParseError {
    fn from(e: std::io::Error) -> Self {
        ParseError::Io(e)
    }
}

// Min-heap entry keyed on (t_us, y, x, polarity) for a stable total order.
#[derive(PartialEq, Eq)]
struct HeapEntry {
    event: Event,
    line: usize,
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let a = &self.event;
        let b = &other.event;
        // Reversed: BinaryHeap is a max-heap and we want the smallest first.
        (b.t_us, b.y, b.x, b.polarity).cmp(&(a.t_us, a.y, a.x, a.polarity))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Parses the text event format, one event per line: `t_us x y p`, p in {0,1}
/// (0 maps to polarity -1). Events may arrive out of order by up to
/// `reorder_capacity` positions; the output is sorted by timestamp.
pub fn parse_events<R: BufRead>(
    reader: R,
    width: u32,
    height: u32,
    reorder_capacity: usize,
) -> Result<EventSlice, ParseError> {
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(reorder_capacity + 1);
    let mut events: Vec<Event> = Vec::new();
    let mut last_popped = i64::MIN;

    let pop_one = |heap: &mut BinaryHeap<HeapEntry>,
                   events: &mut Vec<Event>,
                   last_popped: &mut i64|
     -> Result<(), ParseError> {
        let entry = heap.pop().expect("heap non-empty");
        if entry.event.t_us < *last_popped {
            return Err(ParseError::NonMonotoneTimestamps { line: entry.line });
        }
        *last_popped = entry.event.t_us;
        events.push(entry.event);
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let event = (|| {
            let t_us: i64 = parts.next()?.parse().ok()?;
            let x: u16 = parts.next()?.parse().ok()?;
            let y: u16 = parts.next()?.parse().ok()?;
            let p: u8 = parts.next()?.parse().ok()?;
            if parts.next().is_some() || p > 1 || t_us < 0 {
                return None;
            }
            let polarity = if p == 1 { 1 } else { -1 };
            Some(Event::new(x, y, t_us, polarity))
        })()
        .ok_or(ParseError::MalformedLine { line: line_no })?;

        if event.x as u32 >= width || event.y as u32 >= height {
            return Err(ParseError::EventOutOfBounds { line: line_no });
        }

        heap.push(HeapEntry { event, line: line_no });
        if heap.len() > reorder_capacity {
            pop_one(&mut heap, &mut events, &mut last_popped)?;
        }
    }
    while !heap.is_empty() {
        pop_one(&mut heap, &mut events, &mut last_popped)?;
    }

    let (t_begin_s, t_end_s) = match (events.first(), events.last()) {
        (Some(first), Some(last)) => (first.t_s(), last.t_s()),
        _ => (0.0, 0.0),
    };
    EventSlice::new(events, t_begin_s, t_end_s, width, height)
        .map_err(|_| ParseError::MalformedLine { line: 0 })
}

/// Writes a slice in the text event format.
pub fn write_events<W: Write>(slice: &EventSlice, mut writer: W) -> std::io::Result<()> {
    for e in slice.events() {
        let p = if e.polarity > 0 { 1 } else { 0 };
        writeln!(writer, "{} {} {} {}", e.t_us, e.x, e.y, p)?;
    }
    Ok(())
}

/// Parses a bounding-box track: CSV rows `t_s,x_min,y_min,x_max,y_max,track_id`.
/// A leading header row is skipped if present.
pub fn parse_bbox_track<R: BufRead>(reader: R) -> Result<Vec<BoundingBox>, ParseError> {
    let mut boxes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (line_no == 1 && trimmed.starts_with("t_s")) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let parsed = (|| {
            if fields.len() != 6 {
                return None;
            }
            let t_s: f64 = fields[0].trim().parse().ok()?;
            let x_min: f64 = fields[1].trim().parse().ok()?;
            let y_min: f64 = fields[2].trim().parse().ok()?;
            let x_max: f64 = fields[3].trim().parse().ok()?;
            let y_max: f64 = fields[4].trim().parse().ok()?;
            let track_id: i64 = fields[5].trim().parse().ok()?;
            if x_min >= x_max || y_min >= y_max {
                return None;
            }
            Some(BoundingBox { t_s, x_min, y_min, x_max, y_max, track_id })
        })()
        .ok_or(ParseError::MalformedLine { line: line_no })?;
        boxes.push(parsed);
    }
    boxes.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn parse_two_events() {
        let slice = parse_events(Cursor::new("1000 10 20 1\n1500 11 20 0"), 640, 480, 1000)
            .expect("parse");
        assert_eq!(slice.len(), 2);
        assert_eq!(slice.events()[0].polarity, 1);
        assert_eq!(slice.events()[1].polarity, -1);
        assert!((slice.events()[0].t_s() - 1.0e-3).abs() < 1e-12);
        assert!((slice.events()[1].t_s() - 1.5e-3).abs() < 1e-12);
    }

    #[test]
    fn parse_empty_file() {
        let slice = parse_events(Cursor::new(""), 640, 480, 1000).expect("parse");
        assert!(slice.is_empty());
        assert_eq!(slice.t_begin_s(), 0.0);
        assert_eq!(slice.t_end_s(), 0.0);
    }

    #[test]
    fn parse_rejects_malformed_line() {
        let err = parse_events(Cursor::new("abc"), 640, 480, 1000).unwrap_err();
        match err {
            ParseError::MalformedLine { line } => assert_eq!(line, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn parse_rejects_bad_polarity_and_extra_fields() {
        assert!(matches!(
            parse_events(Cursor::new("10 1 1 2"), 640, 480, 1000),
            Err(ParseError::MalformedLine { line: 1 })
        ));
        assert!(matches!(
            parse_events(Cursor::new("10 1 1 1 7"), 640, 480, 1000),
            Err(ParseError::MalformedLine { line: 1 })
        ));
    }

    #[test]
    fn parse_reorders_within_buffer() {
        let slice = parse_events(Cursor::new("1500 1 1 1\n1000 2 2 0\n2000 3 3 1"), 640, 480, 10)
            .expect("parse");
        let ts: Vec<i64> = slice.events().iter().map(|e| e.t_us).collect();
        assert_eq!(ts, vec![1000, 1500, 2000]);
    }

    #[test]
    fn parse_rejects_disorder_beyond_buffer() {
        // With capacity 1 the first event is popped immediately, so an earlier
        // timestamp two lines later must be rejected.
        let err = parse_events(Cursor::new("1500 1 1 1\n1600 1 1 1\n1000 2 2 0"), 640, 480, 1)
            .unwrap_err();
        assert!(matches!(err, ParseError::NonMonotoneTimestamps { line: 3 }));
    }

    #[test]
    fn parse_rejects_out_of_bounds() {
        let err = parse_events(Cursor::new("10 640 10 1"), 640, 480, 1000).unwrap_err();
        assert!(matches!(err, ParseError::EventOutOfBounds { line: 1 }));
    }

    #[test]
    fn parse_serialize_roundtrip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = 0i64;
        let events: Vec<Event> = (0..500)
            .map(|_| {
                t += rng.random_range(1..2000);
                Event::new(
                    rng.random_range(0..640),
                    rng.random_range(0..480),
                    t,
                    if rng.random_bool(0.5) { 1 } else { -1 },
                )
            })
            .collect();
        let slice =
            EventSlice::new(events, 0.0, t as f64 * 1e-6, 640, 480).expect("valid slice");
        let mut buf = Vec::new();
        write_events(&slice, &mut buf).unwrap();
        let reparsed = parse_events(Cursor::new(&buf), 640, 480, 1000).expect("reparse");
        assert_eq!(slice.events(), reparsed.events());
        let mut buf2 = Vec::new();
        write_events(&reparsed, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn normalized_at_principal_point() {
        let p = intr().pixel_to_normalized(Vector2::new(320.0, 240.0));
        assert_eq!(p, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn normalized_unit_focal_offset() {
        let p = intr().pixel_to_normalized(Vector2::new(420.0, 240.0));
        assert_eq!(p, Vector2::new(1.0, 0.0));
    }

    #[test]
    fn pixel_normalized_roundtrip() {
        let intr = CameraIntrinsics::new(231.5, 229.8, 311.2, 247.9, 640, 480);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let back = intr.normalized_to_pixel(intr.pixel_to_normalized(px));
            assert!((back - px).norm() < 1e-12);
        }
    }

    #[test]
    fn crop_whole_sensor_is_identity() {
        let events = vec![Event::new(5, 5, 100, 1), Event::new(10, 10, 200, -1)];
        let slice = EventSlice::new(events, 0.0, 1.0, 640, 480).unwrap();
        let bbox = BoundingBox::new(0.0, 0.0, 0.0, 639.0, 479.0, 0);
        let cropped = slice.crop_to_volume(&bbox, 0.0, 1.0, 0.0);
        assert_eq!(cropped.events(), slice.events());
    }

    #[test]
    fn crop_outside_area_is_empty() {
        let events = vec![Event::new(5, 5, 100, 1)];
        let slice = EventSlice::new(events, 0.0, 1.0, 640, 480).unwrap();
        let bbox = BoundingBox::new(0.0, 600.0, 400.0, 601.0, 401.0, 0);
        assert!(slice.crop_to_volume(&bbox, 0.0, 1.0, 0.0).is_empty());
    }

    #[test]
    fn crop_matches_brute_force_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = 0i64;
        let events: Vec<Event> = (0..100)
            .map(|_| {
                t += rng.random_range(1..1000);
                Event::new(rng.random_range(0..100), rng.random_range(0..100), t, 1)
            })
            .collect();
        let slice = EventSlice::new(events.clone(), 0.0, 1.0, 100, 100).unwrap();
        let bbox = BoundingBox::new(0.0, 20.0, 20.0, 60.0, 60.0, 0);
        let (t0, t1, margin) = (0.0, 0.04, 2.0);
        let cropped = slice.crop_to_volume(&bbox, t0, t1, margin);

        let expected: Vec<Event> = events
            .iter()
            .filter(|e| {
                e.t_s() >= t0
                    && e.t_s() <= t1
                    && e.x as f64 >= 18.0
                    && e.x as f64 <= 62.0
                    && e.y as f64 >= 18.0
                    && e.y as f64 <= 62.0
            })
            .copied()
            .collect();
        assert_eq!(cropped.events(), expected.as_slice());
    }

    #[test]
    fn crop_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut t = 0i64;
        let events: Vec<Event> = (0..200)
            .map(|_| {
                t += rng.random_range(1..500);
                Event::new(rng.random_range(0..64), rng.random_range(0..48), t, 1)
            })
            .collect();
        let slice = EventSlice::new(events, 0.0, 0.2, 64, 48).unwrap();
        let bbox = BoundingBox::new(0.0, 10.0, 10.0, 40.0, 30.0, 0);
        let once = slice.crop_to_volume(&bbox, 0.01, 0.09, 2.0);
        let twice = once.crop_to_volume(&bbox, 0.01, 0.09, 2.0);
        assert_eq!(once.events(), twice.events());
    }

    #[test]
    fn bbox_track_roundtrip() {
        let csv = "0.5,10,20,30,40,1\n0.1,5,5,15,25,1\n";
        let boxes = parse_bbox_track(Cursor::new(csv)).expect("parse");
        assert_eq!(boxes.len(), 2);
        // Sorted by time.
        assert!(boxes[0].t_s < boxes[1].t_s);
        assert_eq!(boxes[1].x_max, 30.0);
    }

    #[test]
    fn intrinsics_json_roundtrip() {
        let json = r#"{"fx":320.0,"fy":321.5,"cx":319.5,"cy":239.5,"width":640,"height":480}"#;
        let intr = CameraIntrinsics::from_json_reader(Cursor::new(json)).expect("parse");
        assert_eq!(intr.fx, 320.0);
        assert_eq!(intr.height, 480);
    }
}
