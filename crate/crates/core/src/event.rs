//! Events, stream segmentation and the binned stage histogram.
//!
//! A stream is cut into `M` half-open windows `[(i-1)T, iT)`; each window is
//! split into `B` equal bins and counted per polarity and pixel, giving a
//! `(2, B, H, W)` tensor. Channel order after flattening is polarity-major
//! (negative first), then bin.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

/// Default saturation applied to histogram values fed to a model.
pub const DEFAULT_CLIP_MAX: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(i8)]
pub enum Polarity {
    Negative = -1,
    Positive = 1,
}

impl Polarity {
    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn from_sign(positive: bool) -> Self {
        if positive {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    pub fn as_i8(self) -> i8 {
        self as i8
    }

    pub fn sign(self) -> f64 {
        f64::from(self as i8)
    }

    /// Plane index in a stage histogram: negative = 0, positive = 1.
    pub fn index(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }
}

/// A single camera event. `t` is in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SensorGeometry {
    pub width: u16,
    pub height: u16,
}

impl SensorGeometry {
    pub fn new(width: u16, height: u16) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "sensor geometry must be non-empty, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn pixels(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }
}

impl std::fmt::Display for SensorGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Segment length `T` and bins per segment `B`, both exact in integer microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentConfig {
    pub segment_us: u64,
    pub bins: usize,
}

impl SegmentConfig {
    pub fn new(segment_us: u64, bins: usize) -> Result<Self> {
        if segment_us == 0 || bins == 0 {
            return Err(Error::InvalidConfig(format!(
                "segment duration and bin count must be positive (T={segment_us}us, B={bins})"
            )));
        }
        if !segment_us.is_multiple_of(bins as u64) {
            return Err(Error::InvalidConfig(format!(
                "segment duration {segment_us}us is not divisible by {bins} bins"
            )));
        }
        Ok(Self { segment_us, bins })
    }

    /// Bin duration `T / B` in microseconds.
    pub fn bin_us(&self) -> u64 {
        self.segment_us / self.bins as u64
    }
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            segment_us: 50_000,
            bins: 10,
        }
    }
}

/// Events of the `index`-th window `[start, end)`, borrowed from the input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventSegment<'a> {
    pub index: usize,
    pub start: u64,
    pub end: u64,
    pub events: &'a [Event],
}

impl EventSegment<'_> {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation<'a> {
    pub segments: Vec<EventSegment<'a>>,
    /// Events at or beyond the last window's right edge.
    pub dropped: usize,
}

/// Checks ordering and bounds of a stream.
pub fn validate_events(events: &[Event], geometry: SensorGeometry) -> Result<()> {
    let mut prev = 0u64;
    for (index, e) in events.iter().enumerate() {
        if e.t < prev {
            return Err(Error::Unsorted {
                index,
                t: e.t,
                prev,
            });
        }
        if !geometry.contains(e.x, e.y) {
            return Err(Error::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        prev = e.t;
    }
    Ok(())
}

/// Splits a sorted stream into `num_segments` windows starting at time zero.
pub fn segment_stream<'a>(
    events: &'a [Event],
    geometry: SensorGeometry,
    config: SegmentConfig,
    num_segments: usize,
) -> Result<Segmentation<'a>> {
    segment_stream_from(events, geometry, config, 1, num_segments)
}

/// Like [`segment_stream`] but the first window is `first_index` (1-based),
/// i.e. starts at `(first_index - 1) * T`. Used when continuing a stream.
pub fn segment_stream_from<'a>(
    events: &'a [Event],
    geometry: SensorGeometry,
    config: SegmentConfig,
    first_index: usize,
    num_segments: usize,
) -> Result<Segmentation<'a>> {
    if num_segments == 0 || first_index == 0 {
        return Err(Error::InvalidConfig(format!(
            "need at least one segment with a 1-based start index (M={num_segments}, first={first_index})"
        )));
    }
    validate_events(events, geometry)?;

    let t_seg = config.segment_us;
    let start = (first_index as u64 - 1) * t_seg;
    if let Some(e) = events.first() {
        if e.t < start {
            return Err(Error::StaleEvent {
                index: 0,
                t: e.t,
                start,
            });
        }
    }

    let mut segments = Vec::with_capacity(num_segments);
    let mut rest = events;
    for k in 0..num_segments {
        let index = first_index + k;
        let seg_start = start + k as u64 * t_seg;
        let seg_end = seg_start + t_seg;
        let cut = rest.partition_point(|e| e.t < seg_end);
        let (head, tail) = rest.split_at(cut);
        segments.push(EventSegment {
            index,
            start: seg_start,
            end: seg_end,
            events: head,
        });
        rest = tail;
    }

    Ok(Segmentation {
        segments,
        dropped: rest.len(),
    })
}

/// Per-segment event counts `s_i(p, tau, y, x)`, polarity-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageHistogram {
    counts: Array4<u32>,
    pub clip_max: Option<u32>,
}

impl StageHistogram {
    pub fn zeros(geometry: SensorGeometry, bins: usize) -> Self {
        Self {
            counts: Array4::zeros((2, bins, geometry.height(), geometry.width())),
            clip_max: None,
        }
    }

    pub fn with_clip(mut self, clip_max: Option<u32>) -> Self {
        self.clip_max = clip_max;
        self
    }

    /// Raw counts, never saturated.
    pub fn counts(&self) -> &Array4<u32> {
        &self.counts
    }

    pub fn bins(&self) -> usize {
        self.counts.dim().1
    }

    pub fn height(&self) -> usize {
        self.counts.dim().2
    }

    pub fn width(&self) -> usize {
        self.counts.dim().3
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Total (unsigned) number of events in bin `bin` over the whole frame.
    pub fn bin_count(&self, bin: usize) -> Result<u64> {
        self.check_bin(bin)?;
        let mut n = 0u64;
        for p in 0..2 {
            n += self
                .counts
                .slice(ndarray::s![p, bin, .., ..])
                .iter()
                .map(|&c| u64::from(c))
                .sum::<u64>();
        }
        Ok(n)
    }

    fn check_bin(&self, bin: usize) -> Result<()> {
        if bin >= self.bins() {
            return Err(Error::BinOutOfRange {
                bin,
                bins: self.bins(),
            });
        }
        Ok(())
    }
}

/// Bin index of timestamp `t` within a window starting at `start`, clamped to `B - 1`.
#[inline]
pub fn bin_index(t: u64, start: u64, config: SegmentConfig) -> usize {
    let tau = (t.saturating_sub(start) / config.bin_us()) as usize;
    tau.min(config.bins - 1)
}

pub fn build_histogram(
    segment: &EventSegment<'_>,
    geometry: SensorGeometry,
    config: SegmentConfig,
) -> StageHistogram {
    let mut hist = StageHistogram::zeros(geometry, config.bins);
    build_histogram_into(&mut hist, segment, config);
    hist
}

/// Refills `hist` in place so long streams can reuse one allocation.
///
/// `hist` must have been created for the segment's geometry and `config.bins`.
pub fn build_histogram_into(
    hist: &mut StageHistogram,
    segment: &EventSegment<'_>,
    config: SegmentConfig,
) {
    assert_eq!(hist.bins(), config.bins, "histogram bin count mismatch");
    let (_, bins, h, w) = hist.counts.dim();
    let plane = h * w;
    let counts = hist
        .counts
        .as_slice_mut()
        .expect("histogram storage is contiguous");
    counts.fill(0);
    let bin_us = config.bin_us();
    for e in segment.events {
        let tau = (e.t.saturating_sub(segment.start) / bin_us) as usize;
        let tau = tau.min(bins - 1);
        let idx = (e.p.index() * bins + tau) * plane + e.y as usize * w + e.x as usize;
        counts[idx] += 1;
    }
}

/// Flattens to `(2B, H, W)` reals, channel `p_idx * B + tau`, saturating at `clip_max` if set.
pub fn flatten_histogram(hist: &StageHistogram) -> Array3<f32> {
    let (_, bins, h, w) = hist.counts.dim();
    let clip = hist.clip_max.unwrap_or(u32::MAX);
    let data: Vec<f32> = hist.counts.iter().map(|&c| c.min(clip) as f32).collect();
    Array3::from_shape_vec((2 * bins, h, w), data).expect("shape preserved by flattening")
}

/// Positive minus negative counts in one bin, from unclipped counts.
pub fn signed_bin_accumulation(hist: &StageHistogram, bin: usize) -> Result<Array2<i32>> {
    hist.check_bin(bin)?;
    let neg = hist.counts.slice(ndarray::s![0, bin, .., ..]);
    let pos = hist.counts.slice(ndarray::s![1, bin, .., ..]);
    let mut out = Array2::<i32>::zeros((hist.height(), hist.width()));
    ndarray::Zip::from(&mut out)
        .and(&pos)
        .and(&neg)
        .for_each(|o, &p, &n| *o = p as i32 - n as i32);
    Ok(out)
}
