//! Pseudo-grayscale intensity estimation from events.
//!
//! Two update rules share one resumable state:
//!
//! * [`IntensityMethod::PerEventDecay`]: each event decays only its own pixel
//!   by `exp(-alpha * dt_pix)` (time since that pixel's previous event) and
//!   then adds `p * C`. Pixels without events never change, so a moving
//!   object leaves a permanent trail of `(exp(-alpha * dt_pix) - 1) * C`.
//! * [`IntensityMethod::AdaptiveBatch`]: once per bin of length `dt`, every
//!   pixel becomes `exp(-alpha * dt * n / N) * old + E * C`, where `n` is the
//!   global event count in the bin and `E` the per-pixel signed count. Bins
//!   without events leave the frame untouched.
//!
//! Frames accumulate in `f64` and are emitted as `f32` snapshots at segment
//! boundaries.

use ndarray::Array2;

use crate::error::{shape_mismatch, Error, Result};
use crate::event::{
    build_histogram_into, segment_stream_from, signed_bin_accumulation, Event, SegmentConfig,
    SensorGeometry, StageHistogram,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IntensityMethod {
    PerEventDecay,
    AdaptiveBatch,
}

impl IntensityMethod {
    pub fn code(self) -> u8 {
        match self {
            IntensityMethod::PerEventDecay => 0,
            IntensityMethod::AdaptiveBatch => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(IntensityMethod::PerEventDecay),
            1 => Some(IntensityMethod::AdaptiveBatch),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityConfig {
    pub method: IntensityMethod,
    /// Decay rate in 1/s.
    pub alpha: f64,
    /// Contrast step added per event.
    pub threshold: f64,
    /// Event-count normalizer `N` of the adaptive rule.
    pub normalizer: f64,
    /// Bin length `dt = T / B` in microseconds.
    pub bin_us: u64,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self {
            method: IntensityMethod::AdaptiveBatch,
            alpha: 5.0,
            threshold: 1.0,
            normalizer: 5_000.0,
            bin_us: 5_000,
        }
    }
}

impl IntensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if !(self.normalizer > 0.0 && self.normalizer.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "normalizer must be > 0, got {}",
                self.normalizer
            )));
        }
        if self.bin_us == 0 {
            return Err(Error::InvalidConfig("bin duration must be > 0".into()));
        }
        Ok(())
    }

    /// Per-bin decay factor of the adaptive rule for a global count `n`.
    pub fn batch_decay(&self, n: u64) -> f64 {
        let dt = self.bin_us as f64 * 1e-6;
        (-self.alpha * dt * n as f64 / self.normalizer).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityState {
    pub geometry: SensorGeometry,
    pub config: IntensityConfig,
    pub frame: Array2<f64>,
    /// Stream position in microseconds up to which events have been consumed.
    pub last_update_time: u64,
    /// Per-pixel time of the latest event; only tracked for the per-event rule.
    pub last_event_time: Option<Array2<u64>>,
}

impl IntensityState {
    /// All-zero frame at time zero.
    pub fn new(geometry: SensorGeometry, config: IntensityConfig) -> Result<Self> {
        config.validate()?;
        let shape = (geometry.height(), geometry.width());
        let last_event_time = match config.method {
            IntensityMethod::PerEventDecay => Some(Array2::zeros(shape)),
            IntensityMethod::AdaptiveBatch => None,
        };
        Ok(Self {
            geometry,
            config,
            frame: Array2::zeros(shape),
            last_update_time: 0,
            last_event_time,
        })
    }

    pub fn snapshot(&self) -> Array2<f32> {
        self.frame.mapv(|v| v as f32)
    }
}

/// Applies the per-event decay rule to a sorted batch. The state is left
/// untouched if the batch is rejected.
pub fn update_per_event(state: &mut IntensityState, events: &[Event]) -> Result<()> {
    let geometry = state.geometry;
    let last = state.last_event_time.get_or_insert_with(|| {
        Array2::zeros((geometry.height(), geometry.width()))
    });

    let mut prev = 0u64;
    for (index, e) in events.iter().enumerate() {
        if e.t < prev {
            return Err(Error::Unsorted { index, t: e.t, prev });
        }
        prev = e.t;
        if !geometry.contains(e.x, e.y) {
            return Err(Error::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        let seen = last[[e.y as usize, e.x as usize]];
        if e.t < seen {
            return Err(Error::StaleEvent { index, t: e.t, start: seen });
        }
    }

    let alpha = state.config.alpha;
    let c = state.config.threshold;
    for e in events {
        let idx = [e.y as usize, e.x as usize];
        let dt = (e.t - last[idx]) as f64 * 1e-6;
        let v = &mut state.frame[idx];
        *v = (-alpha * dt).exp() * *v + e.p.sign() * c;
        last[idx] = e.t;
    }
    Ok(())
}

/// Applies one bin of the adaptive batch rule and advances the clock by one bin.
///
/// `n` is the total number of events of either polarity in the bin over the
/// whole frame, so `sum |signed_bin| <= n` must hold.
pub fn update_adaptive_batch(
    state: &mut IntensityState,
    signed_bin: &Array2<i32>,
    n: i64,
) -> Result<()> {
    if n < 0 {
        return Err(Error::NegativeCount(n));
    }
    if signed_bin.dim() != state.frame.dim() {
        return Err(shape_mismatch(
            format!("{:?}", state.frame.dim()),
            format!("{:?}", signed_bin.dim()),
        ));
    }
    let magnitude: u64 = signed_bin.iter().map(|&e| u64::from(e.unsigned_abs())).sum();
    if magnitude > n as u64 {
        return Err(Error::InvalidConfig(format!(
            "signed counts total {magnitude} events but the bin holds only {n}"
        )));
    }

    state.last_update_time += state.config.bin_us;
    if n == 0 {
        return Ok(());
    }
    let decay = state.config.batch_decay(n as u64);
    let c = state.config.threshold;
    ndarray::Zip::from(&mut state.frame)
        .and(signed_bin)
        .for_each(|v, &e| *v = decay * *v + f64::from(e) * c);
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityRun {
    pub state: IntensityState,
    /// One snapshot per processed segment, taken at its right edge.
    pub frames: Vec<Array2<f32>>,
    /// Events past the last processed segment.
    pub dropped: usize,
}

/// Integrates `num_segments` segments of a stream, continuing from `resume`
/// when given (the stream position must then sit on a segment boundary and
/// `events` must not predate it).
pub fn run_sequence(
    events: &[Event],
    geometry: SensorGeometry,
    seg_config: SegmentConfig,
    int_config: IntensityConfig,
    resume: Option<IntensityState>,
    num_segments: usize,
) -> Result<IntensityRun> {
    int_config.validate()?;
    if int_config.method == IntensityMethod::AdaptiveBatch && int_config.bin_us != seg_config.bin_us() {
        return Err(Error::InvalidConfig(format!(
            "intensity bin {}us differs from histogram bin {}us",
            int_config.bin_us,
            seg_config.bin_us()
        )));
    }

    let mut state = match resume {
        None => IntensityState::new(geometry, int_config)?,
        Some(s) => {
            if s.geometry != geometry {
                return Err(Error::ResumeMismatch(format!(
                    "geometry {} vs {}",
                    s.geometry, geometry
                )));
            }
            if s.config != int_config {
                return Err(Error::ResumeMismatch(format!(
                    "config {:?} vs {:?}",
                    s.config, int_config
                )));
            }
            if s.last_update_time % seg_config.segment_us != 0 {
                return Err(Error::ResumeMismatch(format!(
                    "stream position {}us is not a multiple of the segment length {}us",
                    s.last_update_time, seg_config.segment_us
                )));
            }
            s
        }
    };

    let first_index = (state.last_update_time / seg_config.segment_us) as usize + 1;
    let segmentation = segment_stream_from(events, geometry, seg_config, first_index, num_segments)?;

    let mut frames = Vec::with_capacity(num_segments);
    let mut hist = StageHistogram::zeros(geometry, seg_config.bins);
    for segment in &segmentation.segments {
        match int_config.method {
            IntensityMethod::PerEventDecay => {
                update_per_event(&mut state, segment.events)?;
            }
            IntensityMethod::AdaptiveBatch => {
                build_histogram_into(&mut hist, segment, seg_config);
                for bin in 0..seg_config.bins {
                    let signed = signed_bin_accumulation(&hist, bin)?;
                    let n = hist.bin_count(bin)? as i64;
                    update_adaptive_batch(&mut state, &signed, n)?;
                }
            }
        }
        state.last_update_time = segment.end;
        frames.push(state.snapshot());
    }

    Ok(IntensityRun {
        state,
        frames,
        dropped: segmentation.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Polarity;

    fn geo() -> SensorGeometry {
        SensorGeometry::new(4, 3).unwrap()
    }

    fn per_event_cfg() -> IntensityConfig {
        IntensityConfig {
            method: IntensityMethod::PerEventDecay,
            ..IntensityConfig::default()
        }
    }

    #[test]
    fn no_events_leaves_state() {
        let mut s = IntensityState::new(geo(), per_event_cfg()).unwrap();
        s.frame[[1, 1]] = 0.7;
        let before = s.clone();
        update_per_event(&mut s, &[]).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_event_adds_threshold() {
        let cfg = IntensityConfig { threshold: 0.3, ..per_event_cfg() };
        let mut s = IntensityState::new(geo(), cfg).unwrap();
        update_per_event(&mut s, &[Event::new(40_000, 2, 1, Polarity::Positive)]).unwrap();
        assert_eq!(s.frame[[1, 2]], 0.3);
        assert_eq!(s.frame.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn up_down_pair_leaves_residual() {
        let mut s = IntensityState::new(geo(), per_event_cfg()).unwrap();
        let events = [
            Event::new(100_000, 0, 0, Polarity::Positive),
            Event::new(180_000, 0, 0, Polarity::Negative),
        ];
        update_per_event(&mut s, &events).unwrap();
        let expected = ((-5.0f64 * 0.08).exp() - 1.0) * 1.0;
        assert!((s.frame[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn per_event_rejects_unsorted_without_mutation() {
        let mut s = IntensityState::new(geo(), per_event_cfg()).unwrap();
        let before = s.clone();
        let events = [
            Event::new(10, 0, 0, Polarity::Positive),
            Event::new(5, 1, 0, Polarity::Positive),
        ];
        assert!(matches!(update_per_event(&mut s, &events), Err(Error::Unsorted { index: 1, .. })));
        assert_eq!(s, before);
    }

    #[test]
    fn zero_count_bin_is_a_fixed_point() {
        let mut s = IntensityState::new(geo(), IntensityConfig::default()).unwrap();
        s.frame.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.37 - 1.0);
        let before = s.frame.clone();
        update_adaptive_batch(&mut s, &Array2::zeros((3, 4)), 0).unwrap();
        assert_eq!(s.frame, before);
        assert_eq!(s.last_update_time, 5_000);
    }

    #[test]
    fn full_normalizer_count_decays_by_alpha_dt() {
        let mut s = IntensityState::new(geo(), IntensityConfig::default()).unwrap();
        s.frame.fill(1.0);
        let mut e = Array2::zeros((3, 4));
        e[[0, 0]] = 2;
        update_adaptive_batch(&mut s, &e, 5_000).unwrap();
        assert_eq!(s.frame[[1, 1]], (-0.025f64).exp());
        // exp(-0.025) + 2, evaluated independently in 30-digit arithmetic.
        assert!((s.frame[[0, 0]] - 2.975_309_912_028_333).abs() < 1e-14);
    }

    #[test]
    fn adaptive_rejects_bad_counts() {
        let mut s = IntensityState::new(geo(), IntensityConfig::default()).unwrap();
        let e = Array2::zeros((3, 4));
        assert!(matches!(update_adaptive_batch(&mut s, &e, -1), Err(Error::NegativeCount(-1))));
        let mut e = Array2::zeros((3, 4));
        e[[0, 0]] = 3;
        assert!(update_adaptive_batch(&mut s, &e, 2).is_err());
        assert!(update_adaptive_batch(&mut s, &Array2::zeros((2, 2)), 0).is_err());
    }

    #[test]
    fn empty_stream_gives_zero_frames() {
        let run = run_sequence(&[], geo(), SegmentConfig::default(), IntensityConfig::default(), None, 2)
            .unwrap();
        assert_eq!(run.frames.len(), 2);
        assert!(run.frames.iter().all(|f| f.iter().all(|&v| v == 0.0)));
        assert_eq!(run.state.last_update_time, 100_000);
    }

    #[test]
    fn resume_checks_geometry_and_config() {
        let run = run_sequence(&[], geo(), SegmentConfig::default(), IntensityConfig::default(), None, 1)
            .unwrap();
        let other = SensorGeometry::new(5, 3).unwrap();
        assert!(matches!(
            run_sequence(&[], other, SegmentConfig::default(), IntensityConfig::default(), Some(run.state.clone()), 1),
            Err(Error::ResumeMismatch(_))
        ));
        let cfg = IntensityConfig { alpha: 4.0, ..IntensityConfig::default() };
        assert!(matches!(
            run_sequence(&[], geo(), SegmentConfig::default(), cfg, Some(run.state), 1),
            Err(Error::ResumeMismatch(_))
        ));
    }

    #[test]
    fn adaptive_bin_must_match_histogram_bin() {
        let cfg = IntensityConfig { bin_us: 1_000, ..IntensityConfig::default() };
        assert!(run_sequence(&[], geo(), SegmentConfig::default(), cfg, None, 1).is_err());
    }
}
