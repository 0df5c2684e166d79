//! Synthetic event streams from piecewise-constant disc scenes.
//!
//! Each pixel keeps a reference log level. At every sample instant the scene
//! is re-rendered and a pixel whose level moved by at least the contrast
//! threshold `C` emits `floor(|diff| / C)` events and advances its reference
//! by the same number of thresholds. Pixel `(x, y)` has its center at the
//! continuous coordinate `(x, y)` and is covered by a disc when that center
//! lies within the radius.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::event::{Event, Polarity, SensorGeometry};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Knot {
    pub t: u64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovingDisc {
    pub knots: Vec<Knot>,
    pub radius: f64,
    pub logintensity: f64,
}

impl MovingDisc {
    /// Center at time `t`, linearly interpolated and held constant outside the knot span.
    pub fn center_at(&self, t: u64) -> (f64, f64) {
        let first = self.knots[0];
        if t <= first.t {
            return (first.cx, first.cy);
        }
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= b.t {
                if b.t == a.t {
                    return (b.cx, b.cy);
                }
                let s = (t - a.t) as f64 / (b.t - a.t) as f64;
                return (a.cx + s * (b.cx - a.cx), a.cy + s * (b.cy - a.cy));
            }
        }
        let last = self.knots[self.knots.len() - 1];
        (last.cx, last.cy)
    }

    pub fn covers(&self, x: usize, y: usize, t: u64) -> bool {
        let (cx, cy) = self.center_at(t);
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub geometry: SensorGeometry,
    pub background: f64,
    /// Later discs are drawn on top of earlier ones.
    pub discs: Vec<MovingDisc>,
    pub duration_us: u64,
    pub threshold: f64,
    pub sample_interval_us: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Scene(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.sample_interval_us == 0 || !self.duration_us.is_multiple_of(self.sample_interval_us) {
            return Err(Error::Scene(format!(
                "sample_interval_us {} must be positive and divide duration_us {}",
                self.sample_interval_us, self.duration_us
            )));
        }
        for (i, d) in self.discs.iter().enumerate() {
            if d.knots.is_empty() {
                return Err(Error::Scene(format!("disc {i} has no knots")));
            }
            if d.knots.windows(2).any(|w| w[1].t < w[0].t) {
                return Err(Error::Scene(format!("disc {i} knots are not sorted by t")));
            }
            if !(d.radius > 0.0) {
                return Err(Error::Scene(format!("disc {i} radius must be positive")));
            }
        }
        Ok(())
    }

    /// Sample instants strictly inside `(0, duration)`; time zero sets the reference.
    pub fn sample_times(&self) -> impl Iterator<Item = u64> + '_ {
        (1..self.duration_us / self.sample_interval_us).map(move |k| k * self.sample_interval_us)
    }

    /// The same scene with object and background levels reflected about their midpoint.
    ///
    /// For a single-object scene this swaps the two levels.
    pub fn with_inverted_contrast(&self) -> SceneSpec {
        let mut out = self.clone();
        let pivot = match self.discs.first() {
            Some(d) => self.background + d.logintensity,
            None => 2.0 * self.background,
        };
        out.background = pivot - self.background;
        for d in &mut out.discs {
            d.logintensity = pivot - d.logintensity;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HotPixel {
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
    /// Events per second.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct NoiseSpec {
    pub hot_pixels: Vec<HotPixel>,
    /// Events per second per pixel, random polarity, always stochastic.
    pub background_rate: f64,
    pub seed: u64,
    /// Poisson hot pixels instead of the exact-period mode.
    pub stochastic_hot_pixels: bool,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let bad_rate = |r: f64| !(r >= 0.0 && r.is_finite());
        if bad_rate(self.background_rate) || self.hot_pixels.iter().any(|h| bad_rate(h.rate)) {
            return Err(Error::Scene("noise rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Log-intensity image at time `t`.
pub fn render_logintensity(scene: &SceneSpec, t: u64) -> Array2<f64> {
    let (w, h) = (scene.geometry.width(), scene.geometry.height());
    let mut img = Array2::from_elem((h, w), scene.background);
    for disc in &scene.discs {
        let (cx, cy) = disc.center_at(t);
        let r = disc.radius;
        let x0 = (cx - r).ceil().max(0.0) as usize;
        let y0 = (cy - r).ceil().max(0.0) as usize;
        let x1 = (cx + r).floor().min(w as f64 - 1.0);
        let y1 = (cy + r).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                if disc.covers(x, y, t) {
                    img[[y, x]] = disc.logintensity;
                }
            }
        }
    }
    img
}

/// Simulates the trigger model over the whole scene, merging optional noise.
///
/// Output is sorted by `(t, y, x, p)`.
pub fn simulate_events(scene: &SceneSpec, noise: Option<&NoiseSpec>) -> Result<Vec<Event>> {
    scene.validate()?;
    let c = scene.threshold;
    let w = scene.geometry.width();
    let mut reference = render_logintensity(scene, 0);
    let mut events = Vec::new();

    for t in scene.sample_times() {
        let level = render_logintensity(scene, t);
        for ((idx, r), &l) in reference.indexed_iter_mut().zip(level.iter()) {
            let diff = l - *r;
            if diff.abs() < c {
                continue;
            }
            let k = (diff.abs() / c).floor();
            let p = Polarity::from_sign(diff > 0.0);
            *r += p.sign() * k * c;
            let (y, x) = idx;
            debug_assert!(x < w);
            for _ in 0..k as u64 {
                events.push(Event::new(t, x as u16, y as u16, p));
            }
        }
    }

    if let Some(noise) = noise {
        noise.validate()?;
        events.extend(noise_events(scene, noise)?);
        events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    }
    Ok(events)
}

fn noise_events(scene: &SceneSpec, noise: &NoiseSpec) -> Result<Vec<Event>> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let duration = scene.duration_us;
    let mut out = Vec::new();

    for hp in &noise.hot_pixels {
        if !scene.geometry.contains(hp.x, hp.y) {
            return Err(Error::Scene(format!(
                "hot pixel ({}, {}) outside {} sensor",
                hp.x, hp.y, scene.geometry
            )));
        }
        if hp.rate == 0.0 {
            continue;
        }
        if noise.stochastic_hot_pixels {
            poisson_train(&mut rng, hp.rate, duration, |t| {
                out.push(Event::new(t, hp.x, hp.y, hp.polarity))
            });
        } else {
            // Exact period, phase offset by half a period: rate * D events
            // whenever the period divides D.
            let period = ((1e6 / hp.rate).round() as u64).max(1);
            let mut t = period / 2;
            while t < duration {
                out.push(Event::new(t, hp.x, hp.y, hp.polarity));
                t += period;
            }
        }
    }

    if noise.background_rate > 0.0 {
        for y in 0..scene.geometry.height {
            for x in 0..scene.geometry.width {
                let mut times = Vec::new();
                poisson_train(&mut rng, noise.background_rate, duration, |t| times.push(t));
                for t in times {
                    let p = Polarity::from_sign(rng.random::<bool>());
                    out.push(Event::new(t, x, y, p));
                }
            }
        }
    }
    Ok(out)
}

/// `n` events at uniformly random pixels and polarities, evenly spaced in
/// time at `rate_hz`. Used for throughput measurements.
pub fn uniform_random_events(geometry: SensorGeometry, n: usize, rate_hz: f64, seed: u64) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e6 / rate_hz;
    (0..n)
        .map(|i| {
            Event::new(
                (i as f64 * step) as u64,
                rng.random_range(0..geometry.width),
                rng.random_range(0..geometry.height),
                Polarity::from_sign(rng.random()),
            )
        })
        .collect()
}

fn poisson_train(rng: &mut ChaCha8Rng, rate: f64, duration_us: u64, mut emit: impl FnMut(u64)) {
    let gap = Exp::new(rate / 1e6).expect("positive rate");
    let mut t = 0.0f64;
    loop {
        t += gap.sample(rng);
        if t >= duration_us as f64 {
            break;
        }
        emit(t as u64);
    }
}

/// Exact log-intensity frames at `times`, each shifted to zero mean.
pub fn oracle_intensity(scene: &SceneSpec, times: &[u64]) -> Vec<Array2<f64>> {
    times
        .iter()
        .map(|&t| {
            let mut img = render_logintensity(scene, t);
            let mean = img.mean().unwrap_or(0.0);
            img.mapv_inplace(|v| v - mean);
            img
        })
        .collect()
}

fn footprint(scene: &SceneSpec, t: u64) -> Array2<bool> {
    let (w, h) = (scene.geometry.width(), scene.geometry.height());
    Array2::from_shape_fn((h, w), |(y, x)| scene.discs.iter().any(|d| d.covers(x, y, t)))
}

/// Pixels swept by any disc at a sample instant in `[0, t]`, excluding the
/// footprint at `t` and the footprint at time zero.
///
/// Pixels covered at time zero never see an entry event, so they are left out.
pub fn trail_region(scene: &SceneSpec, t: u64) -> Array2<bool> {
    let start = footprint(scene, 0);
    let mut swept = start.clone();
    for s in scene.sample_times().take_while(|&s| s <= t) {
        swept.zip_mut_with(&footprint(scene, s), |a, &b| *a |= b);
    }
    let now = footprint(scene, t);
    let mut region = swept;
    ndarray::Zip::from(&mut region)
        .and(&now)
        .and(&start)
        .for_each(|r, &n, &s| *r = *r && !n && !s);
    region
}

/// Trail region seen by a frame that ends at `end`: built at the last sample
/// strictly before `end`, since events of a sample at `end` fall in the next frame.
pub fn frame_trail_region(scene: &SceneSpec, end: u64) -> Array2<bool> {
    let t = scene.sample_times().take_while(|&s| s < end).last().unwrap_or(0);
    trail_region(scene, t)
}

/// A bright disc (level 1.5 over a zero background, `C = 1`) crossing a
/// 32x32 sensor left to right at 0.05 px/ms over 850 ms.
///
/// Every crossed pixel sees exactly one positive then one negative event.
pub fn canonical_disc_scene() -> SceneSpec {
    SceneSpec {
        geometry: SensorGeometry {
            width: 32,
            height: 32,
        },
        background: 0.0,
        discs: vec![MovingDisc {
            knots: vec![
                Knot {
                    t: 0,
                    cx: -5.0,
                    cy: 15.3,
                },
                Knot {
                    t: 850_000,
                    cx: 37.5,
                    cy: 15.3,
                },
            ],
            radius: 4.0,
            logintensity: 1.5,
        }],
        duration_us: 850_000,
        threshold: 1.0,
        sample_interval_us: 1_000,
    }
}

/// The canonical disc, but it halts at the sensor center after 425 ms and
/// emits no further events.
pub fn stop_motion_scene() -> SceneSpec {
    let mut scene = canonical_disc_scene();
    scene.discs[0].knots = vec![
        Knot {
            t: 0,
            cx: -5.0,
            cy: 15.3,
        },
        Knot {
            t: 425_000,
            cx: 16.25,
            cy: 15.3,
        },
        Knot {
            t: 850_000,
            cx: 16.25,
            cy: 15.3,
        },
    ];
    scene
}

// Scene files are TOML; see the repository README for the grammar.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    geometry: GeometryEntry,
    scene: SceneEntry,
    #[serde(default)]
    disc: Vec<DiscEntry>,
    noise: Option<NoiseEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryEntry {
    width: u16,
    height: u16,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneEntry {
    background: f64,
    threshold: f64,
    duration_us: u64,
    sample_interval_us: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscEntry {
    radius: f64,
    logintensity: f64,
    knots: Vec<(u64, f64, f64)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseEntry {
    #[serde(default)]
    background_rate: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    stochastic: bool,
    #[serde(default)]
    hot_pixel: Vec<HotPixelEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HotPixelEntry {
    x: u16,
    y: u16,
    polarity: i8,
    rate: f64,
}

/// Parses a scene file, returning the scene and its optional noise section.
pub fn parse_scene(text: &str) -> Result<(SceneSpec, Option<NoiseSpec>)> {
    let file: SceneFile = toml::from_str(text).map_err(|e| Error::Scene(e.to_string()))?;
    let geometry = SensorGeometry::new(file.geometry.width, file.geometry.height)
        .map_err(|e| Error::Scene(format!("geometry: {e}")))?;
    let scene = SceneSpec {
        geometry,
        background: file.scene.background,
        discs: file
            .disc
            .into_iter()
            .map(|d| MovingDisc {
                knots: d
                    .knots
                    .into_iter()
                    .map(|(t, cx, cy)| Knot { t, cx, cy })
                    .collect(),
                radius: d.radius,
                logintensity: d.logintensity,
            })
            .collect(),
        duration_us: file.scene.duration_us,
        threshold: file.scene.threshold,
        sample_interval_us: file.scene.sample_interval_us,
    };
    scene.validate()?;

    let noise = match file.noise {
        None => None,
        Some(n) => {
            let hot_pixels = n
                .hot_pixel
                .into_iter()
                .map(|h| {
                    Polarity::from_i8(h.polarity)
                        .map(|polarity| HotPixel {
                            x: h.x,
                            y: h.y,
                            polarity,
                            rate: h.rate,
                        })
                        .ok_or_else(|| {
                            Error::Scene(format!("noise.hot_pixel.polarity must be -1 or 1, got {}", h.polarity))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let spec = NoiseSpec {
                hot_pixels,
                background_rate: n.background_rate,
                seed: n.seed,
                stochastic_hot_pixels: n.stochastic,
            };
            spec.validate()?;
            Some(spec)
        }
    };
    Ok((scene, noise))
}

/// Writes a scene (and noise) back out in the scene-file grammar.
pub fn format_scene(scene: &SceneSpec, noise: Option<&NoiseSpec>) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "[geometry]\nwidth = {}\nheight = {}\n", scene.geometry.width, scene.geometry.height);
    let _ = writeln!(
        s,
        "[scene]\nbackground = {:?}\nthreshold = {:?}\nduration_us = {}\nsample_interval_us = {}",
        scene.background, scene.threshold, scene.duration_us, scene.sample_interval_us
    );
    for d in &scene.discs {
        let knots: Vec<String> = d
            .knots
            .iter()
            .map(|k| format!("[{}, {:?}, {:?}]", k.t, k.cx, k.cy))
            .collect();
        let _ = writeln!(
            s,
            "\n[[disc]]\nradius = {:?}\nlogintensity = {:?}\nknots = [{}]",
            d.radius,
            d.logintensity,
            knots.join(", ")
        );
    }
    if let Some(n) = noise {
        let _ = writeln!(
            s,
            "\n[noise]\nbackground_rate = {:?}\nseed = {}\nstochastic = {}",
            n.background_rate, n.seed, n.stochastic_hot_pixels
        );
        for h in &n.hot_pixels {
            let _ = writeln!(
                s,
                "\n[[noise.hot_pixel]]\nx = {}\ny = {}\npolarity = {}\nrate = {:?}",
                h.x,
                h.y,
                h.polarity.as_i8(),
                h.rate
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_scene() -> SceneSpec {
        let mut s = canonical_disc_scene();
        s.discs.clear();
        s.background = 0.3;
        s
    }

    #[test]
    fn empty_scene_renders_background() {
        let img = render_logintensity(&static_scene(), 1234);
        assert!(img.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn disc_center_shows_object_level() {
        let mut s = canonical_disc_scene();
        s.discs[0].knots = vec![Knot { t: 0, cx: 10.0, cy: 12.0 }];
        let img = render_logintensity(&s, 0);
        assert_eq!(img[[12, 10]], 1.5);
        assert_eq!(img[[12, 14]], 1.5);
        assert_eq!(img[[12, 15]], 0.0);
        assert_eq!(img.iter().filter(|&&v| v == 1.5).count(), 49);
    }

    #[test]
    fn center_interpolates_between_knots() {
        let d = MovingDisc {
            knots: vec![Knot { t: 100, cx: 2.0, cy: 4.0 }, Knot { t: 300, cx: 6.0, cy: 0.0 }],
            radius: 1.0,
            logintensity: 1.0,
        };
        assert_eq!(d.center_at(200), (4.0, 2.0));
        assert_eq!(d.center_at(0), (2.0, 4.0));
        assert_eq!(d.center_at(1000), (6.0, 0.0));
    }

    #[test]
    fn static_scene_emits_nothing() {
        assert!(simulate_events(&static_scene(), None).unwrap().is_empty());
    }

    #[test]
    fn dark_disc_crossing_gives_negative_then_positive() {
        let mut s = canonical_disc_scene();
        s.background = 1.5;
        s.discs[0].logintensity = 0.0;
        let events = simulate_events(&s, None).unwrap();
        let at: Vec<_> = events.iter().filter(|e| e.x == 10 && e.y == 15).collect();
        assert_eq!(at.len(), 2);
        assert_eq!(at[0].p, Polarity::Negative);
        assert_eq!(at[1].p, Polarity::Positive);
        assert!(at[0].t < at[1].t);
    }

    #[test]
    fn large_contrast_bursts() {
        let mut s = canonical_disc_scene();
        s.discs[0].logintensity = 2.5;
        let events = simulate_events(&s, None).unwrap();
        let at: Vec<_> = events.iter().filter(|e| e.x == 10 && e.y == 15).collect();
        assert_eq!(at.len(), 4);
        assert_eq!(at[0].t, at[1].t);
    }

    #[test]
    fn deterministic_hot_pixel_count() {
        let noise = NoiseSpec {
            hot_pixels: vec![HotPixel { x: 3, y: 4, polarity: Polarity::Positive, rate: 200.0 }],
            ..Default::default()
        };
        let events = simulate_events(&static_scene(), Some(&noise)).unwrap();
        // 200 ev/s over 0.85 s.
        assert_eq!(events.len(), 170);
        assert!(events.iter().all(|e| e.x == 3 && e.y == 4 && e.p == Polarity::Positive));
    }

    #[test]
    fn stochastic_noise_is_seeded() {
        let noise = NoiseSpec {
            hot_pixels: vec![HotPixel { x: 0, y: 0, polarity: Polarity::Negative, rate: 500.0 }],
            background_rate: 2.0,
            seed: 11,
            stochastic_hot_pixels: true,
        };
        let s = canonical_disc_scene();
        let a = simulate_events(&s, Some(&noise)).unwrap();
        let b = simulate_events(&s, Some(&noise)).unwrap();
        assert_eq!(a, b);
        let other = NoiseSpec { seed: 12, ..noise };
        assert_ne!(a, simulate_events(&s, Some(&other)).unwrap());
        assert!(a.windows(2).all(|w| (w[0].t, w[0].y, w[0].x, w[0].p) <= (w[1].t, w[1].y, w[1].x, w[1].p)));
    }

    #[test]
    fn oracle_frames_are_mean_centered() {
        let s = canonical_disc_scene();
        let frames = oracle_intensity(&s, &[200_000]);
        let raw = render_logintensity(&s, 200_000);
        let mean = raw.mean().unwrap();
        assert!(frames[0].mean().unwrap().abs() < 1e-12);
        for (a, b) in frames[0].iter().zip(raw.iter()) {
            assert!((a - (b - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_frames_differ_on_swept_region_only() {
        let s = canonical_disc_scene();
        let (t0, t1) = (200_000, 300_000);
        let frames = oracle_intensity(&s, &[t0, t1]);
        let a = footprint(&s, t0);
        let b = footprint(&s, t1);
        let d0 = &frames[0] - frames[0][[0, 0]];
        let d1 = &frames[1] - frames[1][[0, 0]];
        for ((idx, &x), &y) in d0.indexed_iter().zip(d1.iter()) {
            let changed = (x - y).abs() > 1e-12;
            assert_eq!(changed, a[idx] != b[idx], "pixel {idx:?}");
        }
    }

    #[test]
    fn trail_excludes_current_and_initial_footprint() {
        let s = canonical_disc_scene();
        let t = 400_000;
        let region = trail_region(&s, t);
        let now = footprint(&s, t);
        assert!(region.iter().any(|&r| r));
        assert!(region.iter().zip(now.iter()).all(|(&r, &n)| !(r && n)));
    }

    #[test]
    fn scene_file_round_trip() {
        let noise = NoiseSpec {
            hot_pixels: vec![HotPixel { x: 1, y: 2, polarity: Polarity::Negative, rate: 50.0 }],
            background_rate: 0.5,
            seed: 3,
            stochastic_hot_pixels: false,
        };
        let text = format_scene(&canonical_disc_scene(), Some(&noise));
        let (scene, parsed_noise) = parse_scene(&text).unwrap();
        assert_eq!(scene, canonical_disc_scene());
        assert_eq!(parsed_noise, Some(noise));
    }

    #[test]
    fn scene_file_errors_name_the_key() {
        let text = format_scene(&canonical_disc_scene(), None).replace("threshold", "treshold");
        let err = parse_scene(&text).unwrap_err().to_string();
        assert!(err.contains("treshold"), "{err}");
        let err = parse_scene("[geometry]\nwidth = 4\n").unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }
}
