use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use evmae_core::event::{build_histogram_into, segment_stream, SensorGeometry, StageHistogram};
use evmae_core::intensity::{run_sequence, IntensityMethod, IntensityState};
use evmae_core::io::{
    append_intf_file, load_events, parse_state, read_intf_file, write_evt1, write_intf, write_pgm, write_state,
};
use evmae_core::metrics::{series_lines, trail_energy};
use evmae_core::simulator::{
    frame_trail_region, parse_scene, simulate_events, uniform_random_events, HotPixel, NoiseSpec, SceneSpec,
};
use evmae_core::toy::{prepare_sequence, train_toy, SequenceSpec, ToyModel, ToyModelConfig, TrainOptions};
use evmae_core::{Event, Polarity};
use serde::Serialize;

use crate::config::{default_patch, GlobalOpts, PipelineConfig};
use crate::{BenchArgs, Cli, Command, IntensityArgs, Method, PretrainArgs, ReportArgs, SimulateArgs};

const TOY_PATCH: usize = 8;
const BENCH_GEOMETRY: (u16, u16) = (346, 260);
const BENCH_RATE_HZ: f64 = 2e6;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(evmae_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Data(e) => e.fmt(f),
        }
    }
}

impl From<evmae_core::Error> for CliError {
    fn from(e: evmae_core::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Puts the file name into I/O errors.
fn at(path: &Path) -> impl Fn(evmae_core::Error) -> CliError + '_ {
    move |e| match e {
        evmae_core::Error::Io(io) => CliError::Data(evmae_core::Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        ))),
        other => CliError::Data(other),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| at(path)(e.into()))
}

fn load_scene(path: &Path) -> Result<(SceneSpec, Option<NoiseSpec>)> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| evmae_core::Error::Scene(format!("{} is not UTF-8 text", path.display())))?;
    Ok(parse_scene(&text)?)
}

fn print_config(global: &GlobalOpts, cfg: &PipelineConfig) {
    if global.print_config {
        println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => simulate(g, a),
        Command::Intensity(a) => intensity(g, a),
        Command::Report(a) => report(g, a),
        Command::PretrainToy(a) => pretrain(g, a),
        Command::Bench(a) => bench(g, a),
    }
}

fn parse_hot_pixel(spec: &str) -> Result<HotPixel> {
    let bad = || CliError::Usage(format!("--hot-pixel expects x,y,polarity,rate, got {spec:?}"));
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [x, y, p, rate] = parts[..] else { return Err(bad()) };
    let polarity = p
        .parse::<i8>()
        .ok()
        .and_then(Polarity::from_i8)
        .ok_or_else(bad)?;
    Ok(HotPixel {
        x: x.parse().map_err(|_| bad())?,
        y: y.parse().map_err(|_| bad())?,
        polarity,
        rate: rate.parse().map_err(|_| bad())?,
    })
}

fn simulate(g: &GlobalOpts, a: &SimulateArgs) -> Result<()> {
    let cfg = g.resolve(IntensityMethod::AdaptiveBatch, default_patch(), &[&a.scene], &[&a.out])?;
    print_config(g, &cfg);
    let (scene, mut noise) = load_scene(&a.scene)?;
    let extra: Vec<HotPixel> = a.hot_pixels.iter().map(|s| parse_hot_pixel(s)).collect::<Result<_>>()?;
    if !extra.is_empty() || a.background_rate.is_some() || a.stochastic {
        let n = noise.get_or_insert_with(|| NoiseSpec {
            hot_pixels: Vec::new(),
            background_rate: 0.0,
            seed: g.seed,
            stochastic_hot_pixels: false,
        });
        n.hot_pixels.extend(extra);
        if let Some(rate) = a.background_rate {
            n.background_rate = rate;
        }
        n.stochastic_hot_pixels |= a.stochastic;
    }
    let events = simulate_events(&scene, noise.as_ref())?;
    let file = fs::File::create(&a.out)?;
    write_evt1(BufWriter::new(file), scene.geometry, &events)?;
    println!("events {}", events.len());
    Ok(())
}

fn intensity(g: &GlobalOpts, a: &IntensityArgs) -> Result<()> {
    let method = match a.method {
        Method::Decay => IntensityMethod::PerEventDecay,
        Method::Adaptive => IntensityMethod::AdaptiveBatch,
    };
    let mut inputs = vec![a.input.as_path()];
    inputs.extend(a.resume.as_deref());
    let mut outputs = vec![a.out.as_path()];
    outputs.extend(a.save_state.as_deref());
    outputs.extend(a.pgm_dir.as_deref());
    let cfg = g.resolve(method, default_patch(), &inputs, &outputs)?;
    print_config(g, &cfg);
    let seg = g.segment()?;
    let int_cfg = g.intensity(method)?;

    let resume = match &a.resume {
        Some(p) => Some(parse_state(&read_file(p)?)?),
        None => None,
    };
    let (geometry, events) = load_events(&a.input, g.geometry.map(|g| g.0)).map_err(at(&a.input))?;
    let pos = resume.as_ref().map_or(0, |s| s.last_update_time);
    let rest = &events[events.partition_point(|e| e.t < pos)..];
    let segments = match a.segments {
        Some(m) => m,
        None => rest
            .last()
            .map_or(0, |e| (e.t / seg.segment_us + 1 - pos / seg.segment_us) as usize),
    };

    let (state, frames) = if segments == 0 {
        let state = match resume {
            Some(s) => s,
            None => IntensityState::new(geometry, int_cfg)?,
        };
        (state, Vec::new())
    } else {
        let run = run_sequence(rest, geometry, seg, int_cfg, resume, segments)?;
        (run.state, run.frames)
    };

    if a.resume.is_some() {
        append_intf_file(&a.out, geometry, &frames)?;
    } else {
        write_intf(BufWriter::new(fs::File::create(&a.out)?), geometry, &frames)?;
    }
    if let Some(p) = &a.save_state {
        write_state(BufWriter::new(fs::File::create(p)?), &state)?;
    }
    if let Some(dir) = &a.pgm_dir {
        fs::create_dir_all(dir)?;
        let first = (pos / seg.segment_us) as usize + 1;
        for (k, f) in frames.iter().enumerate() {
            let path = dir.join(format!("frame_{:05}.pgm", first + k));
            write_pgm(BufWriter::new(fs::File::create(path)?), f)?;
        }
    }
    println!("frames {} position_us {}", frames.len(), state.last_update_time);
    Ok(())
}

#[derive(Serialize)]
struct TrailReport {
    geometry: String,
    segment_us: u64,
    frames: usize,
    trail_pixels: Vec<usize>,
    trail_energy: Vec<f64>,
}

fn report(g: &GlobalOpts, a: &ReportArgs) -> Result<()> {
    let mut outputs = Vec::new();
    outputs.extend(a.report.as_deref());
    let cfg = g.resolve(IntensityMethod::AdaptiveBatch, default_patch(), &[&a.frames, &a.scene], &outputs)?;
    print_config(g, &cfg);
    let seg = g.segment()?;
    let (geometry, frames) = read_intf_file(&a.frames).map_err(at(&a.frames))?;
    let (scene, _) = load_scene(&a.scene)?;
    if geometry != scene.geometry {
        return Err(evmae_core::Error::Format {
            kind: "INTF",
            reason: format!("frames are {geometry} but the scene is {}", scene.geometry),
        }
        .into());
    }
    let mut pixels = Vec::with_capacity(frames.len());
    let mut energies = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let region = frame_trail_region(&scene, (i as u64 + 1) * seg.segment_us);
        let n = region.iter().filter(|&&r| r).count();
        pixels.push(n);
        energies.push(if n == 0 { 0.0 } else { trail_energy(std::slice::from_ref(f), &region)?[0] });
    }
    print!("{}", series_lines(&energies));
    if let Some(path) = &a.report {
        let doc = TrailReport {
            geometry: geometry.to_string(),
            segment_us: seg.segment_us,
            frames: frames.len(),
            trail_pixels: pixels,
            trail_energy: energies,
        };
        fs::write(path, serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    }
    Ok(())
}

fn pretrain(g: &GlobalOpts, a: &PretrainArgs) -> Result<()> {
    let cfg = g.resolve(IntensityMethod::AdaptiveBatch, TOY_PATCH, &[&a.scene], &[&a.curve, &a.params])?;
    print_config(g, &cfg);
    let (scene, noise) = load_scene(&a.scene)?;
    let spec = SequenceSpec {
        segment: g.segment()?,
        intensity: g.intensity(IntensityMethod::AdaptiveBatch)?,
        clip_max: Some(evmae_core::event::DEFAULT_CLIP_MAX),
        patch: cfg.patch,
    };
    let seq = prepare_sequence(&scene, noise.as_ref(), &spec)?;
    let model_cfg = ToyModelConfig {
        patch: cfg.patch,
        embed_dim: a.embed_dim,
        recurrent: !a.feedforward,
        neighbor_context: !a.no_context,
        seed: g.seed,
    };
    let mut model = ToyModel::new(model_cfg, seq.data_channels() + 1, seq.grid)?;
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        clip_norm: (a.clip > 0.0).then_some(a.clip),
        mask_ratio: g.ratio,
        mask_seed: (g.seed as u32).wrapping_add(1),
        eval_mask_seed: g.seed as u32,
    };
    let curve = train_toy(&mut model, &seq, &opts)?;
    fs::write(&a.curve, curve.to_lines())?;
    fs::write(&a.params, model.to_bytes())?;
    let first = curve.eval[0];
    let last = *curve.eval.last().expect("steps >= 1");
    println!("initial_eval_loss {first:.9e}");
    println!("final_eval_loss {last:.9e}");
    println!("final_train_loss {:.9e}", curve.train.last().expect("steps >= 1"));
    Ok(())
}

fn bench(g: &GlobalOpts, a: &BenchArgs) -> Result<()> {
    let mut inputs = Vec::new();
    inputs.extend(a.input.as_deref());
    let cfg = g.resolve(IntensityMethod::AdaptiveBatch, default_patch(), &inputs, &[])?;
    print_config(g, &cfg);
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let seg = g.segment()?;
    let int_cfg = g.intensity(IntensityMethod::AdaptiveBatch)?;
    let (geometry, events): (SensorGeometry, Vec<Event>) = match (&a.input, a.synthetic) {
        (Some(path), _) => {
            load_events(path, g.geometry.map(|g| g.0)).map_err(at(path))?
        }
        (None, Some(n)) => {
            let geometry = match g.geometry {
                Some(g) => g.0,
                None => SensorGeometry::new(BENCH_GEOMETRY.0, BENCH_GEOMETRY.1)?,
            };
            (geometry, uniform_random_events(geometry, n, BENCH_RATE_HZ, g.seed))
        }
        (None, None) => return Err(CliError::Usage("give --input or --synthetic".into())),
    };
    let segments = events.last().map_or(0, |e| (e.t / seg.segment_us + 1) as usize);

    let mut hist_rates = Vec::with_capacity(a.runs);
    let mut intensity_rates = Vec::with_capacity(a.runs);
    for _ in 0..a.runs {
        if segments == 0 {
            hist_rates.push(0.0);
            intensity_rates.push(0.0);
            continue;
        }
        let start = Instant::now();
        let s = segment_stream(&events, geometry, seg, segments)?;
        let mut hist = StageHistogram::zeros(geometry, seg.bins);
        for segment in &s.segments {
            build_histogram_into(&mut hist, segment, seg);
        }
        std::hint::black_box(&hist);
        hist_rates.push(events.len() as f64 / start.elapsed().as_secs_f64());

        let start = Instant::now();
        let run = run_sequence(&events, geometry, seg, int_cfg, None, segments)?;
        std::hint::black_box(&run);
        intensity_rates.push(events.len() as f64 / start.elapsed().as_secs_f64());
    }

    let summary = |rates: &[f64]| {
        let best = rates.iter().copied().fold(0.0, f64::max);
        let worst = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let spread = if best > 0.0 { (best - worst) / best } else { 0.0 };
        (best, spread)
    };
    let (hist_best, hist_spread) = summary(&hist_rates);
    let (int_best, int_spread) = summary(&intensity_rates);
    println!(
        "segmentation+histogram: {:.2} M events/s (best of {}, spread {:.1}%)",
        hist_best / 1e6,
        a.runs,
        hist_spread * 100.0
    );
    println!(
        "adaptive intensity:     {:.2} M events/s (best of {}, spread {:.1}%)",
        int_best / 1e6,
        a.runs,
        int_spread * 100.0
    );
    println!("bench.events={}", events.len());
    println!("bench.segments={segments}");
    println!("bench.histogram_events_per_second={hist_best:.0}");
    println!("bench.adaptive_events_per_second={int_best:.0}");
    Ok(())
}
