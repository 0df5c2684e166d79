use evmae_core::event::SegmentConfig;
use evmae_core::intensity::{run_sequence, IntensityConfig, IntensityMethod, IntensityRun};
use evmae_core::io::{parse_intf, write_intf};
use evmae_core::metrics::trail_energy;
use evmae_core::simulator::{canonical_disc_scene, frame_trail_region, simulate_events, trail_region, HotPixel, NoiseSpec};
use evmae_core::{Event, Polarity};

fn run(events: &[Event], method: IntensityMethod, normalizer: f64) -> IntensityRun {
    let scene = canonical_disc_scene();
    let cfg = IntensityConfig {
        method,
        normalizer,
        ..Default::default()
    };
    run_sequence(events, scene.geometry, SegmentConfig::default(), cfg, None, 17).unwrap()
}

#[test]
fn adaptive_trail_stays_below_per_event_trail() {
    let scene = canonical_disc_scene();
    let events = simulate_events(&scene, None).unwrap();
    for normalizer in [1.0, 50.0, 5000.0] {
        let per_event = run(&events, IntensityMethod::PerEventDecay, normalizer);
        let batch = run(&events, IntensityMethod::AdaptiveBatch, normalizer);
        for i in 4..17 {
            let region = frame_trail_region(&scene, (i as u64 + 1) * 50_000);
            let a = trail_energy(&batch.frames[i..=i], &region).unwrap()[0];
            let b = trail_energy(&per_event.frames[i..=i], &region).unwrap()[0];
            assert!(a < b, "N={normalizer}, frame {i}: {a} vs {b}");
        }
    }
}

#[test]
fn per_event_trail_persists() {
    let scene = canonical_disc_scene();
    let events = simulate_events(&scene, None).unwrap();
    let per_event = run(&events, IntensityMethod::PerEventDecay, 5000.0);
    let region = trail_region(&scene, 300_000);
    let energies = trail_energy(&per_event.frames[6..], &region).unwrap();
    assert!(energies[0] > 0.0);
    assert!(energies.iter().all(|&e| e == energies[0]));
}

#[test]
fn hot_pixel_is_suppressed_by_the_adaptive_rule() {
    let scene = canonical_disc_scene();
    let noise = NoiseSpec {
        hot_pixels: vec![HotPixel {
            x: 3,
            y: 28,
            polarity: Polarity::Positive,
            rate: 200.0,
        }],
        background_rate: 0.0,
        seed: 1,
        stochastic_hot_pixels: false,
    };
    let events = simulate_events(&scene, Some(&noise)).unwrap();
    let per_event = run(&events, IntensityMethod::PerEventDecay, 1.0);
    let batch = run(&events, IntensityMethod::AdaptiveBatch, 1.0);
    let last6 = per_event.frames.last().unwrap()[[28, 3]];
    let last7 = batch.frames.last().unwrap()[[28, 3]];
    assert!(last7 < last6, "{last7} vs {last6}");
}

#[test]
fn intf_round_trip_of_a_run() {
    let scene = canonical_disc_scene();
    let events = simulate_events(&scene, None).unwrap();
    let r = run(&events, IntensityMethod::AdaptiveBatch, 5000.0);
    let mut bytes = Vec::new();
    write_intf(&mut bytes, scene.geometry, &r.frames).unwrap();
    let (g, frames) = parse_intf(&bytes).unwrap();
    assert_eq!(g, scene.geometry);
    assert_eq!(frames, r.frames);
}
