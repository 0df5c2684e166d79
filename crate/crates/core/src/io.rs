//! On-disk formats: EVT1 event files, plain-text events, INTF frame stacks,
//! INTS intensity states and 8-bit PGM previews. All integers little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::event::{Event, Polarity, SensorGeometry};
use crate::intensity::{IntensityConfig, IntensityMethod, IntensityState};

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const EVT1_HEADER_LEN: usize = 16;
pub const EVT1_RECORD_LEN: usize = 13;
pub const INTF_MAGIC: &[u8; 4] = b"INTF";
pub const INTF_HEADER_LEN: usize = 12;
pub const INTS_MAGIC: &[u8; 4] = b"INTS";

fn format_err(kind: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        reason: reason.into(),
    }
}

/// EVT1 layout: `EVT1`, u16 width, u16 height, u32 reserved, u32 record
/// count (0 if unknown), then 13-byte records `u64 t, u16 x, u16 y, i8 p`.
pub fn write_evt1<W: Write>(mut w: W, geometry: SensorGeometry, events: &[Event]) -> Result<()> {
    let mut header = [0u8; EVT1_HEADER_LEN];
    header[..4].copy_from_slice(EVT1_MAGIC);
    header[4..6].copy_from_slice(&geometry.width.to_le_bytes());
    header[6..8].copy_from_slice(&geometry.height.to_le_bytes());
    let hint = u32::try_from(events.len()).unwrap_or(0);
    header[12..16].copy_from_slice(&hint.to_le_bytes());
    w.write_all(&header)?;

    let mut buf = Vec::with_capacity(events.len().min(1 << 16) * EVT1_RECORD_LEN);
    for chunk in events.chunks(1 << 16) {
        buf.clear();
        for e in chunk {
            buf.extend_from_slice(&e.t.to_le_bytes());
            buf.extend_from_slice(&e.x.to_le_bytes());
            buf.extend_from_slice(&e.y.to_le_bytes());
            buf.push(e.p.as_i8() as u8);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_evt1(bytes: &[u8]) -> Result<(SensorGeometry, Vec<Event>)> {
    if bytes.len() < EVT1_HEADER_LEN || &bytes[..4] != EVT1_MAGIC {
        return Err(format_err("EVT1", "missing EVT1 header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let hint = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let geometry = SensorGeometry::new(width, height).map_err(|e| format_err("EVT1", e.to_string()))?;

    let body = &bytes[EVT1_HEADER_LEN..];
    if !body.len().is_multiple_of(EVT1_RECORD_LEN) {
        return Err(format_err(
            "EVT1",
            format!("{} trailing bytes after the last full record", body.len() % EVT1_RECORD_LEN),
        ));
    }
    let count = body.len() / EVT1_RECORD_LEN;
    if hint != 0 && hint != count {
        return Err(format_err(
            "EVT1",
            format!("header announces {hint} records, file holds {count}"),
        ));
    }
    let mut events = Vec::with_capacity(count);
    for (i, r) in body.chunks_exact(EVT1_RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([r[8], r[9]]);
        let y = u16::from_le_bytes([r[10], r[11]]);
        let p = Polarity::from_i8(r[12] as i8)
            .ok_or_else(|| format_err("EVT1", format!("record {i} has polarity {}", r[12] as i8)))?;
        events.push(Event { t, x, y, p });
    }
    Ok((geometry, events))
}

pub fn read_evt1<R: Read>(mut r: R) -> Result<(SensorGeometry, Vec<Event>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_evt1(&bytes)
}

/// One `t x y p` line per event; blank lines and `#` comments are skipped.
pub fn parse_text_events(text: &str) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| format_err("text event", format!("line {}: {what}: {line:?}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let t = fields[0].parse::<u64>().map_err(|_| bad("bad timestamp"))?;
        let x = fields[1].parse::<u16>().map_err(|_| bad("bad x"))?;
        let y = fields[2].parse::<u16>().map_err(|_| bad("bad y"))?;
        let p = fields[3]
            .parse::<i8>()
            .ok()
            .and_then(Polarity::from_i8)
            .ok_or_else(|| bad("polarity must be -1 or 1"))?;
        events.push(Event { t, x, y, p });
    }
    Ok(events)
}

pub fn format_text_events(events: &[Event]) -> String {
    events
        .iter()
        .map(|e| format!("{} {} {} {}\n", e.t, e.x, e.y, e.p.as_i8()))
        .collect()
}

/// Loads EVT1 or text events. Text files carry no geometry, so `geometry`
/// must be supplied for them; for EVT1 it is checked against the header.
pub fn load_events(path: &Path, geometry: Option<SensorGeometry>) -> Result<(SensorGeometry, Vec<Event>)> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(EVT1_MAGIC) {
        let (g, events) = parse_evt1(&bytes)?;
        if let Some(expected) = geometry {
            if expected != g {
                return Err(format_err(
                    "EVT1",
                    format!("file geometry {g} differs from requested {expected}"),
                ));
            }
        }
        return Ok((g, events));
    }
    let text = String::from_utf8(bytes).map_err(|_| format_err("event", "neither EVT1 nor UTF-8 text"))?;
    let events = parse_text_events(&text)?;
    let g = geometry.ok_or_else(|| format_err("text event", "text input needs an explicit geometry"))?;
    Ok((g, events))
}

/// INTF layout: `INTF`, u16 width, u16 height, u32 frame count, then
/// row-major f32 frames.
pub fn write_intf<W: Write>(mut w: W, geometry: SensorGeometry, frames: &[Array2<f32>]) -> Result<()> {
    w.write_all(INTF_MAGIC)?;
    w.write_all(&geometry.width.to_le_bytes())?;
    w.write_all(&geometry.height.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    write_frame_payload(&mut w, geometry, frames)?;
    w.flush()?;
    Ok(())
}

fn write_frame_payload<W: Write>(w: &mut W, geometry: SensorGeometry, frames: &[Array2<f32>]) -> Result<()> {
    let mut buf = Vec::with_capacity(geometry.pixels() * 4);
    for f in frames {
        if f.dim() != (geometry.height(), geometry.width()) {
            return Err(format_err("INTF", format!("frame shape {:?} differs from {geometry}", f.dim())));
        }
        buf.clear();
        for v in f.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn parse_intf(bytes: &[u8]) -> Result<(SensorGeometry, Vec<Array2<f32>>)> {
    if bytes.len() < INTF_HEADER_LEN || &bytes[..4] != INTF_MAGIC {
        return Err(format_err("INTF", "missing INTF header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let geometry = SensorGeometry::new(width, height).map_err(|e| format_err("INTF", e.to_string()))?;
    let frame_len = geometry.pixels() * 4;
    let body = &bytes[INTF_HEADER_LEN..];
    if body.len() != count * frame_len {
        return Err(format_err(
            "INTF",
            format!("header announces {count} frames, payload is {} bytes", body.len()),
        ));
    }
    let frames = body
        .chunks_exact(frame_len.max(1))
        .take(count)
        .map(|chunk| {
            let data: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Array2::from_shape_vec((geometry.height(), geometry.width()), data).expect("frame size")
        })
        .collect();
    Ok((geometry, frames))
}

pub fn read_intf_file(path: &Path) -> Result<(SensorGeometry, Vec<Array2<f32>>)> {
    parse_intf(&fs::read(path)?)
}

/// Appends frames to an existing INTF file (creating it when absent) and
/// updates the header count.
pub fn append_intf_file(path: &Path, geometry: SensorGeometry, frames: &[Array2<f32>]) -> Result<()> {
    if !path.exists() {
        let file = fs::File::create(path)?;
        return write_intf(std::io::BufWriter::new(file), geometry, frames);
    }
    let mut bytes = fs::read(path)?;
    let (existing, old) = parse_intf(&bytes)?;
    if existing != geometry {
        return Err(format_err(
            "INTF",
            format!("cannot append {geometry} frames to a {existing} file"),
        ));
    }
    let count = (old.len() + frames.len()) as u32;
    bytes[8..12].copy_from_slice(&count.to_le_bytes());
    write_frame_payload(&mut bytes, geometry, frames)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// INTS layout: `INTS`, u16 width, u16 height, u8 method, u8 has-event-times,
/// u16 reserved, f64 alpha, f64 threshold, f64 normalizer, u64 bin_us,
/// u64 stream position, the f64 frame, then (if flagged) per-pixel u64
/// last-event times.
pub fn write_state<W: Write>(mut w: W, state: &IntensityState) -> Result<()> {
    let mut out = Vec::with_capacity(48 + state.frame.len() * 16);
    out.extend_from_slice(INTS_MAGIC);
    out.extend_from_slice(&state.geometry.width.to_le_bytes());
    out.extend_from_slice(&state.geometry.height.to_le_bytes());
    out.push(state.config.method.code());
    out.push(u8::from(state.last_event_time.is_some()));
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&state.config.alpha.to_le_bytes());
    out.extend_from_slice(&state.config.threshold.to_le_bytes());
    out.extend_from_slice(&state.config.normalizer.to_le_bytes());
    out.extend_from_slice(&state.config.bin_us.to_le_bytes());
    out.extend_from_slice(&state.last_update_time.to_le_bytes());
    for v in state.frame.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(times) = &state.last_event_time {
        for t in times.iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

pub fn parse_state(bytes: &[u8]) -> Result<IntensityState> {
    const FIXED: usize = 52;
    if bytes.len() < FIXED || &bytes[..4] != INTS_MAGIC {
        return Err(format_err("INTS", "missing INTS header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let geometry = SensorGeometry::new(width, height).map_err(|e| format_err("INTS", e.to_string()))?;
    let method = IntensityMethod::from_code(bytes[8])
        .ok_or_else(|| format_err("INTS", format!("unknown method code {}", bytes[8])))?;
    let has_times = bytes[9] == 1;
    let config = IntensityConfig {
        method,
        alpha: f64_at(12),
        threshold: f64_at(20),
        normalizer: f64_at(28),
        bin_us: u64_at(36),
    };
    config.validate().map_err(|e| format_err("INTS", e.to_string()))?;
    let last_update_time = u64_at(44);
    let n = geometry.pixels();
    let expected = FIXED + n * 8 + if has_times { n * 8 } else { 0 };
    if bytes.len() != expected {
        return Err(format_err("INTS", format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let shape = (geometry.height(), geometry.width());
    let frame: Vec<f64> = (0..n).map(|i| f64_at(FIXED + i * 8)).collect();
    let frame = Array2::from_shape_vec(shape, frame).expect("frame size");
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(format_err("INTS", "frame holds non-finite values"));
    }
    let last_event_time = has_times.then(|| {
        let base = FIXED + n * 8;
        let times: Vec<u64> = (0..n).map(|i| u64_at(base + i * 8)).collect();
        Array2::from_shape_vec(shape, times).expect("frame size")
    });
    Ok(IntensityState {
        geometry,
        config,
        frame,
        last_update_time,
        last_event_time,
    })
}

/// Affinely rescales a frame to `0..=255`; a constant frame maps to zero.
pub fn frame_to_gray(frame: &Array2<f32>) -> Vec<u8> {
    let (lo, hi) = frame
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    frame
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary 8-bit PGM (P5) preview. Not used for any loss computation.
pub fn write_pgm<W: Write>(mut w: W, frame: &Array2<f32>) -> Result<()> {
    let (h, wd) = frame.dim();
    write!(w, "P5\n{wd} {h}\n255\n")?;
    w.write_all(&frame_to_gray(frame))?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_events() -> Vec<Event> {
        vec![
            Event::new(0, 0, 0, Polarity::Positive),
            Event::new(17, 3, 2, Polarity::Negative),
            Event::new(u64::MAX, 639, 479, Polarity::Positive),
        ]
    }

    #[test]
    fn evt1_layout() {
        let g = SensorGeometry::new(640, 480).unwrap();
        let mut buf = Vec::new();
        write_evt1(&mut buf, g, &sample_events()).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 13);
        assert_eq!(&buf[..4], b"EVT1");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 640);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        // second record: t = 17, x = 3, y = 2, p = -1
        let r = &buf[16 + 13..16 + 26];
        assert_eq!(r[0], 17);
        assert_eq!(r[8], 3);
        assert_eq!(r[10], 2);
        assert_eq!(r[12], 0xff);
        assert_eq!(parse_evt1(&buf).unwrap(), (g, sample_events()));
    }

    #[test]
    fn evt1_rejects_damage() {
        let g = SensorGeometry::new(640, 480).unwrap();
        let mut buf = Vec::new();
        write_evt1(&mut buf, g, &sample_events()).unwrap();
        assert!(parse_evt1(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[16 + 12] = 0;
        assert!(parse_evt1(&bad).is_err());
        let mut hint = buf.clone();
        hint[12] = 9;
        assert!(parse_evt1(&hint).is_err());
        assert!(parse_evt1(b"EVT0xxxxxxxxxxxx").is_err());
    }

    #[test]
    fn text_events_round_trip() {
        let text = format_text_events(&sample_events());
        assert_eq!(parse_text_events(&text).unwrap(), sample_events());
        let with_comments = format!("# header\n\n{text}");
        assert_eq!(parse_text_events(&with_comments).unwrap(), sample_events());
        let err = parse_text_events("1 2 3 0\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn intf_round_trip_and_header() {
        let g = SensorGeometry::new(3, 2).unwrap();
        let frames = vec![
            Array2::from_shape_fn((2, 3), |(y, x)| (y * 3 + x) as f32),
            Array2::from_elem((2, 3), -0.5f32),
        ];
        let mut buf = Vec::new();
        write_intf(&mut buf, g, &frames).unwrap();
        assert_eq!(buf.len(), 12 + 2 * 6 * 4);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(parse_intf(&buf).unwrap(), (g, frames));
        assert!(parse_intf(&buf[..buf.len() - 4]).is_err());
    }

    #[test]
    fn state_round_trip() {
        let g = SensorGeometry::new(3, 2).unwrap();
        let cfg = IntensityConfig {
            method: IntensityMethod::PerEventDecay,
            ..IntensityConfig::default()
        };
        let mut s = IntensityState::new(g, cfg).unwrap();
        s.frame[[1, 2]] = -0.123456789;
        s.last_update_time = 150_000;
        s.last_event_time.as_mut().unwrap()[[1, 2]] = 149_999;
        let mut buf = Vec::new();
        write_state(&mut buf, &s).unwrap();
        assert_eq!(parse_state(&buf).unwrap(), s);

        let adaptive = IntensityState::new(g, IntensityConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_state(&mut buf, &adaptive).unwrap();
        assert_eq!(parse_state(&buf).unwrap(), adaptive);
        assert!(parse_state(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn pgm_rescales_affinely() {
        let f = ndarray::array![[-1.0f32, 0.0], [1.0, 1.0]];
        let mut buf = Vec::new();
        write_pgm(&mut buf, &f).unwrap();
        assert!(buf.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&buf[buf.len() - 4..], &[0, 128, 255, 255]);
        assert_eq!(frame_to_gray(&Array2::from_elem((1, 2), 3.0)), vec![0, 0]);
    }
}
