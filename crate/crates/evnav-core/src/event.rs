//! Event records, bit-exact event file I/O, and fixed-count windowing.
//!
//! File format (`.evt`, little-endian): magic `EVT1`, `u16` width, `u16`
//! height, `u64` event count, then one 13-byte record per event:
//! `i64` timestamp in microseconds, `u16` x, `u16` y, `u8` polarity.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const EVT_MAGIC: [u8; 4] = *b"EVT1";
pub const EVT_HEADER_BYTES: u64 = 16;
pub const EVT_RECORD_BYTES: u64 = 13;

/// Number of events per detection window used throughout the pipeline.
pub const DEFAULT_WINDOW_EVENTS: usize = 10_000;

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds, non-decreasing within a stream.
    pub t_us: i64,
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    /// 0 = negative change, 1 = positive change.
    pub polarity: u8,
}

/// Sensor resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorGeometry {
    pub width: u16,
    pub height: u16,
}

impl SensorGeometry {
    pub const DAVIS240: SensorGeometry = SensorGeometry {
        width: 240,
        height: 180,
    };

    pub fn new(width: u16, height: u16) -> Self {
        assert!(width > 0 && height > 0, "degenerate sensor geometry");
        SensorGeometry { width, height }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// An ordered event recording together with the geometry it was captured on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub geometry: SensorGeometry,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream, validating bounds, polarity and temporal order.
    pub fn new(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self> {
        let mut last_t = i64::MIN;
        for (i, ev) in events.iter().enumerate() {
            if !geometry.contains(ev.x, ev.y) {
                return Err(Error::Dimension(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    ev.x, ev.y, geometry.width, geometry.height
                )));
            }
            if ev.polarity > 1 {
                return Err(Error::Dimension(format!(
                    "event {i} has polarity {}, expected 0 or 1",
                    ev.polarity
                )));
            }
            if ev.t_us < last_t {
                return Err(Error::Dimension(format!(
                    "event {i} timestamp {} decreases below {}",
                    ev.t_us, last_t
                )));
            }
            last_t = ev.t_us;
        }
        Ok(EventStream { geometry, events })
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        EventStream {
            geometry,
            events: Vec::new(),
        }
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

    /// Consecutive non-overlapping windows of exactly `n` events, in stream
    /// order. A trailing remainder shorter than `n` is withheld.
    pub fn windows(&self, n: usize) -> impl Iterator<Item = &[Event]> {
        assert!(n >= 1, "window size must be at least 1");
        self.events.chunks_exact(n)
    }

    pub fn n_windows(&self, n: usize) -> usize {
        assert!(n >= 1);
        self.events.len() / n
    }
}

/// Reads a `.evt` file, validating the header and every record.
pub fn read_event_file(path: &Path) -> Result<EventStream> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_at(&mut rdr, &mut magic, path, 0)?;
    if magic != EVT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"EVT1\""));
    }
    let width = rdr
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::format(path, 4, "truncated header"))?;
    let height = rdr
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::format(path, 6, "truncated header"))?;
    let count = rdr
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::format(path, 8, "truncated header"))?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, 4, "zero sensor dimension"));
    }
    let geometry = SensorGeometry { width, height };

    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut last_t = i64::MIN;
    for i in 0..count {
        let offset = EVT_HEADER_BYTES + i * EVT_RECORD_BYTES;
        let mut record = [0u8; EVT_RECORD_BYTES as usize];
        if rdr.read_exact(&mut record).is_err() {
            return Err(Error::format(
                path,
                offset,
                format!("truncated: expected {count} events, record {i} incomplete"),
            ));
        }
        let t_us = i64::from_le_bytes(record[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(record[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(record[10..12].try_into().unwrap());
        let polarity = record[12];
        if !geometry.contains(x, y) {
            return Err(Error::format(
                path,
                offset,
                format!("event ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        if polarity > 1 {
            return Err(Error::format(
                path,
                offset,
                format!("polarity {polarity} not in {{0, 1}}"),
            ));
        }
        if t_us < last_t {
            return Err(Error::format(
                path,
                offset,
                format!("timestamp {t_us} decreases below {last_t}"),
            ));
        }
        last_t = t_us;
        events.push(Event {
            t_us,
            x,
            y,
            polarity,
        });
    }

    Ok(EventStream { geometry, events })
}

/// Writes a stream as a `.evt` file. `read_event_file` of the result is the
/// identity, bit for bit.
pub fn write_event_file(stream: &EventStream, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(&EVT_MAGIC).map_err(io)?;
    w.write_u16::<LittleEndian>(stream.geometry.width)
        .map_err(io)?;
    w.write_u16::<LittleEndian>(stream.geometry.height)
        .map_err(io)?;
    w.write_u64::<LittleEndian>(stream.events.len() as u64)
        .map_err(io)?;
    for ev in &stream.events {
        w.write_i64::<LittleEndian>(ev.t_us).map_err(io)?;
        w.write_u16::<LittleEndian>(ev.x).map_err(io)?;
        w.write_u16::<LittleEndian>(ev.y).map_err(io)?;
        w.write_u8(ev.polarity).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_exact_at(rdr: &mut impl Read, buf: &mut [u8], path: &Path, offset: u64) -> Result<()> {
    rdr.read_exact(buf)
        .map_err(|_| Error::format(path, offset, "truncated header"))
}
