//! Event and event-frame data model.
//!
//! Frames are ternary, row-major, origin at top-left. A cell holds `+1` for a
//! positive event, `-1` for a negative one and `0` otherwise.

mod aer;
mod pgm;

pub use aer::{parse_aer, read_aer, render_aer, write_aer, AER_HEADER_PREFIX};
pub use pgm::{frame_to_pgm, read_pgm, write_frame_pgm, write_pgm, GrayImage};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
}

impl Geometry {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::dimension(self, other))
        }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn value(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// One AER tuple. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// An `H x W` ternary array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrame {
    geometry: Geometry,
    cells: Vec<i8>,
    pub frame_index: usize,
}

impl EventFrame {
    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            cells: vec![0; geometry.area()],
            frame_index: 0,
        }
    }

    /// Builds a frame from row-major cells; every cell must be in {-1, 0, 1}.
    pub fn from_cells(geometry: Geometry, cells: Vec<i8>) -> Result<Self> {
        if cells.len() != geometry.area() {
            return Err(Error::dimension(
                format!("{} cells", geometry.area()),
                format!("{} cells", cells.len()),
            ));
        }
        if let Some(bad) = cells.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(Error::InvalidValue(format!(
                "frame cell {bad} is not ternary"
            )));
        }
        Ok(Self {
            geometry,
            cells,
            frame_index: 0,
        })
    }

    pub fn with_index(mut self, frame_index: usize) -> Self {
        self.frame_index = frame_index;
        self
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn cells(&self) -> &[i8] {
        &self.cells
    }

    pub fn get(&self, x: usize, y: usize) -> i8 {
        self.cells[y * self.geometry.width + x]
    }

    /// Panics if `value` is not ternary or the coordinate is out of range.
    pub fn set(&mut self, x: usize, y: usize, value: i8) {
        assert!((-1..=1).contains(&value), "cell value {value} is not ternary");
        let w = self.geometry.width;
        self.cells[y * w + x] = value;
    }

    pub fn nonzero_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|&c| c == 0)
    }

    /// Nonzero cells as events stamped with `t`.
    pub fn to_events(&self, t: u64) -> Vec<Event> {
        let w = self.geometry.width;
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| {
                Polarity::from_value(c as i64)
                    .map(|p| Event::new((i % w) as u32, (i / w) as u32, t, p))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSequence {
    geometry: Geometry,
    pub dt: u64,
    frames: Vec<EventFrame>,
}

impl FrameSequence {
    /// Frames are re-indexed from 0 in the given order.
    pub fn new(geometry: Geometry, dt: u64, frames: Vec<EventFrame>) -> Result<Self> {
        let mut frames = frames;
        for (i, f) in frames.iter_mut().enumerate() {
            geometry.ensure_same(&f.geometry())?;
            f.frame_index = i;
        }
        Ok(Self {
            geometry,
            dt,
            frames,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn frames(&self) -> &[EventFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<EventFrame> {
        self.frames
    }
}

/// Groups events into equal-time frames.
///
/// Event `e` lands in frame `floor((e.t - t_start) / dt)`. Several events on
/// one cell within a bin resolve to the sign of their polarity sum (0 on a
/// tie). With `frame_count` unset the sequence ends at the last occupied bin;
/// with it set, events past the horizon are a range error.
pub fn bin_events(
    events: &[Event],
    t_start: u64,
    dt: u64,
    geometry: Geometry,
    frame_count: Option<usize>,
) -> Result<FrameSequence> {
    if dt == 0 {
        return Err(Error::InvalidValue("bin interval dt must be positive".into()));
    }
    let mut bins = Vec::with_capacity(events.len());
    let mut max_bin = None;
    for e in events {
        if e.t < t_start {
            return Err(Error::Range {
                t: e.t,
                reason: format!("before t_start = {t_start}"),
            });
        }
        if !geometry.contains(e.x, e.y) {
            return Err(Error::OutOfGeometry {
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        let bin = ((e.t - t_start) / dt) as usize;
        if let Some(n) = frame_count {
            if bin >= n {
                return Err(Error::Range {
                    t: e.t,
                    reason: format!("past the {n}-frame horizon"),
                });
            }
        }
        max_bin = max_bin.max(Some(bin));
        bins.push(bin);
    }
    let n = frame_count.unwrap_or(max_bin.map_or(0, |b| b + 1));

    // Net polarity per (bin, cell); sign is taken afterwards so order never matters.
    let area = geometry.area();
    let mut net = vec![0i32; n * area];
    for (e, &bin) in events.iter().zip(&bins) {
        let cell = e.y as usize * geometry.width + e.x as usize;
        net[bin * area + cell] += e.p.value() as i32;
    }
    let frames = net
        .chunks(area.max(1))
        .take(n)
        .enumerate()
        .map(|(i, chunk)| EventFrame {
            geometry,
            cells: chunk.iter().map(|v| v.signum() as i8).collect(),
            frame_index: i,
        })
        .collect();
    FrameSequence::new(geometry, dt, frames)
}

/// Result of [`inject_noise`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisyFrame {
    pub frame: EventFrame,
    pub injected: usize,
    /// True when every zero cell was filled before the requested count was reached.
    pub saturated: bool,
}

/// Adds `ceil(noise_level * nonzero)` spurious events on uniformly chosen
/// empty cells, each with a uniformly chosen polarity.
///
/// For one seed, the cells chosen at a lower level are a prefix of those
/// chosen at a higher level, so noise grows by accretion as the level rises.
pub fn inject_noise(frame: &EventFrame, noise_level: f64, seed: u64) -> Result<NoisyFrame> {
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(Error::InvalidValue(format!(
            "noise level must be a finite non-negative ratio, got {noise_level}"
        )));
    }
    let requested = noise_count(noise_level, frame.nonzero_count());
    let mut empty: Vec<usize> = frame
        .cells
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    let mut rng = rng::seeded(seed);
    empty.shuffle(&mut rng);

    let injected = requested.min(empty.len());
    let mut out = frame.clone();
    for &cell in &empty[..injected] {
        out.cells[cell] = if rng.gen::<bool>() { 1 } else { -1 };
    }
    Ok(NoisyFrame {
        frame: out,
        injected,
        saturated: injected < requested,
    })
}

fn noise_count(level: f64, nonzero: usize) -> usize {
    // The slack keeps products like 0.1 * 30 from rounding up to 4.
    (level * nonzero as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Applies [`inject_noise`] to every frame, deriving one seed per frame.
pub fn inject_noise_sequence(seq: &FrameSequence, noise_level: f64, seed: u64) -> Result<FrameSequence> {
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| inject_noise(f, noise_level, rng::derive_seed(seed, i as u64)).map(|n| n.frame))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(seq.geometry(), seq.dt, frames)
}
