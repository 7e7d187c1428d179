//! Text AER codec.
//!
//! ```text
//! # aer v1 W=64 H=64
//! 10,3,4,1
//! 12,5,4,-1
//! ```
//!
//! One `t,x,y,p` event per line, `p` in {1, -1}. Lines starting with `#` are
//! comments; the header must precede the first event.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Event, Geometry, Polarity};
use crate::error::{Error, Result};

pub const AER_HEADER_PREFIX: &str = "# aer v1";

pub fn parse_aer(text: &str) -> Result<(Geometry, Vec<Event>)> {
    let mut geometry = None;
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(AER_HEADER_PREFIX) {
            if geometry.is_some() {
                return Err(parse_err(line_no, "duplicate header"));
            }
            geometry = Some(parse_header(rest, line_no)?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let geometry = geometry
            .ok_or_else(|| parse_err(line_no, "event before `# aer v1 W=<w> H=<h>` header"))?;
        events.push(parse_event(line, line_no, geometry)?);
    }
    let geometry = geometry.ok_or_else(|| parse_err(0, "missing `# aer v1` header"))?;
    Ok((geometry, events))
}

fn parse_header(rest: &str, line_no: usize) -> Result<Geometry> {
    let mut width = None;
    let mut height = None;
    for token in rest.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("malformed header field `{token}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad header value `{token}`")))?;
        match key {
            "W" => width = Some(value),
            "H" => height = Some(value),
            _ => return Err(parse_err(line_no, format!("unknown header field `{key}`"))),
        }
    }
    match (width, height) {
        (Some(w), Some(h)) if w > 0 && h > 0 => Ok(Geometry::new(w, h)),
        _ => Err(parse_err(line_no, "header needs positive W and H")),
    }
}

fn parse_event(line: &str, line_no: usize, geometry: Geometry) -> Result<Event> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(parse_err(
            line_no,
            format!("expected 4 fields `t,x,y,p`, found {}", fields.len()),
        ));
    }
    let num = |s: &str, what: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| parse_err(line_no, format!("bad {what} `{s}`")))
    };
    let t = num(fields[0], "timestamp")?;
    let x = u32::try_from(num(fields[1], "x")?).map_err(|_| parse_err(line_no, "x overflows"))?;
    let y = u32::try_from(num(fields[2], "y")?).map_err(|_| parse_err(line_no, "y overflows"))?;
    let p = fields[3]
        .parse::<i64>()
        .ok()
        .and_then(Polarity::from_value)
        .ok_or_else(|| parse_err(line_no, format!("polarity `{}` is not 1 or -1", fields[3])))?;
    if !geometry.contains(x, y) {
        return Err(parse_err(
            line_no,
            format!("({x}, {y}) outside the {geometry} sensor"),
        ));
    }
    Ok(Event::new(x, y, t, p))
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn render_aer(geometry: Geometry, events: &[Event]) -> String {
    let mut out = String::with_capacity(16 * events.len() + 32);
    out.push_str(&format!(
        "{AER_HEADER_PREFIX} W={} H={}\n",
        geometry.width, geometry.height
    ));
    for e in events {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p.value()));
    }
    out
}

pub fn read_aer(path: impl AsRef<Path>) -> Result<(Geometry, Vec<Event>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_aer(&text)
}

pub fn write_aer(path: impl AsRef<Path>, geometry: Geometry, events: &[Event]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(render_aer(geometry, events).as_bytes())
        .map_err(|e| Error::io(path, e))
}
