//! Binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "EVPACKPT" | version u32 | kind str | width u32 | height u32
//! tau f32 | v_th f32 | alpha f32
//! n_meta u32 | (key str, value str) * n_meta
//! n_layers u32 | layer * n_layers
//! layer: name str | kind u8 | in u32 | out u32 | kernel u32 | stride u32
//!        padding u32 | output_padding u32 | has_bias u8
//!        n_weight u32 | f32 * n_weight | n_bias u32 | f32 * n_bias
//! str:   len u16 | utf-8 bytes
//! ```
//!
//! A `<file>.manifest` text sidecar lists the same header for humans.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ConvLayer, ConvSpec, LayerKind, LifParams};
use crate::error::{Error, Result};
use crate::events::Geometry;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVPACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub geometry: Geometry,
    pub lif: LifParams,
    pub meta: Vec<(String, String)>,
    pub layers: Vec<ConvLayer<f32>>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn layer(&self, name: &str) -> Result<&ConvLayer<f32>> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing layer `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.kind)?;
        put_u32(&mut out, self.geometry.width as u32);
        put_u32(&mut out, self.geometry.height as u32);
        for v in [self.lif.tau, self.lif.v_th, self.lif.alpha] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        put_u32(&mut out, self.layers.len() as u32);
        for l in &self.layers {
            put_str(&mut out, &l.name)?;
            let s = &l.spec;
            out.push(s.kind.tag());
            for v in [s.in_channels, s.out_channels, s.kernel, s.stride, s.padding, s.output_padding] {
                put_u32(&mut out, v as u32);
            }
            out.push(s.bias as u8);
            for values in [&l.weight, &l.bias] {
                put_u32(&mut out, values.len() as u32);
                for w in values.iter() {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let geometry = Geometry::new(r.u32()? as usize, r.u32()? as usize);
        let lif = LifParams {
            tau: r.f32()? as f64,
            v_th: r.f32()? as f64,
            alpha: r.f32()? as f64,
        };
        let n_meta = r.u32()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_layers = r.u32()?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let name = r.string()?;
            let kind = LayerKind::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint("bad layer kind".into()))?;
            let mut dims = [0usize; 6];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let bias = r.u8()? != 0;
            let spec = ConvSpec {
                kind,
                in_channels: dims[0],
                out_channels: dims[1],
                kernel: dims[2],
                stride: dims[3],
                padding: dims[4],
                output_padding: dims[5],
                bias,
            };
            spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
            let weight = r.floats()?;
            let bias_values = r.floats()?;
            if weight.len() != spec.weight_len() || bias_values.len() != if bias { spec.out_channels } else { 0 } {
                return Err(Error::Checkpoint(format!("layer `{name}` has the wrong parameter count")));
            }
            layers.push(ConvLayer {
                name,
                spec,
                weight,
                bias: bias_values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            geometry,
            lif,
            meta,
            layers,
        })
    }

    pub fn manifest(&self) -> String {
        let mut m = format!(
            "format = evpa-checkpoint\nversion = {CHECKPOINT_VERSION}\nkind = {}\ngeometry = {}\nlif.tau = {}\nlif.v_th = {}\nlif.alpha = {}\n",
            self.kind, self.geometry, self.lif.tau as f32, self.lif.v_th as f32, self.lif.alpha as f32
        );
        for (k, v) in &self.meta {
            m.push_str(&format!("meta.{k} = {v}\n"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let s = &l.spec;
            m.push_str(&format!(
                "layer.{i} = {} {} {}->{} k{} s{} p{} op{} bias={} params={}\n",
                l.name,
                s.kind.name(),
                s.in_channels,
                s.out_channels,
                s.kernel,
                s.stride,
                s.padding,
                s.output_padding,
                s.bias,
                l.weight.len() + l.bias.len()
            ));
        }
        m
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the checkpoint and its sidecar manifest.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))?;
    let side = manifest_path(path);
    fs::write(&side, ckpt.manifest()).map_err(|e| Error::io(side, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Checkpoint(format!("string too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 string".into()))
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint {
        let mut r = rng::seeded(3);
        Checkpoint {
            kind: "test".into(),
            geometry: Geometry::new(16, 8),
            lif: LifParams::default(),
            meta: vec![("steps".into(), "10".into())],
            layers: vec![
                ConvLayer::kaiming_uniform("enc0", ConvSpec::conv(LayerKind::SpikingConv, 2, 4, 3, 2, 1), 1.0, &mut r),
                ConvLayer::kaiming_uniform("dec0", ConvSpec::deconv(4, 3, 3, 2, 1), 1.0, &mut r),
            ],
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
        let manifest = fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("layer.1 = dec0 analog-deconv 4->3"));
        assert!(manifest.contains("meta.steps = 10"));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
