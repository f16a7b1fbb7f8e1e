//! Weights file.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      b"Q3DW"
//! version    u16 (= 1)
//! layers     u16
//! per layer:
//!   variant    u8   0 = QRU3D, 1 = QRU2D, 2 = C3D
//!   direction  u8   0 = forward, 1 = backward, 2 = bidirectional
//!   cout, cin, kh, kw, kb          u32 × 5
//!   stride (num, den) for h, w, b  u32 × 6
//!   parameters  f32, for each kernel bank in order (wz, wf, then the
//!               reverse branch's wz, wf): weights then biases
//! ```
//!
//! The network always loads with its global input residual enabled.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerSpec, Model, NetworkConfig};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::qru::{Direction, QruUnit, Sampling, UnitKind, UnitParams, UnitSpec};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"Q3DW";
pub const WEIGHTS_VERSION: u16 = 1;

pub fn write_weights_to(w: &mut impl Write, model: &Model<f32>) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let n = u16::try_from(model.units.len()).map_err(|_| Error::Config("too many layers".into()))?;
    w.write_all(&n.to_le_bytes())?;
    for unit in &model.units {
        let s = unit.spec;
        let k = s.kernel_shape();
        w.write_all(&[s.kind.tag(), s.direction.tag()])?;
        for v in [k.cout, k.cin, k.kh, k.kw, k.kb] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (num, den) in s.sampling.stride_fraction() {
            w.write_all(&num.to_le_bytes())?;
            w.write_all(&den.to_le_bytes())?;
        }
        for t in unit.params.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_weights(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights_to(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn read_weights_from(r: impl Read) -> Result<Model<f32>> {
    let mut c = Cursor::new(r);
    let magic = c.bytes::<4>("magic")?;
    if &magic != WEIGHTS_MAGIC {
        return c.fail(0, format!("bad magic {magic:?}, expected Q3DW"));
    }
    let version = c.u16("version")?;
    if version != WEIGHTS_VERSION {
        return c.fail(4, format!("unsupported version {version}"));
    }
    let count = c.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    let mut units = Vec::with_capacity(count);
    let mut in_channels = None;
    for l in 0..count {
        let at = c.offset;
        let kind = c.u8("variant")?;
        let kind = UnitKind::from_tag(kind).map_or_else(|| c.fail(at, format!("unknown variant tag {kind}")), Ok)?;
        let dir = c.u8("direction")?;
        let direction =
            Direction::from_tag(dir).map_or_else(|| c.fail(at + 1, format!("unknown direction tag {dir}")), Ok)?;
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = c.u32("kernel shape")? as usize;
        }
        let [cout, cin, kh, kw, kb] = dims;
        let mut frac = [(0u32, 0u32); 3];
        for f in frac.iter_mut() {
            *f = (c.u32("stride numerator")?, c.u32("stride denominator")?);
        }
        let sampling = Sampling::from_fraction(frac)
            .map_or_else(|| c.fail(at, format!("layer {l}: unsupported stride {frac:?}")), Ok)?;
        let spec = UnitSpec { kind, cin, cout, direction, sampling };
        if [kh, kw, kb] != kind.kernel_extent() {
            return c.fail(at, format!("layer {l}: kernel {:?} does not match {kind}", [kh, kw, kb]));
        }
        let mut params = UnitParams::<f32>::zeros(&spec);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = c.f32("parameters")?;
            }
        }
        in_channels.get_or_insert(cin);
        layers.push(LayerSpec { cout, sampling, direction, kind });
        units.push(QruUnit { spec, params });
    }
    if !c.at_end()? {
        return c.fail(c.offset, "trailing bytes after last layer".into());
    }
    let config = NetworkConfig { in_channels: in_channels.unwrap_or(1), layers, global_residual: true };
    Model::from_units(config, units)
        .map_err(|e| Error::Format { offset: c.offset, message: format!("inconsistent network: {e}") })
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Model<f32>> {
    read_weights_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_network;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = build_network(&NetworkConfig::benchmark(), 9).unwrap();
        let mut buf = Vec::new();
        write_weights_to(&mut buf, &m).unwrap();
        let back = read_weights_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let header = 4 + 2 + 2 + 12 * (2 + 20 + 24);
        assert_eq!(buf.len(), header + 4 * m.param_count());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let m = build_network(&NetworkConfig::desk(), 1).unwrap();
        let mut buf = Vec::new();
        write_weights_to(&mut buf, &m).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights_from(bad.as_slice()), Err(Error::Format { offset: 0, .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_weights_from(bad.as_slice()), Err(Error::Format { offset: 4, .. })));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_weights_from(cut), Err(Error::Format { .. })));
    }
}
