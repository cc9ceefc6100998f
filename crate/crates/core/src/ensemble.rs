//! Stored prior ensembles.
//!
//! Layout (little-endian): magic `RFPR`, u32 version, u32 D, u64 T, L_x, L_y,
//! n, l, f64 κ, λ, u64 count, then `count` configurations of
//! `n · T · L_x · L_y` f64 values in site-index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lattice::{ActionParams, FieldConfig, ReplicaGeometry};

pub const PRIOR_MAGIC: &[u8; 4] = b"RFPR";
pub const PRIOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub geometry: ReplicaGeometry,
    pub params: ActionParams,
    pub fields: Vec<FieldConfig>,
}

impl Ensemble {
    pub fn write(&self, out: impl Write) -> Result<()> {
        let mut w = BufWriter::new(out);
        let g = &self.geometry;
        w.write_all(PRIOR_MAGIC)?;
        w.write_all(&PRIOR_VERSION.to_le_bytes())?;
        w.write_all(&(g.dim as u32).to_le_bytes())?;
        for v in [g.extent_t, g.extent_x, g.extent_y, g.n_replicas, g.cut, self.fields.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.params.kappa.to_le_bytes())?;
        w.write_all(&self.params.lambda.to_le_bytes())?;
        for f in &self.fields {
            if f.len() != g.n_sites() {
                return Err(Error::ShapeMismatch { expected: g.n_sites(), got: f.len() });
            }
            for x in f.values() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(input: impl Read) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != PRIOR_MAGIC {
            return Err(Error::Format("not a prior ensemble (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != PRIOR_VERSION {
            return Err(Error::Incompatible(format!("ensemble version {version}, expected {PRIOR_VERSION}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = usize::try_from(read_u64(&mut r)?).map_err(|_| Error::Format("size field overflows".into()))?;
        }
        let [t, lx, ly, n, cut, count] = dims;
        let geometry = ReplicaGeometry::new(dim, t, lx, ly, n, cut)?;
        let params = ActionParams::new(read_f64(&mut r)?, read_f64(&mut r)?)?;
        let sites = geometry.n_sites();
        let mut fields = Vec::with_capacity(count.min(1 << 16));
        let mut buf = vec![0u8; 8 * sites];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(truncated)?;
            let v = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            fields.push(FieldConfig::from_values(&geometry, v)?);
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after ensemble".into()));
        }
        Ok(Ensemble { geometry, params, fields })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("ensemble truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let g = ReplicaGeometry::new_2d(4, 3, 2, 1).unwrap();
        let fields = (0..3).map(|k| FieldConfig::from_values(&g, (0..24).map(|i| (i * k) as f64 * 0.1 - 1.0).collect()).unwrap()).collect();
        let e = Ensemble { geometry: g, params: ActionParams::new(0.2, 0.03).unwrap(), fields };
        let mut bytes = Vec::new();
        e.write(&mut bytes).unwrap();
        assert_eq!(Ensemble::read(&bytes[..]).unwrap(), e);
        assert!(matches!(Ensemble::read(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes.push(1);
        assert!(Ensemble::read(&bytes[..]).is_err());
    }
}
