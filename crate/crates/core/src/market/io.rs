//! PathSet persistence: a flat little-endian binary format and a CSV export.
//!
//! Binary layout:
//!
//! ```text
//! magic "HPTH" | version u32 | n_paths u64 | steps u64 | dt f64 | substeps u64
//! | x0 v0 kappa theta xi rho (f64 each) | seed u64 | first_stream u64
//! | clamped_substeps u64 | spot [n_paths*(steps+1)] f64 | variance [..] f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HestonParams, MarketError, MarketResult, PathSet};

const MAGIC: &[u8; 4] = b"HPTH";
const VERSION: u32 = 1;

impl PathSet {
    pub fn write_binary(&self, path: impl AsRef<Path>) -> MarketResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> MarketResult<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [self.n_paths as u64, self.steps as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.substeps as u64).to_le_bytes())?;
        let p = &self.params;
        for v in [p.x0, p.v0, p.kappa, p.theta, p.xi, p.rho] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.seed, self.first_stream, self.clamped_substeps] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.spot.iter().chain(&self.variance) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> MarketResult<PathSet> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> MarketResult<PathSet> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MarketError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(MarketError::Format(format!("unsupported version {version}")));
        }
        let n_paths = read_u64(r)? as usize;
        let steps = read_u64(r)? as usize;
        let dt = read_f64(r)?;
        let substeps = read_u64(r)? as usize;
        let params = HestonParams {
            x0: read_f64(r)?,
            v0: read_f64(r)?,
            kappa: read_f64(r)?,
            theta: read_f64(r)?,
            xi: read_f64(r)?,
            rho: read_f64(r)?,
        };
        let seed = read_u64(r)?;
        let first_stream = read_u64(r)?;
        let clamped_substeps = read_u64(r)?;
        let len = n_paths
            .checked_mul(steps + 1)
            .ok_or_else(|| MarketError::Format("size overflow".into()))?;
        let spot = read_f64s(r, len)?;
        let variance = read_f64s(r, len)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(MarketError::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(PathSet {
            params,
            n_paths,
            steps,
            dt,
            substeps,
            seed,
            first_stream,
            spot,
            variance,
            clamped_substeps,
        })
    }

    /// One row per `(path, step)`.
    pub fn write_csv(&self, w: &mut impl Write) -> MarketResult<()> {
        writeln!(w, "path,step,spot,variance")?;
        for p in 0..self.n_paths {
            for (t, (x, v)) in self.spot(p).iter().zip(self.variance(p)).enumerate() {
                writeln!(w, "{p},{t},{x},{v}")?;
            }
        }
        Ok(())
    }
}

fn read_u64(r: &mut impl Read) -> MarketResult<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> MarketResult<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> MarketResult<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::simulate;

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let set = simulate(&HestonParams::default(), 7, 12, 0.004, 2, 5).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HPTH");
        let back = PathSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let set = simulate(&HestonParams::default(), 2, 3, 0.004, 1, 5).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert!(PathSet::read_from(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(matches!(
            PathSet::read_from(&mut buf.as_slice()),
            Err(MarketError::Format(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_path_step() {
        let set = simulate(&HestonParams::default(), 3, 4, 0.004, 1, 5).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 5);
        assert!(text.starts_with("path,step,spot,variance\n0,0,1,0.0625"));
    }
}
