//! Dataset file format, bit-exact:
//!
//! ```text
//! magic   "EQVD" (4 bytes)
//! version u16 LE (currently 1)
//! header  H u32, W u32, count u32, split tag u8, generation seed u64,
//!         elastic spec as 6 f64 LE (E_soft, contrast, nu, E11, E22, E12)
//! pairs   count x [ phase HxW f64, s11 HxW f64, s22 HxW f64, s12 HxW f64 ]
//! trailer norm_scale f64 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, ElasticSpec, Microstructure, SamplePair, Split};
use crate::error::{Error, Result};
use crate::field::{ScalarField2D, StressField};

const MAGIC: &[u8; 4] = b"EQVD";
const VERSION: u16 = 1;

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (h, wd) = ds.shape();
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(wd as u32).to_le_bytes())?;
    w.write_all(&(ds.pairs.len() as u32).to_le_bytes())?;
    w.write_all(&[ds.split.tag()])?;
    w.write_all(&ds.generation_seed.to_le_bytes())?;
    let spec = &ds.elastic_spec;
    for v in [
        spec.young_modulus_soft,
        spec.contrast,
        spec.poisson_ratio,
        spec.applied_strain[0],
        spec.applied_strain[1],
        spec.applied_strain[2],
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for pair in &ds.pairs {
        write_values(&mut w, pair.input.phase().values())?;
        for c in pair.target.components() {
            write_values(&mut w, c.values())?;
        }
    }
    w.write_all(&ds.norm_scale().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_values(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let parse_err = |reason: &str| Error::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(parse_err("bad magic bytes"));
    }
    let version = read_u16(&mut r, path)?;
    if version != VERSION {
        return Err(parse_err(&format!("unsupported version {version}")));
    }
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let count = read_u32(&mut r, path)? as usize;
    if h == 0 || w == 0 || count == 0 {
        return Err(parse_err("zero dimension in header"));
    }
    let mut tag = [0u8; 1];
    read_exact(&mut r, &mut tag, path, "split tag")?;
    let split = Split::from_tag(tag[0]).ok_or_else(|| parse_err("unknown split tag"))?;
    let generation_seed = read_u64(&mut r, path)?;
    let mut spec_vals = [0.0f64; 6];
    for v in &mut spec_vals {
        *v = read_f64(&mut r, path)?;
    }
    let elastic_spec = ElasticSpec {
        young_modulus_soft: spec_vals[0],
        contrast: spec_vals[1],
        poisson_ratio: spec_vals[2],
        applied_strain: [spec_vals[3], spec_vals[4], spec_vals[5]],
    };

    let mut raw_pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let phase = read_field(&mut r, h, w, path)?;
        let s11 = read_field(&mut r, h, w, path)?;
        let s22 = read_field(&mut r, h, w, path)?;
        let s12 = read_field(&mut r, h, w, path)?;
        let micro = Microstructure::new(phase)
            .map_err(|e| parse_err(&format!("invalid phase payload: {e}")))?;
        let target = StressField::new(s11, s22, s12)?;
        raw_pairs.push((micro, target));
    }
    let norm_scale = read_f64(&mut r, path)?;
    if norm_scale <= 0.0 || !norm_scale.is_finite() {
        return Err(parse_err("invalid norm_scale"));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(parse_err("trailing bytes after payload"));
    }

    let pairs = raw_pairs
        .into_iter()
        .map(|(input, target)| SamplePair {
            input,
            target,
            norm_scale,
        })
        .collect();
    Ok(Dataset {
        pairs,
        split,
        generation_seed,
        elastic_spec,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        reason: format!("truncated while reading {what}"),
    })
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path, "u16")?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, "u32")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path, "u64")?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path, "f64")?;
    Ok(f64::from_le_bytes(b))
}

fn read_field(r: &mut impl Read, h: usize, w: usize, path: &Path) -> Result<ScalarField2D> {
    let mut values = Vec::with_capacity(h * w);
    let mut buf = vec![0u8; h * w * 8];
    read_exact(r, &mut buf, path, "field payload")?;
    for chunk in buf.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    ScalarField2D::new(h, w, values).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: format!("invalid field payload: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, GenerationConfig};
    use std::io::{Seek, SeekFrom};

    fn sample_dataset() -> Dataset {
        let config = GenerationConfig {
            size: 16,
            ..GenerationConfig::default()
        };
        generate_split(&config, Split::Train, 3, 99).unwrap().dataset
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.eqvd");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn file_size_matches_format() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.eqvd");
        write_dataset(&ds, &path).unwrap();
        let (h, w) = ds.shape();
        let header = 4 + 2 + 4 + 4 + 4 + 1 + 8 + 6 * 8;
        let payload = ds.pairs.len() * 4 * h * w * 8;
        let expected = header + payload + 8;
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
    }

    #[test]
    fn corrupted_magic_is_a_parse_error() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.eqvd");
        write_dataset(&ds, &path).unwrap();
        let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.seek(SeekFrom::Start(0)).unwrap();
        f.write_all(b"XXXX").unwrap();
        drop(f);
        assert!(matches!(read_dataset(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn truncated_payload_is_a_parse_error() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.eqvd");
        write_dataset(&ds, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 16).unwrap();
        drop(f);
        assert!(matches!(read_dataset(&path), Err(Error::Parse { .. })));
    }
}
