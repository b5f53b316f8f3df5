//! Little-endian dataset container.
//!
//! ```text
//! "3DRG" | version u32 | pair count u64
//! per pair: pair_id u64 | N u32 | flags u8 (bit0 labels, bit1 gt)
//!           P as N×3 f32 | Q as N×3 f32 | [labels N×u8] | [R row-major 9×f32, t 3×f32]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::estimators::CorrespondenceSet;
use crate::geom3d::RigidTransform;

pub const DATASET_MAGIC: [u8; 4] = *b"3DRG";
pub const DATASET_VERSION: u32 = 1;

const HAS_LABELS: u8 = 1;
const HAS_GT: u8 = 2;

pub fn write_dataset(path: impl AsRef<Path>, sets: &[CorrespondenceSet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, sets)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to(w: &mut impl Write, sets: &[CorrespondenceSet]) -> Result<()> {
    w.write_all(&DATASET_MAGIC)?;
    w.write_u32::<LE>(DATASET_VERSION)?;
    w.write_u64::<LE>(sets.len() as u64)?;
    for s in sets {
        let n = u32::try_from(s.len()).map_err(|_| Error::InvalidInput("pair too large".into()))?;
        w.write_u64::<LE>(s.pair_id)?;
        w.write_u32::<LE>(n)?;
        let flags = if s.labels.is_some() { HAS_LABELS } else { 0 } | if s.gt.is_some() { HAS_GT } else { 0 };
        w.write_u8(flags)?;
        for cloud in [&s.p, &s.q] {
            for v in cloud.iter() {
                for c in v.iter() {
                    w.write_f32::<LE>(*c as f32)?;
                }
            }
        }
        if let Some(labels) = &s.labels {
            for &y in labels {
                w.write_u8(y as u8)?;
            }
        }
        if let Some(gt) = &s.gt {
            for v in gt.to_row_major() {
                w.write_f32::<LE>(v as f32)?;
            }
        }
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<CorrespondenceSet>> {
    read_dataset_from(&mut BufReader::new(File::open(path)?))
}

/// Maps an unexpected end of input to a truncation error naming the record.
fn truncated(record: Option<u64>) -> impl Fn(std::io::Error) -> Error {
    move |e| match (e.kind(), record) {
        (ErrorKind::UnexpectedEof, Some(i)) => Error::Truncated(format!("dataset record {i}")),
        (ErrorKind::UnexpectedEof, None) => Error::Truncated("dataset header".into()),
        _ => Error::Io(e),
    }
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<Vec<CorrespondenceSet>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated(None))?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = r.read_u32::<LE>().map_err(truncated(None))?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = r.read_u64::<LE>().map_err(truncated(None))?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let eof = truncated(Some(i));
        let pair_id = r.read_u64::<LE>().map_err(&eof)?;
        let n = r.read_u32::<LE>().map_err(&eof)? as usize;
        let flags = r.read_u8().map_err(&eof)?;
        if n == 0 {
            return Err(Error::Format(format!("dataset record {i} has no correspondences")));
        }
        if flags & !(HAS_LABELS | HAS_GT) != 0 {
            return Err(Error::Format(format!("dataset record {i} has unknown flags {flags:#04x}")));
        }
        let mut cloud = || -> Result<Vec<Vector3<f64>>> {
            let mut buf = vec![0f32; 3 * n];
            r.read_f32_into::<LE>(&mut buf).map_err(&eof)?;
            Ok(buf.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect())
        };
        let p = cloud()?;
        let q = cloud()?;
        let labels = if flags & HAS_LABELS != 0 {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(&eof)?;
            if let Some(bad) = buf.iter().find(|&&b| b > 1) {
                return Err(Error::Format(format!("dataset record {i} has label byte {bad}")));
            }
            Some(buf.into_iter().map(|b| b == 1).collect())
        } else {
            None
        };
        let gt = if flags & HAS_GT != 0 {
            let mut buf = [0f32; 12];
            r.read_f32_into::<LE>(&mut buf).map_err(&eof)?;
            let v = buf.map(f64::from);
            // Stored rotations are only f32-orthonormal, so they are taken
            // as is rather than re-validated at the f64 tolerance.
            Some(RigidTransform::from_row_major(&v))
        } else {
            None
        };
        let mut set = CorrespondenceSet::new(pair_id, p, q)
            .map_err(|e| Error::Format(format!("dataset record {i}: {e}")))?;
        if let Some(l) = labels {
            set = set.with_labels(l)?;
        }
        if let Some(gt) = gt {
            set = set.with_gt(gt);
        }
        out.push(set);
    }
    Ok(out)
}

/// Rounds every stored field to `f32`, the precision kept on disk.
pub fn to_stored_precision(s: &CorrespondenceSet) -> CorrespondenceSet {
    let round = |v: &Vector3<f64>| v.map(|c| c as f32 as f64);
    let mut out = s.clone();
    out.p = s.p.iter().map(round).collect();
    out.q = s.q.iter().map(round).collect();
    out.gt = s.gt.map(|gt| RigidTransform {
        rotation: Matrix3::from_fn(|i, j| gt.rotation[(i, j)] as f32 as f64),
        translation: round(&gt.translation),
    });
    out
}
