//! Checkpoint container.
//!
//! ```text
//! "3DRN" | version u32 | config JSON length u32 | config JSON (UTF-8)
//! tensor count u32 | per tensor: name length u16 | name | rank u8 | dims u32… | values f32…
//! ```
//! All integers and floats are little-endian. Values are stored in single
//! precision.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::regnet::{RegNetConfig, RegNetParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"3DRN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub networks: Vec<RegNetConfig>,
    pub params: RegNetParams,
}

impl Checkpoint {
    pub fn new(networks: Vec<RegNetConfig>, params: RegNetParams) -> Self {
        Self { networks, params }
    }

    /// The checkpoint as it reads back from disk.
    pub fn at_stored_precision(&self) -> Self {
        Self {
            networks: self.networks.clone(),
            params: self.params.to_f32_precision(),
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params.validate(&ckpt.networks)?;
    let config = serde_json::to_vec(&ckpt.networks).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;
    w.write_u32::<LE>(config.len() as u32)?;
    w.write_all(&config)?;
    let tensors = ckpt.params.tensors();
    w.write_u32::<LE>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(t.rank() as u8)?;
        for &d in t.dims() {
            w.write_u32::<LE>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LE>(v as f32)?;
        }
    }
    Ok(())
}

fn eof_as(make: impl Fn() -> Error) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            make()
        } else {
            Error::Io(e)
        }
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let header = eof_as(|| Error::Truncated("checkpoint header".into()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&header)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LE>().map_err(&header)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.read_u32::<LE>().map_err(&header)? as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config).map_err(&header)?;
    let networks: Vec<RegNetConfig> =
        serde_json::from_slice(&config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.read_u32::<LE>().map_err(&header)?;
    let mut tensors = BTreeMap::new();
    for k in 0..count {
        let name_err = eof_as(move || Error::Truncated(format!("checkpoint tensor #{k} name")));
        let name_len = r.read_u16::<LE>().map_err(&name_err)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(&name_err)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format(format!("tensor #{k} name is not UTF-8")))?;
        let body_err = {
            let name = name.clone();
            eof_as(move || Error::shape("checkpoint", format!("tensor '{name}' is truncated")))
        };
        let rank = r.read_u8().map_err(&body_err)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LE>().map_err(&body_err)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut buf = vec![0f32; n];
        r.read_f32_into::<LE>(&mut buf).map_err(&body_err)?;
        let t = Tensor::new(dims, buf.into_iter().map(f64::from).collect())?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("tensor '{name}' appears twice")));
        }
    }
    let params = RegNetParams::from_map(tensors);
    params.validate(&networks)?;
    Ok(Checkpoint { networks, params })
}
