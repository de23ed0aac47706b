//! Named-section container for trained generators and baselines.
//!
//! ```text
//! magic "DISCWT\0\0" | u32 version = 2 | u32 section count
//! per section: u32 name length, name (utf-8), u32 dtype (0 = f32 matrix, 1 = utf-8 text),
//!              u32 rows, u32 cols, u64 offset, u64 byte length
//! section payloads at their absolute offsets
//! ```
//!
//! Every container carries a `kind` text section naming the model family
//! and a `config` text section with its JSON configuration.

use crate::error::{DiscError, Result};
use crate::policy::{Reader, WEIGHT_MAGIC};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 2;

const DTYPE_F32: u32 = 0;
const DTYPE_TEXT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: impl Into<String>, ps: &ParamSet) -> Self {
        Self {
            kind: kind.into(),
            config: config.into(),
            params: ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies stored values into `ps`, which must have the same names and shapes.
    pub fn load_into(&self, ps: &mut ParamSet) -> Result<()> {
        if self.params.len() != ps.len() {
            return Err(DiscError::Format {
                offset: 0,
                msg: format!("checkpoint has {} tensors, model has {}", self.params.len(), ps.len()),
            });
        }
        for (name, t) in &self.params {
            let id = ps.id_of(name).ok_or_else(|| DiscError::Format { offset: 0, msg: format!("unknown tensor `{name}`") })?;
            let dst = ps.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(DiscError::Format {
                    offset: 0,
                    msg: format!("`{name}` has shape {:?}, model expects {:?}", t.shape(), dst.shape()),
                });
            }
            *dst = t.clone();
        }
        Ok(())
    }
}

enum Payload<'a> {
    Text(&'a str),
    Matrix(&'a Tensor),
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut sections: Vec<(&str, Payload)> = vec![("kind", Payload::Text(&ck.kind)), ("config", Payload::Text(&ck.config))];
    sections.extend(ck.params.iter().map(|(n, t)| (n.as_str(), Payload::Matrix(t))));

    let header_len: usize = 16 + sections.iter().map(|(n, _)| 4 + n.len() + 12 + 16).sum::<usize>();
    let mut table = Vec::with_capacity(header_len);
    let mut blob = Vec::new();
    table.extend_from_slice(&WEIGHT_MAGIC);
    table.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    table.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in &sections {
        let offset = header_len + blob.len();
        let (dtype, rows, cols) = match payload {
            Payload::Text(s) => {
                blob.extend_from_slice(s.as_bytes());
                (DTYPE_TEXT, 1, s.len())
            }
            Payload::Matrix(t) => {
                for v in t.data() {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                (DTYPE_F32, t.rows(), t.cols())
            }
        };
        table.extend_from_slice(&(name.len() as u32).to_le_bytes());
        table.extend_from_slice(name.as_bytes());
        table.extend_from_slice(&dtype.to_le_bytes());
        table.extend_from_slice(&(rows as u32).to_le_bytes());
        table.extend_from_slice(&(cols as u32).to_le_bytes());
        table.extend_from_slice(&(offset as u64).to_le_bytes());
        table.extend_from_slice(&((header_len + blob.len() - offset) as u64).to_le_bytes());
    }
    debug_assert_eq!(table.len(), header_len);
    table.extend_from_slice(&blob);
    table
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rd = Reader::new(bytes);
    rd.magic()?;
    let at = rd.pos;
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DiscError::Format { offset: at, msg: format!("expected version {CHECKPOINT_VERSION}, found {version}") });
    }
    let n = rd.u32("section count")? as usize;
    let mut kind = None;
    let mut config = None;
    let mut params = Vec::new();
    for _ in 0..n {
        let entry_at = rd.pos;
        let len = rd.u32("section name length")? as usize;
        let name = std::str::from_utf8(rd.take(len, "section name")?)
            .map_err(|_| DiscError::Format { offset: entry_at, msg: "section name is not utf-8".into() })?
            .to_string();
        let dtype = rd.u32("dtype")?;
        let rows = rd.u32("rows")? as usize;
        let cols = rd.u32("cols")? as usize;
        let offset = rd.u64("offset")? as usize;
        let nbytes = rd.u64("length")? as usize;
        let end = offset.checked_add(nbytes).filter(|&e| e <= bytes.len()).ok_or_else(|| DiscError::Format {
            offset: entry_at,
            msg: format!("section `{name}` extends past end of file"),
        })?;
        let data = &bytes[offset..end];
        match dtype {
            DTYPE_TEXT => {
                let s = std::str::from_utf8(data)
                    .map_err(|_| DiscError::Format { offset, msg: format!("section `{name}` is not utf-8") })?
                    .to_string();
                match name.as_str() {
                    "kind" => kind = Some(s),
                    "config" => config = Some(s),
                    _ => return Err(DiscError::Format { offset: entry_at, msg: format!("unexpected text section `{name}`") }),
                }
            }
            DTYPE_F32 => {
                if nbytes != 4 * rows * cols {
                    return Err(DiscError::Format {
                        offset: entry_at,
                        msg: format!("section `{name}` holds {nbytes} bytes for shape ({rows}, {cols})"),
                    });
                }
                let vals = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
                params.push((name, Tensor::from_vec(rows, cols, vals)?));
            }
            other => return Err(DiscError::Format { offset: entry_at, msg: format!("unknown dtype {other}") }),
        }
    }
    let missing = |what: &str| DiscError::Format { offset: 0, msg: format!("missing `{what}` section") };
    Ok(Checkpoint { kind: kind.ok_or_else(|| missing("kind"))?, config: config.ok_or_else(|| missing("config"))?, params })
}

pub fn save(path: &std::path::Path, ck: &Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, write_checkpoint(ck))?)
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes)
}
