//! Checkpoint directories.
//!
//! A checkpoint holds `config.toml`, `vocab.txt` and `params.bin`. The tensor
//! file is little-endian:
//!
//! ```text
//! magic   8 bytes  "DPXCKPT1"
//! count   u32
//! count times:
//!   name_len u32, name (UTF-8), rows u32, cols u32, rows*cols f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use duplex_autograd::Matrix;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::Vocab;

const MAGIC: &[u8; 8] = b"DPXCKPT1";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PARAMS_FILE: &str = "params.bin";

pub fn encode_tensors(tensors: &BTreeMap<String, Matrix>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated tensor file at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Matrix>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint tensor file".into()));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if out.insert(name.clone(), Matrix::from_vec(rows, cols, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(out)
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, Matrix>> {
    decode_tensors(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save(dir: &Path, model: &Model, vocab: &Vocab, config: &Config) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = config.clone();
    config.model = model.config.clone();
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config.to_text()).map_err(|e| Error::io(&path, e))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, encode_tensors(&model.weights())).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<(Model, Vocab, Config)> {
    let config = Config::load(&dir.join(CONFIG_FILE))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != config.model.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but the config says {}",
            vocab.len(),
            config.model.vocab_size
        )));
    }
    let mut model = Model::new(&config.model, 0)?;
    model.load_weights(&read_tensors(&dir.join(PARAMS_FILE))?, true)?;
    Ok((model, vocab, config))
}
