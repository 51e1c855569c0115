//! Checkpoints: resolved config, vocabulary, and every named tensor at full precision.
//!
//! Layout (little-endian): magic `SCNC`, u32 version, u32 config length + UTF-8 config
//! text, u32 token count + (u16 length, bytes) per token, u32 tensor count + per tensor
//! (u16 name length, name, u32 rows, u32 cols, rows*cols f64).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::Mat;
use crate::backbone::Model;
use crate::binio::{read_f64s, read_u16, read_u32, write_f64s};
use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| std::io::Error::other("string longer than 65535 bytes"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = read_u16(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, vocab: &Vocabulary, model: &Model) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let text = config.to_text();
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(text.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(text.as_bytes()).map_err(io)?;
    w.write_all(&(vocab.len() as u32).to_le_bytes()).map_err(io)?;
    for t in vocab.tokens() {
        write_str(&mut w, t).map_err(io)?;
    }
    w.write_all(&(model.params().len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in model.params().iter() {
        write_str(&mut w, name).map_err(io)?;
        w.write_all(&(t.nrows() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(t.ncols() as u32).to_le_bytes()).map_err(io)?;
        write_f64s(&mut w, t.iter().copied()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Parse {
        path: path.into(),
        record: 0,
        reason,
    };
    let trunc = |e: std::io::Error| bad(format!("truncated or unreadable checkpoint: {e}"));
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r).map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r).map_err(trunc)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(trunc)?;
    let text = String::from_utf8(text).map_err(|e| bad(e.to_string()))?;
    let config = RunConfig::from_text(&text)?;
    let n_tokens = read_u32(&mut r).map_err(trunc)? as usize;
    let tokens = (0..n_tokens).map(|_| read_str(&mut r)).collect::<std::io::Result<Vec<_>>>().map_err(trunc)?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let n_tensors = read_u32(&mut r).map_err(trunc)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = read_str(&mut r).map_err(trunc)?;
        let rows = read_u32(&mut r).map_err(trunc)? as usize;
        let cols = read_u32(&mut r).map_err(trunc)? as usize;
        let values = read_f64s(&mut r, rows * cols).map_err(trunc)?;
        tensors.push((name, Mat::from_shape_vec((rows, cols), values).expect("rows x cols values")));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(trunc)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    let mut model = Model::init(config.model_dims(vocab.len()), config.seed)?;
    model.load_tensors(tensors)?;
    Ok(Checkpoint { config, vocab, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;

    #[test]
    fn round_trip_is_exact() {
        let cfg = RunConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_layers: 1,
            share_encoder_decoder: false,
            ..RunConfig::default()
        };
        let words = vec!["a".to_string(), "b".to_string()];
        let vocab = build_vocabulary([words.as_slice()], 10).unwrap();
        let model = Model::init(cfg.model_dims(vocab.len()), 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.scnc");
        save_checkpoint(&p, &cfg, &vocab, &model).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.vocab, vocab);
        for ((n1, t1), (n2, t2)) in model.params().iter().zip(ck.model.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&p).is_err());
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("magic"));
    }
}
