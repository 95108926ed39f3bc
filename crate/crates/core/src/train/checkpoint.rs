//! Binary checkpoint: magic, version, a TOML header with configs and
//! progress, both vocabularies, then named little-endian tensors.
//!
//! ```text
//! b"LEXNMTCK" u32 version
//! u64 len, TOML header
//! u64 len, source vocabulary text
//! u64 len, target vocabulary text
//! u32 count, then per tensor: u32 name len, name, u32 ndim, u64 dims, data
//! b"LEXNMTCK" trailer
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adadelta, Result, TrainConfig, TrainError};
use crate::data::Vocabulary;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"LEXNMTCK";
pub const FORMAT_VERSION: u32 = 1;

const SQ_GRAD: &str = "sq_grad/";
const SQ_UPDATE: &str = "sq_update/";

/// Counters carried across resumes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Exact ChaCha8 position. Integers wider than i64 are kept as strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        self.try_restore().expect("rng state validated on load")
    }

    fn try_restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| TrainError::Corrupt(format!("bad rng {what}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    precision: String,
    model: ModelConfig,
    train: TrainConfig,
    progress: Progress,
    rng: RngState,
}

/// Everything needed to translate with a model or resume training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: TrainConfig,
    pub optimizer: Adadelta<T>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub progress: Progress,
    pub rng: RngState,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            precision: T::NAME.to_string(),
            model: self.model.config.clone(),
            train: self.train.clone(),
            progress: self.progress.clone(),
            rng: self.rng.clone(),
        };
        let header = toml::to_string(&header).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for block in [header, self.src_vocab.to_text(), self.tgt_vocab.to_text()] {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            out.extend_from_slice(block.as_bytes());
        }
        let params = &self.model.params;
        let named = params
            .names
            .iter()
            .cloned()
            .zip(&params.tensors)
            .chain(params.names.iter().map(|n| format!("{SQ_GRAD}{n}")).zip(&self.optimizer.sq_grad))
            .chain(params.names.iter().map(|n| format!("{SQ_UPDATE}{n}")).zip(&self.optimizer.sq_update));
        out.extend_from_slice(&(3 * params.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out.extend_from_slice(MAGIC);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header_text = read_preamble(&mut r)?;
        let header: Header = toml::from_str(&header_text).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        if header.precision != T::NAME {
            return Err(TrainError::Precision {
                found: header.precision,
                expected: T::NAME.to_string(),
            });
        }
        let rng = header.rng.clone();
        rng.try_restore()?;
        let vocab = |r: &mut Reader| -> Result<Vocabulary> {
            Vocabulary::from_text(&r.string_u64()?).map_err(|e| TrainError::Corrupt(e.to_string()))
        };
        let src_vocab = vocab(&mut r)?;
        let tgt_vocab = vocab(&mut r)?;

        let mut params = ModelParams::<T>::zeros(&header.model)?;
        if src_vocab.len() != header.model.src_vocab_size || tgt_vocab.len() != header.model.tgt_vocab_size {
            return Err(TrainError::Corrupt("vocabulary sizes disagree with the model config".into()));
        }
        let mut optimizer = Adadelta::new(&params.tensors, header.train.rho, header.train.eps);
        let count = r.u32()? as usize;
        if count != 3 * params.len() {
            return Err(TrainError::Corrupt(format!(
                "expected {} tensors, found {count}",
                3 * params.len()
            )));
        }
        for k in 0..count {
            let name = r.string_u32()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (slot, base) = (k / params.len(), k % params.len());
            let expected_name = match slot {
                0 => params.names[base].clone(),
                1 => format!("{SQ_GRAD}{}", params.names[base]),
                _ => format!("{SQ_UPDATE}{}", params.names[base]),
            };
            if name != expected_name || shape != params.tensors[base].shape() {
                return Err(TrainError::Corrupt(format!(
                    "tensor {k}: found {name} {shape:?}, expected {expected_name} {:?}",
                    params.tensors[base].shape()
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * T::BYTES)?;
            let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(shape, data)?;
            match slot {
                0 => params.tensors[base] = t,
                1 => optimizer.sq_grad[base] = t,
                _ => optimizer.sq_update[base] = t,
            }
        }
        if r.take(MAGIC.len())? != MAGIC || r.pos != bytes.len() {
            return Err(TrainError::Corrupt("bad trailer".into()));
        }
        Ok(Checkpoint {
            model: Model {
                config: header.model,
                params,
            },
            train: header.train,
            optimizer,
            src_vocab,
            tgt_vocab,
            progress: header.progress,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}

/// Element type stored in a checkpoint file ("f32" or "f64").
pub fn peek_precision(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let text = read_preamble(&mut r)?;
    #[derive(Deserialize)]
    struct Peek {
        precision: String,
    }
    let p: Peek = toml::from_str(&text).map_err(|e| TrainError::Corrupt(e.to_string()))?;
    Ok(p.precision)
}

fn read_preamble(r: &mut Reader) -> Result<String> {
    if r.bytes.len() < MAGIC.len() || &r.bytes[..MAGIC.len()] != MAGIC {
        return Err(TrainError::BadMagic);
    }
    r.pos = MAGIC.len();
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    r.string_u64()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(bytes: &[u8]) -> Result<String> {
        String::from_utf8(bytes.to_vec()).map_err(|_| TrainError::Corrupt("invalid UTF-8".into()))
    }

    fn string_u64(&mut self) -> Result<String> {
        let n = usize::try_from(self.u64()?).map_err(|_| TrainError::Corrupt("length overflow".into()))?;
        Self::utf8(self.take(n)?)
    }

    fn string_u32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        Self::utf8(self.take(n)?)
    }
}
