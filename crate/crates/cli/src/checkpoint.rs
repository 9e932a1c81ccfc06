//! Model checkpoint file: `CGRU` magic, a format version, a JSON
//! metadata blob (model dims plus the vocabulary token list, so a
//! checkpoint is self-contained for captioning), then one record per
//! parameter tensor with raw little-endian f64 data.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use capforge_core::model::{CaptionModel, ModelConfig};
use capforge_core::vocab::Vocabulary;
use capforge_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MAGIC: [u8; 4] = *b"CGRU";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    vocab_tokens: Vec<String>,
}

fn write_all(
    path: &Path,
    meta: &Meta,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &CaptionModel,
    vocab: &Vocabulary,
) -> Result<()> {
    let meta = Meta {
        model: model.config,
        vocab_tokens: vocab.tokens().to_vec(),
    };
    write_all(path, &meta, &model.params_map())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.buf.len()).with_context(|| {
            format!("checkpoint corrupt: implausible {what} length {v}")
        })
    }
}

/// Fails on any structural problem without producing a partial model.
pub fn load_checkpoint(path: &Path) -> Result<(CaptionModel, Vocabulary)> {
    let buf = std::fs::read(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        bail!("{} is not a checkpoint file (bad magic)", path.display());
    }
    let mut vb = [0u8; 4];
    vb.copy_from_slice(cur.take(4)?);
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        bail!("unsupported checkpoint version {version} (expected {VERSION})");
    }
    let meta_len = cur.len("metadata")?;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .context("checkpoint metadata is not valid JSON")?;
    let n_tensors = cur.len("tensor table")?;
    let mut map = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = cur.len("tensor name")?;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .context("tensor name is not UTF-8")?
            .to_string();
        let rank = cur.len("shape")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.len("dimension")?);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            b.copy_from_slice(cur.take(8)?);
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::from_vec(&shape, data)
            .with_context(|| format!("tensor {name}"))?;
        if map.insert(name.clone(), tensor).is_some() {
            bail!("duplicate tensor {name}");
        }
    }
    if cur.pos != buf.len() {
        bail!("checkpoint has {} trailing bytes", buf.len() - cur.pos);
    }
    meta.model.validate().context("checkpoint model config")?;
    let mut model = CaptionModel::init(meta.model, &mut ChaCha8Rng::seed_from_u64(0))
        .context("allocating model from checkpoint config")?;
    model
        .set_from_map(&map)
        .context("checkpoint tensors do not match the stored config")?;
    let vocab = Vocabulary::from_tokens(meta.vocab_tokens)
        .context("checkpoint vocabulary")?;
    if vocab.size() != model.config.vocab {
        bail!(
            "checkpoint vocabulary has {} tokens but the model expects {}",
            vocab.size(),
            model.config.vocab
        );
    }
    Ok((model, vocab))
}
