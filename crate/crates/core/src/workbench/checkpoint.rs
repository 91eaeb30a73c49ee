//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! `magic[8] | version u32 | total_len u64 | kind u8 | vocab header | dims
//! (d, blocks, heads, max_len as u32) | base checksum [32] | n_params u32 |
//! n_params × (name_len u16, name, rank u8, dims u32…, f32 data) | sha256[32]`.
//!
//! The trailer hashes every preceding byte. For a base model the trailer is
//! also the model's identity; sampler checkpoints carry the identity of the
//! base they were trained against in the base-checksum field.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::adjust::AdjustNet;
use crate::error::{Error, Result};
use crate::model::{BlockParams, ModelDims, NeuralDenoiser, Vocab};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"DLMJCKPT";
pub const FORMAT_VERSION: u32 = 1;

const KIND_BASE: u8 = 0;
const KIND_SAMPLER: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

fn encode(
    kind: u8,
    vocab: &Vocab,
    dims: ModelDims,
    base_checksum: [u8; 32],
    params: &[(String, &Tensor)],
) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(&[0u8; 8]); // total length, patched below
    w.u8(kind);
    w.u32(vocab.size() as u32);
    w.u32(vocab.mask_id() as u32);
    match vocab.labels() {
        Some(labels) => {
            w.u32(labels.len() as u32);
            for l in labels {
                w.u16(l.len() as u16);
                w.bytes(l.as_bytes());
            }
        }
        None => w.u32(0),
    }
    for v in [dims.d, dims.blocks, dims.heads, dims.max_len] {
        w.u32(v as u32);
    }
    w.bytes(&base_checksum);
    w.u32(params.len() as u32);
    for (name, t) in params {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u8(t.shape().len() as u8);
        for &s in t.shape() {
            w.u32(s as u32);
        }
        for &v in t.data() {
            w.bytes(&(v as f32).to_le_bytes());
        }
    }
    let total = (w.buf.len() + 32) as u64;
    w.buf[12..20].copy_from_slice(&total.to_le_bytes());
    let digest: [u8; 32] = Sha256::digest(&w.buf).into();
    w.bytes(&digest);
    w.buf
}

fn trailer(bytes: &[u8]) -> [u8; 32] {
    bytes[bytes.len() - 32..].try_into().expect("32-byte trailer")
}

pub fn encode_base(model: &NeuralDenoiser) -> Vec<u8> {
    use crate::model::Denoiser;
    encode(
        KIND_BASE,
        model.vocab(),
        model.dims(),
        [0u8; 32],
        &model.named_params(),
    )
}

/// Identity of a base model: the trailer of its encoding.
pub fn base_checksum(model: &NeuralDenoiser) -> [u8; 32] {
    trailer(&encode_base(model))
}

pub fn encode_sampler(g: &AdjustNet) -> Vec<u8> {
    use crate::model::Denoiser;
    let base = g.base();
    encode(
        KIND_SAMPLER,
        base.vocab(),
        base.dims(),
        g.trained_against(),
        &g.named_params(),
    )
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointFormat(format!(
                "record runs past the end at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Decoded {
    kind: u8,
    vocab: Vocab,
    dims: ModelDims,
    base_checksum: [u8; 32],
    params: Vec<(String, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::CheckpointTruncated(format!("{} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    if bytes.len() < 20 {
        return Err(Error::CheckpointTruncated(format!("{} bytes", bytes.len())));
    }
    let declared = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if (bytes.len() as u64) < declared {
        return Err(Error::CheckpointTruncated(format!(
            "{} of {declared} bytes",
            bytes.len()
        )));
    }
    if bytes.len() as u64 != declared || declared < 52 {
        return Err(Error::CheckpointFormat(format!(
            "file holds {} bytes but header declares {declared}",
            bytes.len()
        )));
    }
    let body = &bytes[..bytes.len() - 32];
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest != trailer(bytes) {
        return Err(Error::CheckpointChecksum);
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    r.u64()?;
    let kind = r.u8()?;
    let size = r.u32()? as usize;
    let mask_id = r.u32()? as usize;
    let n_labels = r.u32()? as usize;
    let mut vocab = Vocab::new(size, mask_id).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    if n_labels > 0 {
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            let n = r.u16()? as usize;
            labels.push(
                String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|_| Error::CheckpointFormat("label is not UTF-8".into()))?,
            );
        }
        if labels.len() != size || labels[mask_id] != "[M]" {
            return Err(Error::CheckpointFormat("label table does not match vocabulary".into()));
        }
        let data: Vec<&str> = labels
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != mask_id)
            .map(|(_, l)| l.as_str())
            .collect();
        vocab = Vocab::from_labels(&data).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        if vocab.mask_id() != mask_id {
            return Err(Error::CheckpointFormat("labelled vocabulary must keep the mask last".into()));
        }
    }
    let dims = ModelDims {
        d: r.u32()? as usize,
        blocks: r.u32()? as usize,
        heads: r.u32()? as usize,
        max_len: r.u32()? as usize,
    };
    let base_checksum: [u8; 32] = r.take(32)?.try_into().unwrap();
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointFormat("parameter name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat("trailing bytes after parameters".into()));
    }
    Ok(Decoded {
        kind,
        vocab,
        dims,
        base_checksum,
        params,
    })
}

pub fn decode_base(bytes: &[u8]) -> Result<NeuralDenoiser> {
    let d = decode(bytes)?;
    if d.kind != KIND_BASE {
        return Err(Error::CheckpointFormat("expected a base-model checkpoint".into()));
    }
    NeuralDenoiser::from_named(d.vocab, d.dims, d.params)
}

/// Decodes a sampler and links it to `base`, refusing a base other than the
/// one it was trained against.
pub fn decode_sampler(bytes: &[u8], base: Arc<NeuralDenoiser>) -> Result<AdjustNet> {
    use crate::model::Denoiser;
    let d = decode(bytes)?;
    if d.kind != KIND_SAMPLER {
        return Err(Error::CheckpointFormat("expected a sampler checkpoint".into()));
    }
    let found = base.checksum().expect("neural models have checksums");
    if found != d.base_checksum {
        return Err(Error::BaseMismatch {
            expected: hex::encode(d.base_checksum),
            found: hex::encode(found),
        });
    }
    if d.dims != base.dims() || &d.vocab != base.vocab() {
        return Err(Error::CheckpointFormat("sampler dimensions differ from base".into()));
    }
    let mut params = d.params.into_iter();
    let (name, down) = params
        .next()
        .ok_or_else(|| Error::CheckpointFormat("sampler has no parameters".into()))?;
    if name != "down_proj" {
        return Err(Error::CheckpointFormat(format!("unexpected first block {name}")));
    }
    let rest: Vec<(String, Tensor)> = params.collect();
    if rest.len() != BlockParams::NAMES.len() {
        return Err(Error::CheckpointFormat("sampler block is incomplete".into()));
    }
    let mut block = BlockParams::init(base.dims().d, 1.0, &mut crate::numerics::RngStream::new(0, 0));
    for ((slot, want), (name, t)) in block.tensors_mut().into_iter().zip(BlockParams::NAMES).zip(rest) {
        if name != format!("block.{want}") || t.shape() != slot.shape() {
            return Err(Error::CheckpointFormat(format!("unexpected sampler block {name}")));
        }
        *slot = t;
    }
    AdjustNet::from_parts(base, down, block)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path, stage: &'static str) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_base(path: &Path, model: &NeuralDenoiser) -> Result<()> {
    write_file(path, &encode_base(model))
}

pub fn read_base(path: &Path) -> Result<NeuralDenoiser> {
    decode_base(&read_file(path, "train-base")?)
}

pub fn write_sampler(path: &Path, g: &AdjustNet) -> Result<()> {
    write_file(path, &encode_sampler(g))
}

pub fn read_sampler(path: &Path, base: Arc<NeuralDenoiser>) -> Result<AdjustNet> {
    decode_sampler(&read_file(path, "train-sampler")?, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Denoiser;
    use crate::numerics::RngStream;

    fn model(seed: u64) -> NeuralDenoiser {
        let v = Vocab::from_labels(&["x", "y", "z"]).unwrap();
        let dims = ModelDims {
            d: 8,
            blocks: 2,
            heads: 2,
            max_len: 5,
        };
        NeuralDenoiser::new(v, dims, &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn base_round_trip_is_bit_exact() {
        let m = model(1);
        let bytes = encode_base(&m);
        let back = decode_base(&bytes).unwrap();
        for ((na, a), (nb, b)) in m.named_params().iter().zip(back.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.vocab(), m.vocab());
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(encode_base(&back), bytes);
    }

    #[test]
    fn corruption_and_truncation_are_distinct_errors() {
        let bytes = encode_base(&model(2));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(decode_base(&flipped), Err(Error::CheckpointChecksum)));
        assert!(matches!(
            decode_base(&bytes[..bytes.len() - 10]),
            Err(Error::CheckpointTruncated(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_base(&magic), Err(Error::CheckpointMagic)));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_base(&model(3));
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len();
        let digest: [u8; 32] = Sha256::digest(&bytes[..n - 32]).into();
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(
            decode_base(&bytes),
            Err(Error::CheckpointVersion { found: 7, .. })
        ));
    }

    #[test]
    fn sampler_refuses_a_different_base() {
        let base = Arc::new(model(4));
        let other = Arc::new(model(5));
        let g = AdjustNet::new(base.clone(), &mut RngStream::new(0, 1)).unwrap();
        let bytes = encode_sampler(&g);
        let back = decode_sampler(&bytes, base).unwrap();
        assert_eq!(encode_sampler(&back), bytes);
        assert!(matches!(
            decode_sampler(&bytes, other),
            Err(Error::BaseMismatch { .. })
        ));
    }
}
