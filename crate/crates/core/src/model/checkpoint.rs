//! Versioned binary checkpoints: model config, vocabulary, expert registry,
//! and every parameter tensor. The decoder is defensive end to end; loading
//! untrusted bytes returns errors, never panics, and rejects any shape that
//! does not match the reconstructed model.

use super::{ModelConfig, ModelError, MoeDecoderModel};
use crate::audio::{EventKind, EventLabel};
use std::collections::BTreeSet;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SEDC";
const VERSION: u32 = 1;

// Hard caps so a malicious header cannot force absurd allocations.
const MAX_DIM: usize = 2048;
const MAX_BLOCKS: usize = 16;
const MAX_FFN: usize = 8192;
const MAX_VOCAB: u32 = 4096;
const MAX_EXPERT_ROWS: u32 = 16384;
const MAX_PARAMS: u32 = 65536;
const MAX_NAME: u16 = 256;
const MAX_TENSOR_SIDE: u32 = 1 << 20;
const MAX_TENSOR_ELEMS: u64 = 1 << 24;
// Joint cap over the whole model. The per-dimension caps above are each
// plausible alone, but their product can describe a multi-gigabyte model
// from a sixty-byte header, and every parameter carries a gradient tensor
// of the same size, so real memory is twice the element count.
const MAX_MODEL_ELEMS: u64 = 1 << 24;

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or_else(|| err("length overflow"))?;
        if end > self.bytes.len() {
            return Err(err(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn checkpoint_to_bytes(model: &MoeDecoderModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    let c = model.config();
    for dim in [
        c.d,
        c.heads,
        c.bottleneck,
        c.encoder_blocks,
        c.decoder_blocks,
        c.ffn_hidden,
        c.feat_bins,
    ] {
        push_u32(&mut out, dim as u32);
    }
    out.extend_from_slice(&c.init_seed.to_le_bytes());

    let entries = model.vocab().entries();
    push_u32(&mut out, entries.len() as u32);
    for (kind, class) in entries {
        out.push(match kind {
            EventKind::Semantic => 0,
            EventKind::Acoustic => 1,
        });
        push_u32(&mut out, *class);
    }

    let registry = model.expert_registry();
    push_u32(&mut out, registry.len() as u32);
    for (block, owner, frozen) in registry {
        push_u32(&mut out, block as u32);
        out.extend_from_slice(&(owner as u64).to_le_bytes());
        out.push(u8::from(frozen));
    }

    let params = model.params();
    push_u32(&mut out, params.len() as u32);
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        push_u32(&mut out, p.value.rows() as u32);
        push_u32(&mut out, p.value.cols() as u32);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MoeDecoderModel, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let bottleneck = r.u32()? as usize;
    let encoder_blocks = r.u32()? as usize;
    let decoder_blocks = r.u32()? as usize;
    let ffn_hidden = r.u32()? as usize;
    let feat_bins = r.u32()? as usize;
    let init_seed = r.u64()?;
    if d > MAX_DIM
        || feat_bins > MAX_DIM
        || encoder_blocks > MAX_BLOCKS
        || decoder_blocks > MAX_BLOCKS
        || ffn_hidden > MAX_FFN
    {
        return Err(err("config dimensions out of bounds"));
    }
    let d64 = d as u64;
    let blocks = (encoder_blocks + decoder_blocks) as u64;
    let base_elems =
        blocks * (8 * d64 * d64 + 2 * d64 * ffn_hidden as u64) + 3 * d64 * u64::from(MAX_VOCAB);
    if base_elems > MAX_MODEL_ELEMS {
        return Err(err("config describes too large a model"));
    }
    let cfg = ModelConfig {
        d,
        heads,
        bottleneck,
        encoder_blocks,
        decoder_blocks,
        ffn_hidden,
        feat_bins,
        init_seed,
    };
    let mut model = MoeDecoderModel::new(cfg)?;

    let n_vocab = r.u32()?;
    if n_vocab > MAX_VOCAB {
        return Err(err("vocabulary too large"));
    }
    for _ in 0..n_vocab {
        let kind = match r.u8()? {
            0 => EventKind::Semantic,
            1 => EventKind::Acoustic,
            other => return Err(err(format!("bad event kind byte {other}"))),
        };
        let class = r.u32()?;
        if model.ensure_label_tokens(&[EventLabel::new(kind, class, 0)]) == 0 {
            return Err(err(format!("duplicate vocab entry {kind:?}/{class}")));
        }
    }

    let n_experts = r.u32()?;
    if n_experts > MAX_EXPERT_ROWS {
        return Err(err("expert registry too large"));
    }
    let mut per_block: Vec<Vec<(usize, bool)>> = vec![Vec::new(); decoder_blocks];
    for _ in 0..n_experts {
        let block = r.u32()? as usize;
        let owner = r.u64()?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(err(format!("bad frozen byte {other}"))),
        };
        if block >= decoder_blocks {
            return Err(err(format!("expert block {block} out of range")));
        }
        if owner > u32::MAX as u64 {
            return Err(err("owner task out of range"));
        }
        per_block[block].push((owner as usize, frozen));
    }
    for (b, rows) in per_block.iter().enumerate() {
        if rows != &per_block[0] {
            return Err(err(format!("block {b} expert registry differs from block 0")));
        }
    }
    // Same joint-cap concern as the config: the registry entries are cheap
    // to parse but each row allocates an adapter pair in every block.
    let expert_elems =
        per_block[0].len() as u64 * decoder_blocks as u64 * 2 * d64 * bottleneck as u64;
    if expert_elems > MAX_MODEL_ELEMS {
        return Err(err("expert registry describes too many parameters"));
    }
    for &(owner, _) in &per_block[0] {
        model.add_expert(owner)?;
    }
    for block in &mut model.dec_blocks {
        for (e, &(_, frozen)) in block.experts.iter_mut().zip(&per_block[0]) {
            e.w_down.frozen = frozen;
            e.w_up.frozen = frozen;
        }
    }

    let n_params = r.u32()?;
    if n_params > MAX_PARAMS {
        return Err(err("parameter list too large"));
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for _ in 0..n_params {
        let name_len = r.u16()?;
        if name_len > MAX_NAME {
            return Err(err("parameter name too long"));
        }
        let name = std::str::from_utf8(r.take(name_len as usize)?)
            .map_err(|_| err("parameter name not utf8"))?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        if rows > MAX_TENSOR_SIDE || cols > MAX_TENSOR_SIDE {
            return Err(err(format!("{name}: tensor side out of bounds")));
        }
        let elems = u64::from(rows) * u64::from(cols);
        if elems > MAX_TENSOR_ELEMS {
            return Err(err(format!("{name}: tensor too large")));
        }
        let byte_len = (elems as usize)
            .checked_mul(8)
            .ok_or_else(|| err("tensor byte length overflow"))?;
        if byte_len > r.remaining() {
            return Err(err(format!("{name}: truncated tensor data")));
        }
        let raw = r.take(byte_len)?;
        let mut data = Vec::with_capacity(elems as usize);
        for chunk in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(err(format!("{name}: non-finite value")));
            }
            data.push(v);
        }
        let param = model
            .param_mut(&name)
            .ok_or_else(|| err(format!("unknown parameter {name}")))?;
        if param.value.shape() != (rows as usize, cols as usize) {
            return Err(err(format!(
                "{name}: shape {:?} does not match model {:?}",
                (rows, cols),
                param.value.shape()
            )));
        }
        let tensor = crate::tensor::Tensor::new(rows as usize, cols as usize, data)
            .map_err(|e| err(format!("{name}: {e}")))?;
        param.value = tensor;
        if !seen.insert(name.clone()) {
            return Err(err(format!("duplicate parameter {name}")));
        }
    }
    let expected: BTreeSet<String> = model.params().iter().map(|p| p.name.clone()).collect();
    if seen != expected {
        let missing: Vec<&String> = expected.difference(&seen).collect();
        return Err(err(format!("missing parameters: {missing:?}")));
    }
    if r.remaining() != 0 {
        return Err(err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &MoeDecoderModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MoeDecoderModel, ModelError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::features::featurize;
    use crate::audio::synth_clip;
    use crate::model::{ModelConfig, BOS_TOKEN};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn trained_ish_model() -> MoeDecoderModel {
        let mut m = MoeDecoderModel::new(ModelConfig::tiny(4)).unwrap();
        let labels: Vec<EventLabel> = (0..3)
            .map(|c| EventLabel::new(EventKind::Semantic, c, 0))
            .chain((0..2).map(|c| EventLabel::new(EventKind::Acoustic, c, 1)))
            .collect();
        m.ensure_label_tokens(&labels);
        m.add_expert(0).unwrap();
        m.add_expert(1).unwrap();
        // Scribble on the trainable parameters so the dump is non-trivial.
        let mut rng = Rng::seed_from(99);
        for p in m.trainable_params_mut() {
            let (r, c) = p.value.shape();
            p.value = crate::tensor::Tensor::random_uniform(r, c, 0.3, &mut rng);
        }
        m
    }

    #[test]
    fn roundtrip_is_byte_identical_and_forward_equal() {
        let m = trained_ish_model();
        let bytes = checkpoint_to_bytes(&m);
        let loaded = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_to_bytes(&loaded), bytes);
        assert_eq!(loaded.expert_registry(), m.expert_registry());
        assert_eq!(loaded.vocab().entries(), m.vocab().entries());

        let clip = synth_clip(Some(1), None, 0.7, 5).unwrap();
        let feats = featurize(&clip).unwrap();
        let (a, _) = m.forward(&m.encode(&feats).unwrap(), &[BOS_TOKEN, 2]).unwrap();
        let (b, _) = loaded.forward(&loaded.encode(&feats).unwrap(), &[BOS_TOKEN, 2]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = trained_ish_model();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_to_bytes(&loaded), checkpoint_to_bytes(&m));
    }

    #[test]
    fn every_truncation_errors_without_panicking() {
        let bytes = checkpoint_to_bytes(&trained_ish_model());
        // Stride keeps the test fast; always include the last few cuts.
        let mut cuts: Vec<usize> = (0..bytes.len()).step_by(97).collect();
        cuts.extend(bytes.len().saturating_sub(9)..bytes.len());
        for cut in cuts {
            assert!(checkpoint_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = checkpoint_to_bytes(&trained_ish_model());
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
        let mut bytes = checkpoint_to_bytes(&trained_ish_model());
        bytes[4] = 9;
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bytes = checkpoint_to_bytes(&trained_ish_model());
        // Locate the first parameter record by its name and corrupt its row
        // count; the loader must refuse the mismatched tensor.
        let needle = b"enc.in_proj.w";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("first parameter present");
        let rows_at = at + needle.len();
        let mut bad = bytes.clone();
        let rows = u32::from_le_bytes(bad[rows_at..rows_at + 4].try_into().unwrap());
        bad[rows_at..rows_at + 4].copy_from_slice(&(rows + 1).to_le_bytes());
        let e = checkpoint_from_bytes(&bad).unwrap_err();
        let msg = e.to_string();
        assert!(
            msg.contains("shape") || msg.contains("truncated") || msg.contains("too large"),
            "unexpected error: {msg}"
        );
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = checkpoint_to_bytes(&trained_ish_model());
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        assert!(checkpoint_from_bytes(&bytes).unwrap_err().to_string().contains("trailing"));
    }

    // MAGIC + version + the seven config dims + init seed, nothing after.
    fn header(dims: [u32; 7], seed: u64) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.extend_from_slice(&seed.to_le_bytes());
        b
    }

    #[test]
    fn huge_declared_dims_are_rejected_before_allocation() {
        let bytes = header([u32::MAX; 7], 0);
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn jointly_huge_config_is_rejected_before_allocation() {
        // Every dimension is inside its own cap, but together they describe
        // a multi-gigabyte model. The loader must refuse before building it.
        let bytes = header([2048, 8, 16, 16, 16, 8192, 64], 1);
        let msg = checkpoint_from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("too large a model"), "unexpected error: {msg}");
    }

    #[test]
    fn expert_registry_flood_is_rejected_before_allocation() {
        let mut bytes = header([64, 4, 63, 1, 1, 1, 64], 1);
        bytes.extend_from_slice(&0u32.to_le_bytes()); // empty vocab
        let n = 4096u32;
        bytes.extend_from_slice(&n.to_le_bytes());
        for i in 0..n {
            bytes.extend_from_slice(&0u32.to_le_bytes());
            bytes.extend_from_slice(&u64::from(i).to_le_bytes());
            bytes.push(0);
        }
        let msg = checkpoint_from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("too many parameters"), "unexpected error: {msg}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_bytes_never_panic(data in proptest::collection::vec(any::<u8>(), 0..2048)) {
            let _ = checkpoint_from_bytes(&data);
        }

        #[test]
        fn mutated_checkpoints_never_panic(flips in proptest::collection::vec((any::<u16>(), any::<u8>()), 1..8)) {
            let mut bytes = checkpoint_to_bytes(&trained_ish_model());
            for (pos, val) in flips {
                let i = pos as usize % bytes.len();
                bytes[i] = val;
            }
            let _ = checkpoint_from_bytes(&bytes);
        }
    }
}
