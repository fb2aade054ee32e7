//! Persistence: checkpoints, trace files, config documents, and images.
//!
//! Binary containers share one discipline: a 4-byte magic, a little-endian
//! u32 version, a length-prefixed UTF-8 config/meta block, a payload, and
//! a trailing CRC-32 (IEEE) of every preceding byte. Loads verify the CRC
//! before parsing, refuse unknown versions explicitly, and surface shape
//! mismatches against the embedded config as their own error.
//!
//! Checkpoint layout (`FORA`, version 1): after the config block, one
//! record per tensor in canonical order — name length (u32), name bytes,
//! ndim (u32), dims (u32 each), then the f32 payload little-endian.
//! Trace files (`FTRC`, version 1) carry a meta block and the feature
//! vectors in (step, layer, sublayer, branch) order with sublayer attn
//! before mlp and branch cond before uncond.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{Branch, CachePoint, CachePolicy, CountingMode, Sublayer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::tensor::Tensor;
use crate::trace::{FeatureTrace, TapMode};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FORA";
pub const TRACE_MAGIC: [u8; 4] = *b"FTRC";
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// CRC-32 (IEEE 802.3 polynomial, reflected). Matches the ubiquitous zlib
// crc32; pinned by the "123456789" -> 0xCBF43926 check value in tests.
// ---------------------------------------------------------------------------

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc32_table();

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---------------------------------------------------------------------------
// Little-endian read/write helpers over a byte cursor.
// ---------------------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(vs.len() * 4);
    for &v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Strip and verify the trailing CRC, returning the covered bytes.
fn verify_crc<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 12 {
        return Err(Error::Corrupt(format!(
            "{what} too short ({} bytes)",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "{what} CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    Ok(body)
}

fn check_magic(reader: &mut Reader<'_>, magic: &[u8; 4], what: &str) -> Result<()> {
    let found = reader.take(4)?;
    if found != magic {
        return Err(Error::Corrupt(format!(
            "{what} has wrong magic {found:?} (expected {magic:?})"
        )));
    }
    Ok(())
}

fn check_version(reader: &mut Reader<'_>) -> Result<()> {
    let found = reader.u32()?;
    if found != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    model: ModelConfig,
}

/// Canonical text form of a model config (the block embedded in
/// checkpoints). Parse/serialize is a fixed point.
pub fn model_config_to_text(config: &ModelConfig) -> String {
    toml::to_string(&ModelDoc {
        model: config.clone(),
    })
    .expect("model config serializes")
}

pub fn model_config_from_text(text: &str) -> Result<ModelConfig> {
    let doc: ModelDoc =
        toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
    doc.model.validate()?;
    Ok(doc.model)
}

/// Serialize weights to checkpoint bytes (deterministic for given inputs).
pub fn checkpoint_to_bytes(config: &ModelConfig, weights: &ModelWeights) -> Vec<u8> {
    let config_text = model_config_to_text(config);
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, config_text.len() as u32);
    out.extend_from_slice(config_text.as_bytes());
    for (name, tensor) in weights.tensors() {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, tensor.shape().len() as u32);
        for &d in tensor.shape() {
            push_u32(&mut out, d as u32);
        }
        push_f32s(&mut out, tensor.data());
    }
    let crc = crc32(&out);
    push_u32(&mut out, crc);
    out
}

pub fn save_checkpoint(config: &ModelConfig, weights: &ModelWeights, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(config, weights))?;
    Ok(())
}

/// Parse checkpoint bytes: CRC first, then structure, then shape checks
/// against the embedded config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let body = verify_crc(bytes, "checkpoint")?;
    let mut r = Reader::new(body);
    check_magic(&mut r, &CHECKPOINT_MAGIC, "checkpoint")?;
    check_version(&mut r)?;
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::Corrupt(format!("config block is not UTF-8: {e}")))?;
    let config = model_config_from_text(config_text)?;

    let mut tensors = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Corrupt(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Corrupt(format!(
                "tensor {name} has implausible ndim {ndim}"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = r.f32s(count)?;
        tensors.push((
            name.clone(),
            Tensor::new(shape, data)
                .map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?,
        ));
    }
    let weights = ModelWeights::from_tensors(&config, tensors)?;
    Ok((config, weights))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Trace files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceMeta {
    steps: usize,
    depth: usize,
    mode: TapMode,
    feature_len: usize,
    policy: String,
    cache_point: CachePoint,
}

pub fn trace_to_bytes(trace: &FeatureTrace) -> Result<Vec<u8>> {
    trace.check_complete()?;
    let meta = toml::to_string(&TraceMeta {
        steps: trace.steps(),
        depth: trace.depth(),
        mode: trace.mode(),
        feature_len: trace.feature_len(),
        policy: trace.policy().to_string(),
        cache_point: trace.cache_point(),
    })
    .expect("trace meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&TRACE_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(meta.as_bytes());
    for step in 0..trace.steps() {
        for layer in 0..trace.depth() {
            for sublayer in Sublayer::ALL {
                for branch in Branch::ALL {
                    push_f32s(&mut out, trace.get(step, layer, sublayer, branch)?);
                }
            }
        }
    }
    let crc = crc32(&out);
    push_u32(&mut out, crc);
    Ok(out)
}

pub fn save_trace(trace: &FeatureTrace, path: &Path) -> Result<()> {
    fs::write(path, trace_to_bytes(trace)?)?;
    Ok(())
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<FeatureTrace> {
    let body = verify_crc(bytes, "trace")?;
    let mut r = Reader::new(body);
    check_magic(&mut r, &TRACE_MAGIC, "trace")?;
    check_version(&mut r)?;
    let meta_len = r.u32()? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|e| Error::Corrupt(format!("trace meta is not UTF-8: {e}")))?;
    let meta: TraceMeta =
        toml::from_str(meta_text).map_err(|e| Error::Corrupt(format!("trace meta: {e}")))?;
    let mut trace = FeatureTrace::new(
        meta.steps,
        meta.depth,
        meta.mode,
        meta.feature_len,
        meta.policy,
        meta.cache_point,
    )?;
    for step in 0..meta.steps {
        for layer in 0..meta.depth {
            for sublayer in Sublayer::ALL {
                for branch in Branch::ALL {
                    let data = r.f32s(meta.feature_len)?;
                    trace.insert_raw(step, layer, sublayer, branch, data);
                }
            }
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!(
            "trace has {} trailing bytes",
            r.remaining()
        )));
    }
    Ok(trace)
}

pub fn load_trace(path: &Path) -> Result<FeatureTrace> {
    let bytes = fs::read(path)?;
    trace_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Run config documents
// ---------------------------------------------------------------------------

/// Human-editable run configuration. Unknown keys are rejected on parse
/// and every default is materialized on save.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigDoc {
    pub model: ModelConfig,
    pub sampler: SamplerDoc,
    pub cache: CacheDoc,
    pub trace: TraceDoc,
    pub output: OutputDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerDoc {
    pub steps: usize,
    pub kind: SamplerKind,
    pub cfg_scale: f32,
    pub seed: u64,
    pub label: u32,
}

impl Default for SamplerDoc {
    fn default() -> Self {
        Self {
            steps: 250,
            kind: SamplerKind::Ddim,
            cfg_scale: 1.5,
            seed: 0,
            label: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheDoc {
    /// 0 disables caching; N >= 1 selects the static policy.
    pub interval: usize,
    pub cache_point: CachePoint,
    pub counting: CountingMode,
}

impl Default for CacheDoc {
    fn default() -> Self {
        Self {
            interval: 0,
            cache_point: CachePoint::PostGate,
            counting: CountingMode::Batched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceDoc {
    /// "off", "full", or "pooled".
    pub tap: String,
}

impl Default for TraceDoc {
    fn default() -> Self {
        Self { tap: "off".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputDoc {
    /// Default image path for sampling; empty means unset.
    pub image: String,
    /// Default report path; empty means derive from the image path.
    pub report: String,
}

impl RunConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: RunConfigDoc =
            toml::from_str(text).map_err(|e| Error::Config(format!("config document: {e}")))?;
        doc.model.validate()?;
        doc.tap_mode()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Canonical serialization; parsing it back yields an equal document.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config document serializes")
    }

    pub fn cache_policy(&self) -> CachePolicy {
        if self.cache.interval == 0 {
            CachePolicy::Off
        } else {
            CachePolicy::Static {
                interval: self.cache.interval,
            }
        }
    }

    pub fn tap_mode(&self) -> Result<Option<TapMode>> {
        match self.trace.tap.as_str() {
            "off" => Ok(None),
            "full" => Ok(Some(TapMode::Full)),
            "pooled" => Ok(Some(TapMode::Pooled)),
            other => Err(Error::Config(format!(
                "trace.tap must be off|full|pooled, got {other:?}"
            ))),
        }
    }

    /// Sampler configuration implied by this document.
    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            steps: self.sampler.steps,
            kind: self.sampler.kind,
            cfg_scale: self.sampler.cfg_scale,
            seed: self.sampler.seed,
            label: self.sampler.label,
            policy: self.cache_policy(),
            cache_point: self.cache.cache_point,
            counting: self.cache.counting,
            tap: self.tap_mode()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Image output
// ---------------------------------------------------------------------------

/// Render a `[seq_len x out_channels]` latent as a binary portable pixmap.
///
/// Tokens are laid out row-major on a square grid (seq_len must be a
/// perfect square). Each channel is min-max normalized to 0..=255 with
/// rounding to nearest; a constant channel maps to mid-gray 128. One
/// channel yields P5 grayscale; otherwise the first three channels (padded
/// with zeros if only two exist) form a P6 color pixmap. `upsample` scales
/// the grid by nearest-neighbor replication.
pub fn latent_to_image(latent: &Tensor, upsample: usize) -> Result<Vec<u8>> {
    if latent.shape().len() != 2 {
        return Err(Error::Layout(format!(
            "latent must be 2-D, got shape {:?}",
            latent.shape()
        )));
    }
    let (seq_len, channels) = (latent.shape()[0], latent.shape()[1]);
    let grid = (seq_len as f64).sqrt().round() as usize;
    if grid * grid != seq_len {
        return Err(Error::Layout(format!(
            "seq_len {seq_len} does not form a square token grid"
        )));
    }
    let upsample = upsample.max(1);

    let norm_channel = |c: usize| -> Vec<u8> {
        let vals: Vec<f32> = (0..seq_len).map(|i| latent.row(i)[c]).collect();
        let min = vals.iter().fold(f32::INFINITY, |m, &v| m.min(v));
        let max = vals.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        if min == max {
            return vec![128; seq_len];
        }
        vals.iter()
            .map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8)
            .collect()
    };

    let side = grid * upsample;
    let mut out = Vec::new();
    if channels == 1 {
        out.extend_from_slice(format!("P5\n{side} {side}\n255\n").as_bytes());
        let gray = norm_channel(0);
        for y in 0..side {
            for x in 0..side {
                out.push(gray[(y / upsample) * grid + x / upsample]);
            }
        }
    } else {
        out.extend_from_slice(format!("P6\n{side} {side}\n255\n").as_bytes());
        let planes: Vec<Vec<u8>> = (0..3)
            .map(|c| {
                if c < channels {
                    norm_channel(c)
                } else {
                    vec![0; seq_len]
                }
            })
            .collect();
        for y in 0..side {
            for x in 0..side {
                let tok = (y / upsample) * grid + x / upsample;
                out.push(planes[0][tok]);
                out.push(planes[1][tok]);
                out.push(planes[2][tok]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CachePoint;
    use crate::trace::TapMode;

    fn small_config() -> ModelConfig {
        ModelConfig {
            seq_len: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            out_channels: 2,
        }
    }

    #[test]
    fn crc32_known_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let cfg = small_config();
        let weights = ModelWeights::init(&cfg, 7, false).unwrap();
        let bytes1 = checkpoint_to_bytes(&cfg, &weights);
        let (cfg2, weights2) = checkpoint_from_bytes(&bytes1).unwrap();
        assert_eq!(cfg, cfg2);
        let bytes2 = checkpoint_to_bytes(&cfg2, &weights2);
        assert_eq!(bytes1, bytes2);
        for ((_, a), (_, b)) in weights.tensors().iter().zip(weights2.tensors()) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let cfg = small_config();
        let weights = ModelWeights::init(&cfg, 7, false).unwrap();
        let mut bytes = checkpoint_to_bytes(&cfg, &weights);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            checkpoint_from_bytes(&bytes).unwrap_err(),
            Error::Corrupt(_)
        ));
    }

    #[test]
    fn truncated_checkpoint_is_corruption() {
        let cfg = small_config();
        let weights = ModelWeights::init(&cfg, 7, false).unwrap();
        let bytes = checkpoint_to_bytes(&cfg, &weights);
        let truncated = &bytes[..bytes.len() - 100];
        assert!(matches!(
            checkpoint_from_bytes(truncated).unwrap_err(),
            Error::Corrupt(_)
        ));
    }

    #[test]
    fn future_version_is_explicit_error() {
        let cfg = small_config();
        let weights = ModelWeights::init(&cfg, 7, false).unwrap();
        let mut bytes = checkpoint_to_bytes(&cfg, &weights);
        // Patch the version field and rewrite the CRC so only the version
        // differs from a well-formed file.
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bytes).unwrap_err(),
            Error::UnsupportedVersion { found, .. } if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn mismatched_tensor_shape_is_distinct_error() {
        let cfg = small_config();
        let weights = ModelWeights::init(&cfg, 7, false).unwrap();
        let mut other = cfg.clone();
        other.depth = 3;
        let bytes = checkpoint_to_bytes(&other, &weights);
        // CRC is fine; the embedded config disagrees with the records.
        match checkpoint_from_bytes(&bytes).unwrap_err() {
            Error::InvalidShape(_) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn trace_roundtrip_and_truncation() {
        let mut trace = FeatureTrace::new(
            2,
            2,
            TapMode::Pooled,
            3,
            "static:2".into(),
            CachePoint::PostGate,
        )
        .unwrap();
        let mut rng = crate::tensor::RandomSource::new(3);
        for s in 0..2 {
            for k in 0..2 {
                for sub in Sublayer::ALL {
                    for br in Branch::ALL {
                        let f = rng.randn(&[2, 3]).unwrap();
                        trace.record(s, k, sub, br, &f);
                    }
                }
            }
        }
        let bytes = trace_to_bytes(&trace).unwrap();
        let loaded = trace_from_bytes(&bytes).unwrap();
        assert!(trace.bitwise_eq(&loaded));
        assert_eq!(loaded.policy(), "static:2");
        let bytes2 = trace_to_bytes(&loaded).unwrap();
        assert_eq!(bytes, bytes2);
        assert!(matches!(
            trace_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err(),
            Error::Corrupt(_)
        ));
    }

    #[test]
    fn config_doc_rejects_unknown_keys() {
        let text = "[model]\nseq_len = 4\n\n[sampler]\nbogus_key = 1\n";
        let err = RunConfigDoc::parse(text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn config_doc_canonical_is_fixed_point() {
        let doc = RunConfigDoc::default();
        let text = doc.canonical();
        let reparsed = RunConfigDoc::parse(&text).unwrap();
        assert_eq!(doc, reparsed);
        assert_eq!(text, reparsed.canonical());
        // Defaults are materialized: every section header appears.
        for section in ["[model]", "[sampler]", "[cache]", "[trace]", "[output]"] {
            assert!(text.contains(section), "missing {section} in {text}");
        }
    }

    #[test]
    fn config_doc_parse_error_reports_position() {
        let err = RunConfigDoc::parse("[model\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn image_constant_latent_is_mid_gray() {
        let latent = Tensor::new(vec![4, 1], vec![3.0; 4]).unwrap();
        let img = latent_to_image(&latent, 1).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn image_range_endpoints() {
        let latent = Tensor::new(vec![4, 1], vec![-1.0, 0.0, 0.5, 3.0]).unwrap();
        let img = latent_to_image(&latent, 1).unwrap();
        let px = &img[img.len() - 4..];
        assert_eq!(px[0], 0);
        assert_eq!(px[3], 255);
    }

    #[test]
    fn image_hand_computed_2x2() {
        // Channels: c0 = [0, 1, 2, 4] -> [0, 64, 128, 255] after round;
        // c1 constant -> 128; c2 missing -> 0.
        let latent = Tensor::new(
            vec![4, 2],
            vec![0.0, 7.0, 1.0, 7.0, 2.0, 7.0, 4.0, 7.0],
        )
        .unwrap();
        let img = latent_to_image(&latent, 1).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px, &[0, 128, 0, 64, 128, 0, 128, 128, 0, 255, 128, 0]);
    }

    #[test]
    fn image_rejects_non_square_grid() {
        let latent = Tensor::new(vec![6, 1], vec![0.0; 6]).unwrap();
        assert!(matches!(
            latent_to_image(&latent, 1).unwrap_err(),
            Error::Layout(_)
        ));
    }

    #[test]
    fn image_upsampling_replicates_pixels() {
        let latent = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let img = latent_to_image(&latent, 2).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        // Top-left 2x2 block replicates token 0.
        assert_eq!(px[0], px[1]);
        assert_eq!(px[0], px[4]);
        assert_eq!(px[0], px[5]);
    }
}
