//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "COLA"            magic
//! u16               format version
//! u8                kind (0 single head, 1 multi head)
//! u8                variant tag (0 none, else coarse class count)
//! u64               seed
//! [u8; 32]          corpus digest
//! u32               input width
//! u32, u32 * n      backbone depth, hidden widths
//! u32               head count, then per head:
//!                     u32 + bytes  name
//!                     u32          class count
//!                     u16 * count  label id of each output
//! f64 * ...         backbone weights (row-major) and biases, then heads
//! f64 * 2d          standardization mean, then std
//! ```

use ndarray::{Array1, Array2};

use super::{Dense, MHModel, Model, ModelError, Network, Result};
use crate::featurize::FeatureStats;
use crate::taxonomy::Variant;

pub const CHECKPOINT_EXTENSION: &str = "colaptk";
const MAGIC: &[u8; 4] = b"COLA";
const VERSION: u16 = 1;
const KIND_SINGLE: u8 = 0;
const KIND_MULTI: u8 = 1;

/// Everything stored next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointStats {
    pub features: FeatureStats,
    /// Coarse variant the head was trained on, `None` for fine labels.
    pub variant: Option<Variant>,
    pub corpus_digest: [u8; 32],
    pub seed: u64,
    /// Label id predicted by each head output, per head in name order.
    pub class_ids: Vec<Vec<u16>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn dense(&mut self, fan_in: usize, fan_out: usize) -> Result<Dense> {
        let weight = Array2::from_shape_vec((fan_in, fan_out), self.f64s(fan_in * fan_out)?)
            .map_err(|e| corrupt(e.to_string()))?;
        let bias = Array1::from(self.f64s(fan_out)?);
        Ok(Dense { weight, bias })
    }
}

struct Decoded {
    kind: u8,
    backbone: Vec<Dense>,
    heads: Vec<(String, Dense)>,
    stats: CheckpointStats,
}

fn encode(kind: u8, backbone: &[Dense], heads: &[(&str, &Dense)], stats: &CheckpointStats) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(kind);
    w.u8(stats.variant.map_or(0, Variant::tag));
    w.u64(stats.seed);
    w.0.extend_from_slice(&stats.corpus_digest);
    w.u32(backbone[0].fan_in());
    w.u32(backbone.len());
    for l in backbone {
        w.u32(l.fan_out());
    }
    w.u32(heads.len());
    for (i, (name, head)) in heads.iter().enumerate() {
        w.u32(name.len());
        w.0.extend_from_slice(name.as_bytes());
        w.u32(head.fan_out());
        let ids = stats.class_ids.get(i);
        for c in 0..head.fan_out() {
            w.u16(ids.and_then(|ids| ids.get(c)).copied().unwrap_or(0));
        }
    }
    for l in backbone.iter().chain(heads.iter().map(|(_, h)| *h)) {
        w.f64s(l.weight.iter());
        w.f64s(l.bias.iter());
    }
    w.f64s(&stats.features.mean);
    w.f64s(&stats.features.std);
    w.0
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| corrupt("bad magic"))? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != KIND_SINGLE && kind != KIND_MULTI {
        return Err(corrupt(format!("unknown kind {kind}")));
    }
    let tag = r.u8()?;
    let variant = match tag {
        0 => None,
        t => Some(Variant::from_tag(t).ok_or_else(|| corrupt(format!("unknown variant tag {t}")))?),
    };
    let seed = r.u64()?;
    let corpus_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let input = r.u32()?;
    let depth = r.u32()?;
    if input == 0 || depth == 0 || depth > 1024 {
        return Err(corrupt("implausible layer header"));
    }
    let widths = (0..depth).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    if widths.contains(&0) {
        return Err(corrupt("zero-width layer"));
    }
    let n_heads = r.u32()?;
    if n_heads == 0 || n_heads > bytes.len() {
        return Err(corrupt("implausible head count"));
    }
    let mut head_shapes = Vec::with_capacity(n_heads);
    let mut class_ids = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("head name is not UTF-8"))?
            .to_string();
        let n = r.u32()?;
        if n == 0 || n > bytes.len() {
            return Err(corrupt("implausible class count"));
        }
        class_ids.push((0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?);
        head_shapes.push((name, n));
    }
    let mut fan_in = input;
    let mut backbone = Vec::with_capacity(depth);
    for &w in &widths {
        backbone.push(r.dense(fan_in, w)?);
        fan_in = w;
    }
    let mut heads = Vec::with_capacity(n_heads);
    for (name, n) in head_shapes {
        heads.push((name, r.dense(fan_in, n)?));
    }
    let mean = r.f64s(input)?;
    let std = r.f64s(input)?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Decoded {
        kind,
        backbone,
        heads,
        stats: CheckpointStats {
            features: FeatureStats { mean, std },
            variant,
            corpus_digest,
            seed,
            class_ids,
        },
    })
}

pub fn save_checkpoint(model: &Model, stats: &CheckpointStats) -> Vec<u8> {
    encode(KIND_SINGLE, &model.backbone, &[("", &model.head)], stats)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointStats)> {
    let mut d = decode(bytes)?;
    if d.kind != KIND_SINGLE {
        return Err(corrupt("multi-head checkpoint where a single head was expected"));
    }
    let (_, head) = d.heads.pop().expect("one head");
    Ok((
        Model {
            backbone: d.backbone,
            head,
        },
        d.stats,
    ))
}

pub fn save_mh_checkpoint(model: &MHModel, stats: &CheckpointStats) -> Vec<u8> {
    let heads: Vec<(&str, &Dense)> = model.heads.iter().map(|(k, v)| (k.as_str(), v)).collect();
    encode(KIND_MULTI, &model.backbone, &heads, stats)
}

pub fn load_mh_checkpoint(bytes: &[u8]) -> Result<(MHModel, CheckpointStats)> {
    let d = decode(bytes)?;
    if d.kind != KIND_MULTI {
        return Err(corrupt("single-head checkpoint where multiple heads were expected"));
    }
    Ok((
        MHModel {
            backbone: d.backbone,
            heads: d.heads.into_iter().collect(),
        },
        d.stats,
    ))
}

pub fn save_network(network: &Network, stats: &CheckpointStats) -> Vec<u8> {
    match network {
        Network::Single(m) => save_checkpoint(m, stats),
        Network::Multi(m) => save_mh_checkpoint(m, stats),
    }
}

/// Loads either kind of checkpoint.
pub fn load_network(bytes: &[u8]) -> Result<(Network, CheckpointStats)> {
    let d = decode(bytes)?;
    let network = if d.kind == KIND_SINGLE {
        let (_, head) = d.heads.into_iter().next().expect("one head");
        Network::Single(Model {
            backbone: d.backbone,
            head,
        })
    } else {
        Network::Multi(MHModel {
            backbone: d.backbone,
            heads: d.heads.into_iter().collect(),
        })
    };
    Ok((network, d.stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::N_FEATURES;
    use crate::model::{init_model, Parameters, DEFAULT_HIDDEN};

    fn stats(variant: Option<Variant>, n: usize) -> CheckpointStats {
        CheckpointStats {
            features: FeatureStats {
                mean: (0..N_FEATURES).map(|i| i as f64 * 0.1).collect(),
                std: (0..N_FEATURES).map(|i| 1.0 + i as f64).collect(),
            },
            variant,
            corpus_digest: [7; 32],
            seed: 42,
            class_ids: vec![(1..=n as u16).collect()],
        }
    }

    fn bits<P: Parameters>(p: &P) -> Vec<u64> {
        p.tensors().concat().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = init_model(&DEFAULT_HIDDEN, 8, 9).unwrap();
        m.head.bias[3] = f64::MIN_POSITIVE / 3.0;
        m.backbone[1].weight[[0, 0]] = -0.0;
        let s = stats(Some(Variant::Eight), 8);
        let bytes = save_checkpoint(&m, &s);
        let (back, s2) = load_checkpoint(&bytes).unwrap();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(s2, s);
        assert_eq!(s2.variant, Some(Variant::Eight));
        assert_eq!(save_checkpoint(&back, &s2), bytes);
    }

    #[test]
    fn multi_head_round_trip() {
        let heads = vec![("kitti".to_string(), 20), ("poss".to_string(), 13)];
        let mh = MHModel::init(N_FEATURES, &DEFAULT_HIDDEN, &heads, 1).unwrap();
        let mut s = stats(None, 20);
        s.class_ids.push((1..=13).collect());
        let bytes = save_mh_checkpoint(&mh, &s);
        let (back, s2) = load_mh_checkpoint(&bytes).unwrap();
        assert_eq!(back, mh);
        assert_eq!(s2, s);
        assert!(load_checkpoint(&bytes).is_err());
        assert_eq!(load_network(&bytes).unwrap().0, Network::Multi(mh.clone()));
        assert!(load_mh_checkpoint(&save_checkpoint(&mh.to_model("poss").unwrap(), &s)).is_err());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let m = crate::model::Model::init(3, &[2], 2, 0).unwrap();
        let mut s = stats(None, 2);
        s.features = FeatureStats::identity(3);
        let bytes = save_checkpoint(&m, &s);
        for len in 0..bytes.len() {
            assert!(
                matches!(load_checkpoint(&bytes[..len]), Err(ModelError::CorruptCheckpoint(_))),
                "length {len}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_checkpoint(&extra).is_err());
    }

    #[test]
    fn bad_magic_and_version() {
        let m = crate::model::Model::init(3, &[2], 2, 0).unwrap();
        let mut s = stats(None, 2);
        s.features = FeatureStats::identity(3);
        let bytes = save_checkpoint(&m, &s);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(load_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(load_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[7] = 3;
        assert!(load_checkpoint(&bad).is_err());
    }
}
