//! Binary model format, little-endian throughout.
//!
//! ```text
//! magic        4 bytes  "SXPM"
//! version      u16      1
//! n_classes    u8       then one u8 class index each (0 neg, 1 neu, 2 pos)
//! n_features   u16      then per feature: u16 byte length + UTF-8 name
//! base_score   f64      one per class
//! seed         u64
//! hyperparams  u32 n_rounds, u32 max_depth, f64 learning_rate,
//!              f64 min_child_weight, f64 l2_lambda, f64 subsample
//! fold_k       u32      0 when unknown
//! n_rounds     u32      then n_rounds * n_classes trees, class-major per round
//! tree         u32 node count, then per node:
//!              u16 feature (0xFFFF marks a leaf)
//!              f64 threshold, or leaf value
//!              u32 left, u32 right (0 for leaves)
//!              u32 cover
//! crc32        u32      over every preceding byte
//! ```

use std::path::Path;

use super::gbdt::{GbdtModel, Hyperparams, Node, TrainingMeta, Tree};
use super::LearnError;
use crate::model::ValenceClass;

pub const MAGIC: &[u8; 4] = b"SXPM";
pub const VERSION: u16 = 1;
const LEAF: u16 = 0xFFFF;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LearnError> {
        let end = self.pos.checked_add(n).ok_or(LearnError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(LearnError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, LearnError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, LearnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, LearnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, LearnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, LearnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn bad(msg: impl Into<String>) -> LearnError {
    LearnError::Format(msg.into())
}

pub fn model_to_bytes(model: &GbdtModel) -> Result<Vec<u8>, LearnError> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(u8::try_from(model.classes.len()).map_err(|_| bad("too many classes"))?);
    for c in &model.classes {
        w.u8(c.index() as u8);
    }
    if model.feature_names.len() >= LEAF as usize {
        return Err(bad("too many features"));
    }
    w.u16(model.feature_names.len() as u16);
    for name in &model.feature_names {
        let b = name.as_bytes();
        w.u16(u16::try_from(b.len()).map_err(|_| bad("feature name too long"))?);
        w.0.extend_from_slice(b);
    }
    for &b in &model.base_score {
        w.f64(b);
    }
    let hp = &model.meta.hyperparams;
    w.u64(model.meta.seed);
    w.u32(hp.n_rounds);
    w.u32(hp.max_depth);
    w.f64(hp.learning_rate);
    w.f64(hp.min_child_weight);
    w.f64(hp.l2_lambda);
    w.f64(hp.subsample);
    w.u32(model.meta.fold_k.unwrap_or(0));
    w.u32(model.rounds.len() as u32);
    for round in &model.rounds {
        if round.len() != model.classes.len() {
            return Err(bad("round does not hold one tree per class"));
        }
        for tree in round {
            w.u32(tree.nodes.len() as u32);
            for node in &tree.nodes {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        cover,
                    } => {
                        w.u16(feature as u16);
                        w.f64(threshold);
                        w.u32(left as u32);
                        w.u32(right as u32);
                        w.u32(cover as u32);
                    }
                    Node::Leaf { value, cover } => {
                        w.u16(LEAF);
                        w.f64(value);
                        w.u32(0);
                        w.u32(0);
                        w.u32(cover as u32);
                    }
                }
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

pub fn model_from_bytes(buf: &[u8]) -> Result<GbdtModel, LearnError> {
    if buf.len() < MAGIC.len() + 2 || &buf[..4] != MAGIC {
        return Err(LearnError::Version("bad magic bytes, not a model file".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(LearnError::Version(format!("unsupported model version {version}")));
    }
    if buf.len() < 10 {
        return Err(LearnError::Truncated);
    }
    let (body, trailer) = buf.split_at(buf.len() - 4);
    let mut r = Reader { buf: body, pos: 6 };

    let n_classes = r.u8()? as usize;
    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let i = r.u8()? as usize;
        classes.push(ValenceClass::from_index(i).ok_or_else(|| bad(format!("class index {i}")))?);
    }
    let n_features = r.u16()? as usize;
    let mut feature_names = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        let len = r.u16()? as usize;
        let s = std::str::from_utf8(r.take(len)?).map_err(|_| bad("feature name is not UTF-8"))?;
        feature_names.push(s.to_string());
    }
    let base_score = (0..n_classes).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let seed = r.u64()?;
    let hyperparams = Hyperparams {
        n_rounds: r.u32()?,
        max_depth: r.u32()?,
        learning_rate: r.f64()?,
        min_child_weight: r.f64()?,
        l2_lambda: r.f64()?,
        subsample: r.f64()?,
    };
    let fold_k = Some(r.u32()?).filter(|&k| k > 0);
    let n_rounds = r.u32()? as usize;
    let mut rounds = Vec::with_capacity(n_rounds.min(1 << 16));
    for _ in 0..n_rounds {
        let mut round = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let n_nodes = r.u32()? as usize;
            if n_nodes == 0 {
                return Err(bad("empty tree"));
            }
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
            for _ in 0..n_nodes {
                let feature = r.u16()?;
                let v = r.f64()?;
                let left = r.u32()? as usize;
                let right = r.u32()? as usize;
                let cover = f64::from(r.u32()?);
                if feature == LEAF {
                    nodes.push(Node::Leaf { value: v, cover });
                } else {
                    nodes.push(Node::Split {
                        feature: feature as usize,
                        threshold: v,
                        left,
                        right,
                        cover,
                    });
                }
            }
            round.push(Tree { nodes });
        }
        rounds.push(round);
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after the last tree"));
    }
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if stored != crc32fast::hash(body) {
        return Err(LearnError::Checksum);
    }
    let model = GbdtModel {
        classes,
        base_score,
        rounds,
        feature_names,
        meta: TrainingMeta {
            seed,
            hyperparams,
            fold_k,
        },
    };
    check(&model)?;
    Ok(model)
}

fn check(model: &GbdtModel) -> Result<(), LearnError> {
    for round in &model.rounds {
        for tree in round {
            let n = tree.nodes.len();
            for (i, node) in tree.nodes.iter().enumerate() {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        ..
                    } => {
                        if feature >= model.feature_names.len() {
                            return Err(bad(format!("split on unknown feature {feature}")));
                        }
                        // children always follow their parent, which rules out cycles
                        if left <= i || right <= i || left >= n || right >= n || threshold.is_nan() {
                            return Err(bad("bad split node"));
                        }
                    }
                    Node::Leaf { value, .. } => {
                        if !value.is_finite() {
                            return Err(bad("non-finite leaf"));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn persist_model(model: &GbdtModel, path: &Path) -> Result<(), LearnError> {
    let bytes = model_to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GbdtModel, LearnError> {
    model_from_bytes(&std::fs::read(path)?)
}
