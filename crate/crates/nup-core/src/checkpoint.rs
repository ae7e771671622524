//! Checkpoint archives and pretrained-weight export.
//!
//! One container covers both uses: a flat archive of named raw tensors
//! with a JSON header, chosen so any language can read it with a few
//! lines of code. Layout:
//!
//! ```text
//! bytes 0..4      magic "NUPW"
//! bytes 4..8      format version, u32 little-endian
//! bytes 8..16     header length n, u64 little-endian
//! bytes 16..16+n  header JSON: {kind, meta, tensors: [{name, shape,
//!                 dtype, offset, byte_len}]}
//! then            payload: tensor data, f32 little-endian, offsets
//!                 relative to the payload start
//! last 32 bytes   SHA-256 over everything before it
//! ```
//!
//! A checkpoint holds all four networks plus optimizer moments and
//! controller state in `meta`; an export is a pure projection of the
//! segmentation network's pretrained groups, selected by [`ExportScope`].

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Adam, ParamId, ParamStore};

pub const MAGIC: [u8; 4] = *b"NUPW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a weights archive (bad magic)")]
    BadMagic,
    #[error("format version {got} not supported (this build reads {want})")]
    Version { got: u32, want: u32 },
    #[error("file too short to be an archive")]
    Truncated,
    #[error("checksum mismatch, file is corrupt")]
    Corrupt,
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("tensor {0} is inconsistent with its declared shape")]
    BadTensor(String),
    #[error("archive holds no tensors under {0}")]
    MissingGroup(String),
    #[error("archive kind is {got}, expected {want}")]
    WrongKind { got: String, want: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    Checkpoint,
    Export,
}

impl ArchiveKind {
    fn as_str(self) -> &'static str {
        match self {
            ArchiveKind::Checkpoint => "checkpoint",
            ArchiveKind::Export => "export",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ArchiveKind,
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// An in-memory archive: named f32 tensors plus free-form JSON metadata.
pub struct Archive {
    pub kind: ArchiveKind,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Archive {
    pub fn new(kind: ArchiveKind) -> Archive {
        Archive {
            kind,
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f32>,
    ) -> Result<(), ArchiveError> {
        if self.tensors.contains_key(name) {
            return Err(ArchiveError::Duplicate(name.to_string()));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(ArchiveError::BadTensor(name.to_string()));
        }
        self.tensors
            .insert(name.to_string(), (shape.to_vec(), data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Tensor names in sorted order.
    pub fn names(&self) -> Vec<&str> {
        self.tensors.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn expect_kind(&self, want: ArchiveKind) -> Result<(), ArchiveError> {
        if self.kind != want {
            return Err(ArchiveError::WrongKind {
                got: self.kind.as_str().to_string(),
                want: want.as_str().to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut records = Vec::with_capacity(self.tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        for (name, (shape, data)) in &self.tensors {
            let offset = payload.len() as u64;
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            records.push(TensorRecord {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".to_string(),
                offset,
                byte_len: (data.len() * 4) as u64,
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind,
            meta: self.meta.clone(),
            tensors: records,
        })?;
        let mut bytes = Vec::with_capacity(16 + header.len() + payload.len() + 32);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&payload);
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive, ArchiveError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 + 32 {
            return Err(ArchiveError::Truncated);
        }
        if bytes[0..4] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ArchiveError::Version {
                got: version,
                want: FORMAT_VERSION,
            });
        }
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        if digest.as_slice() != &bytes[body_len..] {
            return Err(ArchiveError::Corrupt);
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if 16 + header_len > body_len {
            return Err(ArchiveError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
        let payload = &bytes[16 + header_len..body_len];
        let mut tensors = BTreeMap::new();
        for rec in header.tensors {
            let n: usize = rec.shape.iter().product();
            if rec.byte_len as usize != n * 4 {
                return Err(ArchiveError::BadTensor(rec.name));
            }
            let start = rec.offset as usize;
            let end = start + rec.byte_len as usize;
            if end > payload.len() {
                return Err(ArchiveError::BadTensor(rec.name));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(rec.name.clone(), (rec.shape, data)).is_some() {
                return Err(ArchiveError::Duplicate(rec.name));
            }
        }
        Ok(Archive {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}

/// Which pretrained groups an export carries. The scopes nest strictly:
/// encoder is the backbone alone, fpn adds the lateral/smoothing pyramid,
/// all_available adds the instance heads. The mask-image decode head is
/// never exported; it has no downstream use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportScope {
    Encoder,
    Fpn,
    AllAvailable,
}

impl ExportScope {
    pub fn parse(s: &str) -> Option<ExportScope> {
        match s {
            "encoder" => Some(ExportScope::Encoder),
            "fpn" => Some(ExportScope::Fpn),
            "all" | "all_available" => Some(ExportScope::AllAvailable),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExportScope::Encoder => "encoder",
            ExportScope::Fpn => "fpn",
            ExportScope::AllAvailable => "all_available",
        }
    }

    /// Parameter-name prefixes included in this scope.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            ExportScope::Encoder => &["s.stem", "s.stage"],
            ExportScope::Fpn => &["s.stem", "s.stage", "s.fpn"],
            ExportScope::AllAvailable => {
                &["s.stem", "s.stage", "s.fpn", "s.rpn", "s.box", "s.mask"]
            }
        }
    }
}

/// Copy `ids` from a parameter store into an archive under their
/// hierarchical names.
pub fn pack_params(
    a: &mut Archive,
    store: &ParamStore,
    ids: &[ParamId],
) -> Result<(), ArchiveError> {
    for &id in ids {
        a.insert(
            store.name(id),
            store.shape(id),
            store.value(id).iter().copied().collect(),
        )?;
    }
    Ok(())
}

/// Set every store parameter that has a same-named archive tensor.
/// Returns the loaded names in sorted order; archive tensors without a
/// matching parameter (optimizer moments, say) are skipped, as are
/// parameters the archive lacks. A shape conflict is an error.
pub fn load_matching_params(
    a: &Archive,
    store: &mut ParamStore,
) -> Result<Vec<String>, ArchiveError> {
    let mut loaded = Vec::new();
    for name in a.names() {
        let Some(id) = store.lookup(name) else { continue };
        let (shape, data) = a.get(name).unwrap();
        if shape != store.shape(id) {
            return Err(ArchiveError::BadTensor(name.to_string()));
        }
        store.set_value(id, ArrayD::from_shape_vec(IxDyn(shape), data.to_vec()).unwrap());
        loaded.push(name.to_string());
    }
    Ok(loaded)
}

/// Project a checkpoint onto an export scope. Values are copied bitwise;
/// a scope prefix matching nothing in the checkpoint is an error.
pub fn export(ckpt: &Archive, scope: ExportScope) -> Result<Archive, ArchiveError> {
    let mut out = Archive::new(ArchiveKind::Export);
    let mut meta = serde_json::Map::new();
    meta.insert("scope".into(), serde_json::json!(scope.as_str()));
    if let Some(cfg) = ckpt.meta.get("config") {
        meta.insert("config".into(), cfg.clone());
    }
    out.meta = serde_json::Value::Object(meta);
    for prefix in scope.prefixes() {
        let matching: Vec<&str> = ckpt
            .names()
            .into_iter()
            .filter(|n| n.starts_with(prefix))
            .collect();
        if matching.is_empty() {
            return Err(ArchiveError::MissingGroup(prefix.to_string()));
        }
        for name in matching {
            let (shape, data) = ckpt.get(name).unwrap();
            if out.get(name).is_none() {
                out.insert(name, shape, data.to_vec())?;
            }
        }
    }
    Ok(out)
}

/// Read an export's declared scope from its metadata.
pub fn export_scope(a: &Archive) -> Option<ExportScope> {
    a.meta
        .get("scope")
        .and_then(|v| v.as_str())
        .and_then(ExportScope::parse)
}

/// Store one optimizer's moments as archive tensors: `opt.{label}.m.*`,
/// `opt.{label}.v.*`, plus the per-parameter step count as a scalar
/// tensor (exact in f32 for any realistic run length).
pub fn pack_adam(
    a: &mut Archive,
    label: &str,
    adam: &Adam,
    store: &ParamStore,
) -> Result<(), ArchiveError> {
    for (id, m, v, t) in adam.snapshot() {
        let name = store.name(ParamId(id));
        let shape: Vec<usize> = m.shape().to_vec();
        a.insert(&format!("opt.{label}.m.{name}"), &shape, m.iter().copied().collect())?;
        a.insert(&format!("opt.{label}.v.{name}"), &shape, v.iter().copied().collect())?;
        a.insert(&format!("opt.{label}.t.{name}"), &[1], vec![t as f32])?;
    }
    Ok(())
}

/// Restore moments packed by [`pack_adam`] into a fresh optimizer.
pub fn unpack_adam(
    a: &Archive,
    label: &str,
    adam: &mut Adam,
    store: &ParamStore,
) -> Result<(), ArchiveError> {
    let mut entries = Vec::new();
    let m_prefix = format!("opt.{label}.m.");
    for full in a.names() {
        let Some(name) = full.strip_prefix(&m_prefix) else { continue };
        let Some(id) = store.lookup(name) else {
            return Err(ArchiveError::BadTensor(full.to_string()));
        };
        let (shape, m) = a.get(full).unwrap();
        let (vshape, v) = a
            .get(&format!("opt.{label}.v.{name}"))
            .ok_or_else(|| ArchiveError::BadTensor(full.to_string()))?;
        let (_, t) = a
            .get(&format!("opt.{label}.t.{name}"))
            .ok_or_else(|| ArchiveError::BadTensor(full.to_string()))?;
        if shape != store.shape(id) || vshape != shape {
            return Err(ArchiveError::BadTensor(full.to_string()));
        }
        entries.push((
            id.0,
            ArrayD::from_shape_vec(IxDyn(shape), m.to_vec()).unwrap(),
            ArrayD::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap(),
            t[0] as u64,
        ));
    }
    adam.restore(entries);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FpnConfig, Segmenter};
    use crate::tensor::Scope;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn random_archive(seed: u64) -> Archive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Archive::new(ArchiveKind::Checkpoint);
        a.meta = serde_json::json!({"iter": 17, "note": "fixture"});
        for (name, shape) in [
            ("g.conv.w", vec![4usize, 3, 3, 3]),
            ("g.conv.b", vec![4]),
            ("s.stem.w", vec![8, 3, 3, 3]),
        ] {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            a.insert(name, &shape, data).unwrap();
        }
        a
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nupw");
        let a = random_archive(3);
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(b.kind, ArchiveKind::Checkpoint);
        assert_eq!(b.meta["iter"], 17);
        assert_eq!(a.names(), b.names());
        for name in a.names() {
            let (s1, d1) = a.get(name).unwrap();
            let (s2, d2) = b.get(name).unwrap();
            assert_eq!(s1, s2);
            assert_eq!(d1.len(), d2.len());
            for (x, y) in d1.iter().zip(d2) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} changed across the round trip");
            }
        }
    }

    #[test]
    fn corruption_is_reported_not_crashed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nupw");
        random_archive(4).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("t.nupw");
        std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Archive::load(&truncated),
            Err(ArchiveError::Corrupt) | Err(ArchiveError::Truncated)
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        let fpath = dir.path().join("f.nupw");
        std::fs::write(&fpath, &flipped).unwrap();
        assert!(matches!(Archive::load(&fpath), Err(ArchiveError::Corrupt)));

        let short = dir.path().join("s.nupw");
        std::fs::write(&short, b"NUPW").unwrap();
        assert!(matches!(Archive::load(&short), Err(ArchiveError::Truncated)));
    }

    #[test]
    fn wrong_magic_and_newer_version_are_explicit_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nupw");
        random_archive(5).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut nomagic = bytes.clone();
        nomagic[0] = b'X';
        let p1 = dir.path().join("m.nupw");
        std::fs::write(&p1, &nomagic).unwrap();
        assert!(matches!(Archive::load(&p1), Err(ArchiveError::BadMagic)));

        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        // Re-seal so the version check, not the checksum, fires.
        let body = newer.len() - 32;
        let digest = Sha256::digest(&newer[..body]);
        newer[body..].copy_from_slice(&digest);
        let p2 = dir.path().join("v.nupw");
        std::fs::write(&p2, &newer).unwrap();
        match Archive::load(&p2) {
            Err(ArchiveError::Version { got, want }) => {
                assert_eq!(got, FORMAT_VERSION + 1);
                assert_eq!(want, FORMAT_VERSION);
            }
            _ => panic!("expected a version error"),
        }
    }

    #[test]
    fn duplicate_and_misshapen_inserts_are_rejected() {
        let mut a = Archive::new(ArchiveKind::Export);
        a.insert("w", &[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            a.insert("w", &[2, 2], vec![0.0; 4]),
            Err(ArchiveError::Duplicate(_))
        ));
        assert!(matches!(
            a.insert("b", &[3], vec![0.0; 2]),
            Err(ArchiveError::BadTensor(_))
        ));
    }

    fn segmenter_checkpoint(seed: u64) -> (ParamStore, Archive) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = Scope::root(&mut store);
        Segmenter::new(&FpnConfig::default(), &mut root.child("s"), &mut rng).unwrap();
        drop(root);
        let mut ckpt = Archive::new(ArchiveKind::Checkpoint);
        let ids = store.all_ids();
        pack_params(&mut ckpt, &store, &ids).unwrap();
        (store, ckpt)
    }

    #[test]
    fn export_scopes_nest_strictly_and_copy_bitwise() {
        let (store, ckpt) = segmenter_checkpoint(11);
        let enc = export(&ckpt, ExportScope::Encoder).unwrap();
        let fpn = export(&ckpt, ExportScope::Fpn).unwrap();
        let all = export(&ckpt, ExportScope::AllAvailable).unwrap();
        let names = |a: &Archive| -> BTreeSet<String> {
            a.names().into_iter().map(String::from).collect()
        };
        let (ne, nf, na) = (names(&enc), names(&fpn), names(&all));
        assert!(ne.is_subset(&nf) && ne.len() < nf.len());
        assert!(nf.is_subset(&na) && nf.len() < na.len());
        for set in [&ne, &nf, &na] {
            assert!(set.iter().all(|n| !n.starts_with("s.decode")));
        }
        assert!(na.iter().any(|n| n.starts_with("s.mask")));
        for name in &nf {
            let id = store.lookup(name).unwrap();
            let (_, data) = fpn.get(name).unwrap();
            for (a, b) in data.iter().zip(store.value(id).iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(export_scope(&enc), Some(ExportScope::Encoder));
        assert_eq!(export_scope(&all), Some(ExportScope::AllAvailable));
    }

    #[test]
    fn export_from_a_groupless_archive_names_the_gap() {
        let a = random_archive(6);
        match export(&a, ExportScope::Fpn) {
            Err(ArchiveError::MissingGroup(g)) => assert_eq!(g, "s.stage"),
            _ => panic!("expected MissingGroup"),
        }
    }

    #[test]
    fn fpn_export_initializes_backbone_but_not_heads() {
        let (src_store, ckpt) = segmenter_checkpoint(21);
        let exp = export(&ckpt, ExportScope::Fpn).unwrap();
        let (mut dst_store, _) = segmenter_checkpoint(99);
        let fresh: Vec<(String, Vec<f32>)> = dst_store
            .all_ids()
            .into_iter()
            .map(|id| {
                (
                    dst_store.name(id).to_string(),
                    dst_store.value(id).iter().copied().collect(),
                )
            })
            .collect();
        let loaded = load_matching_params(&exp, &mut dst_store).unwrap();
        assert_eq!(loaded.len(), exp.len());
        for (name, fresh_vals) in &fresh {
            let id = dst_store.lookup(name).unwrap();
            let now: Vec<f32> = dst_store.value(id).iter().copied().collect();
            let src: Vec<f32> = src_store
                .value(src_store.lookup(name).unwrap())
                .iter()
                .copied()
                .collect();
            if loaded.binary_search(name).is_ok() {
                assert_eq!(now, src, "{name} should carry the exported values");
            } else {
                assert_eq!(&now, fresh_vals, "{name} should keep its fresh init");
            }
        }
    }

    #[test]
    fn adam_state_survives_the_archive() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a_id = store.create("g.w", &[2, 3], crate::tensor::Init::Normal { std: 1.0 }, &mut rng);
        let b_id = store.create("g.b", &[3], crate::tensor::Init::Zeros, &mut rng);
        let mut adam = Adam::new(0.0, 0.99, 1e-8);
        for step in 0..3 {
            for id in [a_id, b_id] {
                let g = ArrayD::from_elem(IxDyn(store.shape(id)), 0.1 * (step + 1) as f32);
                store.accumulate_grad(id, &g);
            }
            adam.step(&mut store, &[a_id, b_id], 1e-3);
            store.zero_grad(&[a_id, b_id]);
        }
        let mut arch = Archive::new(ArchiveKind::Checkpoint);
        pack_adam(&mut arch, "gs", &adam, &store).unwrap();
        let mut restored = Adam::new(0.0, 0.99, 1e-8);
        unpack_adam(&arch, "gs", &mut restored, &store).unwrap();
        let s1 = adam.snapshot();
        let s2 = restored.snapshot();
        assert_eq!(s1.len(), s2.len());
        for ((i1, m1, v1, t1), (i2, m2, v2, t2)) in s1.iter().zip(&s2) {
            assert_eq!(i1, i2);
            assert_eq!(t1, t2);
            assert_eq!(m1, m2);
            assert_eq!(v1, v2);
        }
    }
}
