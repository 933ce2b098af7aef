//! Self-describing binary container for model parameters.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "LSTCKPT\0"
//! version  u32
//! n_meta   u32, then n_meta x (key: str, value: str)
//! n_block  u32, then n_block x (name: str, ndim: u32, dims: ndim x u64, data: prod(dims) x f64)
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes. Metadata keys
//! are strictly increasing and data is row-major, so every checkpoint has a
//! single encoding. Nothing may follow the last block.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::error::{Error, Result};
use crate::params::ParamBlocks;
use crate::pipelines::{LeSITAAutoencoder, LeSITAReconstructor, SiNet};
use crate::training::{CodeRegression, L2Variant};
use crate::unfolded::{NetKind, UnfoldedNetwork};

pub const MAGIC: &[u8; 8] = b"LSTCKPT\0";
pub const VERSION: u32 = 1;

const WHAT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub blocks: Vec<(String, ArrayD<f64>)>,
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn corrupt(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            what: self.what,
            offset: at,
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.corrupt(
                self.pos,
                format!("need {n} bytes, only {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt(at, "string is not UTF-8"))
    }

    /// Shape header followed by the f64 payload.
    pub(crate) fn array(&mut self) -> Result<ArrayD<f64>> {
        let at = self.pos;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.corrupt(at, format!("{ndim} dimensions (at most 8 supported)")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let d = self.u64()?;
            let d = usize::try_from(d).map_err(|_| self.corrupt(at, "dimension overflows usize"))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| self.corrupt(at, "element count overflows"))?;
            dims.push(d);
        }
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| self.corrupt(at, "payload size overflows"))?;
        let data_at = self.pos;
        let raw = self.take(bytes).map_err(|_| {
            self.corrupt(
                data_at,
                format!("payload of {count} values truncated ({} bytes left)", self.remaining()),
            )
        })?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| self.corrupt(at, e.to_string()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.corrupt(self.pos, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_array(out: &mut Vec<u8>, a: &ArrayViewD<f64>) {
    put_u32(out, a.ndim() as u32);
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    // `iter` walks in logical row-major order whatever the memory layout.
    for &v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_blocks<M: ParamBlocks>(model: &M, metadata: BTreeMap<String, String>) -> Self {
        Self {
            metadata,
            blocks: model
                .blocks()
                .into_iter()
                .map(|(n, b)| (n, b.to_owned()))
                .collect(),
        }
    }

    pub fn block(&self, name: &str) -> Option<ArrayViewD<'_, f64>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, a)| a.view())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {key:?}")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Data(format!("checkpoint metadata {key} = {v:?} is malformed")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.blocks.len() as u32);
        for (name, a) in &self.blocks {
            put_str(&mut out, name);
            put_array(&mut out, &a.view());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, WHAT);
        if r.take(8).map_err(|_| r.corrupt(0, "file too short for magic"))? != MAGIC {
            return Err(r.corrupt(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(8, format!("unsupported version {version}")));
        }
        let n_meta = r.u32()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let at = r.pos();
            let k = r.string()?;
            let v = r.string()?;
            // Keys are written sorted, which also rules out duplicates.
            if metadata.keys().next_back().is_some_and(|last: &String| *last >= k) {
                return Err(r.corrupt(at, format!("metadata key {k:?} out of order or repeated")));
            }
            metadata.insert(k, v);
        }
        let n_blocks = r.u32()?;
        let mut blocks: Vec<(String, ArrayD<f64>)> = Vec::new();
        for _ in 0..n_blocks {
            let at = r.pos();
            let name = r.string()?;
            if blocks.iter().any(|(n, _)| *n == name) {
                return Err(r.corrupt(at, format!("duplicate block {name:?}")));
            }
            let a = r.array()?;
            blocks.push((name, a));
        }
        r.finish()?;
        Ok(Self { metadata, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Human-readable listing of metadata and blocks.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("version {VERSION}\n"));
        for (k, v) in &self.metadata {
            s.push_str(&format!("meta {k} = {v}\n"));
        }
        for (name, a) in &self.blocks {
            if a.len() == 1 {
                s.push_str(&format!("block {name} {:?} value {:e}\n", a.shape(), a.iter().next().unwrap()));
            } else {
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                s.push_str(&format!("block {name} {:?} fro_norm {norm:e}\n", a.shape()));
            }
        }
        s
    }
}

/// Any model the toolkit can save.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Network(CodeRegression),
    Autoencoder(LeSITAAutoencoder),
    Reconstructor(LeSITAReconstructor),
}

fn net_meta(meta: &mut BTreeMap<String, String>, prefix: &str, net: &UnfoldedNetwork) {
    meta.insert(format!("{prefix}kind"), net.kind().as_str().into());
    meta.insert(format!("{prefix}depth"), net.depth().to_string());
    meta.insert(format!("{prefix}tied"), net.tied().to_string());
}

fn net_from(ck: &Checkpoint, meta_prefix: &str, block_prefix: &str) -> Result<UnfoldedNetwork> {
    let kind: NetKind = ck.meta(&format!("{meta_prefix}kind"))?.parse().map_err(|_| {
        Error::Data(format!("checkpoint metadata {meta_prefix}kind is malformed"))
    })?;
    let depth: usize = ck.meta_parse(&format!("{meta_prefix}depth"))?;
    let tied: bool = ck.meta_parse(&format!("{meta_prefix}tied"))?;
    UnfoldedNetwork::from_blocks(kind, depth, tied, block_prefix, |n| ck.block(n))
}

fn matrix(ck: &Checkpoint, name: &str) -> Result<ndarray::Array2<f64>> {
    ck.block(name)
        .ok_or_else(|| Error::Data(format!("missing parameter block {name}")))?
        .into_dimensionality::<ndarray::Ix2>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::Data(format!("parameter block {name} is not a matrix")))
}

impl SavedModel {
    pub fn model_name(&self) -> &'static str {
        match self {
            SavedModel::Network(m) => m.net.kind().as_str(),
            SavedModel::Autoencoder(_) => "lesita_ae",
            SavedModel::Reconstructor(_) => "lesita_rec",
        }
    }

    /// Serializes the model; `extra` metadata (seed, lambda, ...) is merged in.
    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut meta = extra.clone();
        meta.insert("model".into(), self.model_name().into());
        match self {
            SavedModel::Network(m) => {
                net_meta(&mut meta, "", &m.net);
                Checkpoint::from_blocks(m, meta)
            }
            SavedModel::Autoencoder(ae) => {
                net_meta(&mut meta, "encoder.", ae.encoder());
                net_meta(&mut meta, "sinet.", &ae.sinet().net);
                meta.insert("l2_variant".into(), ae.l2_variant().as_str().into());
                Checkpoint::from_blocks(ae, meta)
            }
            SavedModel::Reconstructor(rec) => {
                net_meta(&mut meta, "encoder.", rec.encoder());
                net_meta(&mut meta, "sinet.", &rec.sinet().net);
                meta.insert("phi_trainable".into(), rec.phi_trainable().to_string());
                Checkpoint::from_blocks(rec, meta)
            }
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = match ck.meta("model")? {
            "lista" | "lesita" => SavedModel::Network(CodeRegression { net: net_from(ck, "", "")? }),
            "lesita_ae" => {
                let variant: L2Variant = ck
                    .meta("l2_variant")?
                    .parse()
                    .map_err(|_| Error::Data("checkpoint l2_variant is malformed".into()))?;
                SavedModel::Autoencoder(LeSITAAutoencoder::new(
                    net_from(ck, "encoder.", "encoder.")?,
                    matrix(ck, "decoder.D")?,
                    SiNet::new(net_from(ck, "sinet.", "sinet.")?)?,
                    variant,
                )?)
            }
            "lesita_rec" => SavedModel::Reconstructor(LeSITAReconstructor::new(
                matrix(ck, "phi")?,
                ck.meta_parse("phi_trainable")?,
                net_from(ck, "encoder.", "encoder.")?,
                matrix(ck, "decoder.D")?,
                SiNet::new(net_from(ck, "sinet.", "sinet.")?)?,
            )?),
            other => return Err(Error::Data(format!("unknown model type {other:?} in checkpoint"))),
        };
        let expected = model.to_checkpoint(&BTreeMap::new()).blocks.len();
        if expected != ck.blocks.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} blocks, the model uses {expected}",
                ck.blocks.len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipelines::{gaussian_measurement, reconstructor_from_autoencoder, AutoencoderInit, MainInit};
    use crate::unfolded::init_from_operator;
    use ndarray::{array, Array2};

    fn ae() -> LeSITAAutoencoder {
        LeSITAAutoencoder::init(&AutoencoderInit {
            n: 6,
            d: 4,
            k: 9,
            depth: 2,
            si_depth: 3,
            lambda: 0.1,
            l2_variant: L2Variant::B,
            seed: 5,
        })
        .unwrap()
    }

    fn round_trip(m: &SavedModel) {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "42".to_string());
        let ck = m.to_checkpoint(&meta);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        assert_eq!(&SavedModel::from_checkpoint(&back).unwrap(), m);
        for ((_, a), (_, b)) in ck.blocks.iter().zip(&back.blocks) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn all_model_kinds_round_trip_bit_exactly() {
        let f = array![[1.0, 0.5, -0.25], [0.1, -2.0, 1.0 / 3.0]];
        for kind in [NetKind::Lista, NetKind::Lesita] {
            for tied in [false, true] {
                let net = init_from_operator(kind, f.view(), 0.1, 3, tied).unwrap();
                round_trip(&SavedModel::Network(CodeRegression { net }));
            }
        }
        let a = ae();
        round_trip(&SavedModel::Autoencoder(a.clone()));
        let rec = reconstructor_from_autoencoder(&a, gaussian_measurement(3, 6, 1).unwrap(), 2, 0.1, MainInit::Reinit)
            .unwrap();
        round_trip(&SavedModel::Reconstructor(rec));
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let ck = SavedModel::Autoencoder(ae()).to_checkpoint(&BTreeMap::new());
        let bytes = ck.encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Corrupt { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::decode(cut) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset > 8 && offset < bytes.len()),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::decode(&extra),
            Err(Error::Corrupt { offset, .. }) if offset == bytes.len()
        ));
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(matches!(Checkpoint::decode(&ver), Err(Error::Corrupt { offset: 8, .. })));
        assert!(Checkpoint::decode(&[]).is_err());
    }

    #[test]
    fn huge_declared_sizes_fail_cleanly() {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, 0);
        put_u32(&mut out, 1);
        put_str(&mut out, "x");
        put_u32(&mut out, 2);
        out.extend_from_slice(&u64::MAX.to_le_bytes());
        out.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&out), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let mut ck = SavedModel::Autoencoder(ae()).to_checkpoint(&BTreeMap::new());
        ck.blocks.retain(|(n, _)| n != "decoder.D");
        assert!(SavedModel::from_checkpoint(&ck).is_err());
        let mut ck = SavedModel::Autoencoder(ae()).to_checkpoint(&BTreeMap::new());
        ck.blocks.push(("stray".into(), Array2::<f64>::zeros((1, 1)).into_dyn()));
        assert!(SavedModel::from_checkpoint(&ck).is_err());
        ck.metadata.insert("model".into(), "mystery".into());
        assert!(SavedModel::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn fresh_init_dump_shows_uniform_thresholds() {
        let f = array![[1.0, 0.0], [0.0, 2.0]];
        let net = init_from_operator(NetKind::Lesita, f.view(), 0.3, 3, false).unwrap();
        let thr = net.layer(0).threshold;
        let dump = SavedModel::Network(CodeRegression { net }).to_checkpoint(&BTreeMap::new()).dump();
        let mus: Vec<&str> = dump.lines().filter(|l| l.contains(".mu")).collect();
        assert_eq!(mus.len(), 3);
        for l in mus {
            assert!(l.ends_with(&format!("value {thr:e}")), "{l}");
        }
    }
}
