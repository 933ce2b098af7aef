//! On-disk datasets: a TOML manifest next to flat binary arrays, plus a
//! minimal PGM codec for image pairs.
//!
//! Array blob layout (little-endian): magic `"LSTARR\0\0"`, `u32` version,
//! `u32` ndim, `ndim x u64` dims, then row-major `f64` values.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{put_array, put_u32, Reader};
use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};

pub const ARRAY_MAGIC: &[u8; 8] = b"LSTARR\0\0";
pub const ARRAY_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

/// Images larger than this many pixels are rejected by the PGM decoder.
const MAX_PIXELS: usize = 1 << 28;

pub fn encode_array(a: &ArrayViewD<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * a.ndim() + 8 * a.len());
    out.extend_from_slice(ARRAY_MAGIC);
    put_u32(&mut out, ARRAY_VERSION);
    put_array(&mut out, a);
    out
}

pub fn decode_array(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let mut r = Reader::new(bytes, "array blob");
    if r.take(8).map_err(|_| r.corrupt(0, "file too short for magic"))? != ARRAY_MAGIC {
        return Err(r.corrupt(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != ARRAY_VERSION {
        return Err(r.corrupt(8, format!("unsupported version {version}")));
    }
    let a = r.array()?;
    r.finish()?;
    Ok(a)
}

pub fn write_array(path: impl AsRef<Path>, a: &ArrayViewD<f64>) -> Result<()> {
    std::fs::write(path.as_ref(), encode_array(a)).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let p = path.as_ref();
    read_array(p)?
        .into_dimensionality()
        .map_err(|_| Error::Data(format!("{}: expected a 2-D array", p.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An aligned image pair: the target modality and its side information.
/// Files are PGM (`.pgm`) or 2-D array blobs with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePairEntry {
    pub name: String,
    pub target: String,
    pub side: String,
    pub split: Split,
}

/// How the synthetic arrays were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    /// Signal length (rows of the dictionary).
    pub n: usize,
    pub dictionary_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub pairs: Vec<ImagePairEntry>,
}

fn safe_relative(file: &str) -> bool {
    let p = Path::new(file);
    !file.is_empty()
        && p.components()
            .all(|c| matches!(c, std::path::Component::Normal(_)))
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest format_version {} is not supported",
                self.format_version
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.arrays {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Data(format!("manifest: duplicate array {:?}", a.name)));
            }
            if !safe_relative(&a.file) {
                return Err(Error::Data(format!("manifest: unsafe file path {:?}", a.file)));
            }
        }
        let mut pair_names = std::collections::BTreeSet::new();
        for p in &self.pairs {
            if !pair_names.insert(p.name.as_str()) {
                return Err(Error::Data(format!("manifest: duplicate pair {:?}", p.name)));
            }
            if !safe_relative(&p.target) || !safe_relative(&p.side) {
                return Err(Error::Data(format!("manifest: unsafe file path in pair {:?}", p.name)));
            }
        }
        if let Some(s) = &self.synthetic {
            s.spec.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("manifest: {e}")))
    }

    pub fn array(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

/// A dataset directory: the manifest plus the files it names.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DatasetDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::parse(&text)?;
        Ok(Self { root, manifest })
    }

    /// Writes the manifest and every array into `root`, which is created if
    /// needed.
    pub fn create(
        root: impl Into<PathBuf>,
        mut manifest: Manifest,
        arrays: &[(&str, ArrayViewD<f64>)],
    ) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        for (name, a) in arrays {
            let file = format!("{name}.bin");
            write_array(root.join(&file), a)?;
            manifest.arrays.retain(|e| e.name != *name);
            manifest.arrays.push(ArrayEntry {
                name: name.to_string(),
                file,
                shape: a.shape().to_vec(),
            });
        }
        manifest.validate()?;
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, manifest.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(Self { root, manifest })
    }

    pub fn load_array(&self, name: &str) -> Result<ArrayD<f64>> {
        let entry = self
            .manifest
            .array(name)
            .ok_or_else(|| Error::Data(format!("dataset has no array {name:?}")))?;
        let a = read_array(self.root.join(&entry.file))?;
        if a.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!(
                "array {name:?} has shape {:?}, manifest says {:?}",
                a.shape(),
                entry.shape
            )));
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("array {name:?} has a non-finite value at flat index {i}")));
        }
        Ok(a)
    }

    pub fn load_matrix(&self, name: &str) -> Result<Array2<f64>> {
        self.load_array(name)?
            .into_dimensionality()
            .map_err(|_| Error::Data(format!("array {name:?} is not 2-D")))
    }

    /// Loads an aligned `(target, side)` image pair.
    pub fn load_pair(&self, entry: &ImagePairEntry) -> Result<(Array2<f64>, Array2<f64>)> {
        let t = load_image(self.root.join(&entry.target))?;
        let s = load_image(self.root.join(&entry.side))?;
        if t.dim() != s.dim() {
            return Err(Error::Data(format!(
                "pair {:?} is not aligned: {:?} vs {:?}",
                entry.name,
                t.dim(),
                s.dim()
            )));
        }
        Ok((t, s))
    }
}

/// Reads a grayscale image in `[0, 1]` from a PGM file or a 2-D array blob.
pub fn load_image(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let p = path.as_ref();
    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
    let img = if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        decode_pgm(&bytes)?
    } else {
        decode_array(&bytes)?
            .into_dimensionality()
            .map_err(|_| Error::Data(format!("{}: image must be 2-D", p.display())))?
    };
    if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data(format!("{}: pixel values must lie in [0, 1]", p.display())));
    }
    Ok(img)
}

/// Decodes a P2 (ASCII) or P5 (binary) PGM image, scaled to `[0, 1]` by its
/// maximum value.
pub fn decode_pgm(bytes: &[u8]) -> Result<Array2<f64>> {
    let corrupt = |offset: usize, reason: &str| Error::Corrupt {
        what: "pgm",
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'2' | b'5') {
        return Err(corrupt(0, "not a P2/P5 PGM file"));
    }
    let binary = bytes[1] == b'5';
    let mut pos = 2;

    // Header tokens are separated by whitespace; '#' starts a comment.
    let next_token = |pos: &mut usize| -> Result<(usize, u64)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        let mut v: u64 = 0;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(bytes[*pos] - b'0')))
                .ok_or_else(|| corrupt(start, "number too large"))?;
            *pos += 1;
        }
        if *pos == start {
            return Err(corrupt(start, "expected a decimal number"));
        }
        Ok((start, v))
    };

    let (wat, width) = next_token(&mut pos)?;
    let (hat, height) = next_token(&mut pos)?;
    let (mat, maxval) = next_token(&mut pos)?;
    if width == 0 || height == 0 {
        return Err(corrupt(if width == 0 { wat } else { hat }, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt(mat, "maxval must be in 1..=65535"));
    }
    let pixels = (width as usize)
        .checked_mul(height as usize)
        .filter(|&p| p <= MAX_PIXELS)
        .ok_or_else(|| corrupt(wat, "image too large"))?;
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::new();
    if binary {
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(corrupt(pos, "missing whitespace after header"));
        }
        pos += 1;
        let bpp = if maxval < 256 { 1 } else { 2 };
        let need = pixels * bpp;
        if bytes.len() - pos < need {
            return Err(corrupt(
                pos,
                &format!("raster needs {need} bytes, {} present", bytes.len() - pos),
            ));
        }
        if bytes.len() - pos > need {
            return Err(corrupt(pos + need, "trailing bytes after raster"));
        }
        data.reserve(pixels);
        for (i, px) in bytes[pos..].chunks_exact(bpp).enumerate() {
            let v = if bpp == 1 {
                u64::from(px[0])
            } else {
                u64::from(u16::from_be_bytes([px[0], px[1]]))
            };
            if v > maxval {
                return Err(corrupt(pos + i * bpp, "pixel exceeds maxval"));
            }
            data.push(v as f64 * scale);
        }
    } else {
        // Each ASCII sample needs at least two bytes; reject impossible
        // sizes before allocating.
        if (bytes.len() - pos) / 2 + 1 < pixels {
            return Err(corrupt(pos, "too few samples for the declared size"));
        }
        data.reserve(pixels);
        for _ in 0..pixels {
            let (at, v) = next_token(&mut pos)?;
            if v > maxval {
                return Err(corrupt(at, "pixel exceeds maxval"));
            }
            data.push(v as f64 * scale);
        }
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos != bytes.len() {
            return Err(corrupt(pos, "trailing data after raster"));
        }
    }
    Array2::from_shape_vec((height as usize, width as usize), data)
        .map_err(|e| corrupt(0, &e.to_string()))
}

/// Encodes an image with values in `[0, 1]` as 16-bit binary PGM.
pub fn encode_pgm(img: &Array2<f64>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in img.iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn array_blob_round_trip() {
        let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 100 + j * 10 + k) as f64 * 0.1 - 3.0);
        let bytes = encode_array(&a.view().into_dyn());
        assert_eq!(decode_array(&bytes).unwrap(), a.into_dyn());
        // A transposed (non-contiguous) view is written in logical order.
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let t = decode_array(&encode_array(&m.t().into_dyn())).unwrap();
        assert_eq!(t, array![[1.0, 3.0], [2.0, 4.0]].into_dyn());
    }

    #[test]
    fn array_blob_corruption() {
        let bytes = encode_array(&array![1.0, 2.0].into_dyn().view());
        assert!(matches!(decode_array(&bytes[..5]), Err(Error::Corrupt { offset: 0, .. })));
        assert!(matches!(decode_array(&bytes[..bytes.len() - 1]), Err(Error::Corrupt { .. })));
        let mut b = bytes.clone();
        b.extend_from_slice(&[0; 8]);
        assert!(decode_array(&b).is_err());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let m = Manifest {
            format_version: MANIFEST_VERSION,
            synthetic: Some(SyntheticSection {
                spec: SyntheticSpec { k: 16, s: 3, rho: 2, count: 5, seed: 1 },
                n: 8,
                dictionary_seed: 2,
            }),
            arrays: vec![ArrayEntry { name: "alpha".into(), file: "alpha.bin".into(), shape: vec![16, 5] }],
            pairs: vec![ImagePairEntry {
                name: "a".into(),
                target: "a_t.pgm".into(),
                side: "a_s.pgm".into(),
                split: Split::Test,
            }],
        };
        let text = m.to_toml().unwrap();
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(Manifest::parse(&text.replace("format_version = 1", "format_version = 2")).is_err());
        assert!(Manifest::parse(&text.replace("alpha.bin", "../alpha.bin")).is_err());
        assert!(Manifest::parse(&text.replace("rho = 2", "rho = 4")).is_err());
        assert!(Manifest::parse("format_version = 1\nbogus = 3\n").is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let m = Manifest { format_version: 1, synthetic: None, arrays: vec![], pairs: vec![] };
        DatasetDir::create(dir.path(), m, &[("x", a.view().into_dyn())]).unwrap();
        let d = DatasetDir::open(dir.path()).unwrap();
        assert_eq!(d.load_matrix("x").unwrap(), a);
        assert!(d.load_array("y").is_err());
    }

    #[test]
    fn pgm_ascii_and_binary() {
        let p2 = b"P2\n# comment\n3 2\n4\n0 1 2\n3 4 0\n";
        let img = decode_pgm(p2).unwrap();
        assert_eq!(img, array![[0.0, 0.25, 0.5], [0.75, 1.0, 0.0]]);
        let mut p5 = b"P5 2 1 255\n".to_vec();
        p5.extend_from_slice(&[0, 255]);
        assert_eq!(decode_pgm(&p5).unwrap(), array![[0.0, 1.0]]);
        let img = array![[0.0, 0.5], [1.0, 0.123456]];
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert!(back.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() <= 0.5 / 65535.0 + 1e-15));
    }

    #[test]
    fn pgm_rejects_malformed_input() {
        assert!(matches!(decode_pgm(b"P6 1 1 255\n\0"), Err(Error::Corrupt { offset: 0, .. })));
        assert!(decode_pgm(b"P2 2 2 3\n0 1 2").is_err());
        assert!(decode_pgm(b"P2 1 1 3\n4").is_err());
        assert!(decode_pgm(b"P5 2 2 255\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5 99999999 99999999 255\n").is_err());
        assert!(decode_pgm(b"P2 0 1 3\n").is_err());
        assert!(decode_pgm(b"P2 1 1 70000\n1").is_err());
    }
}
