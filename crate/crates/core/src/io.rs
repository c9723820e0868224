//! On-disk format shared by every stage: a `key: value` text header plus a
//! raw little-endian data file next to it.
//!
//! ```text
//! magic: RAYMAR-VOL-1
//! element_type: float32
//! byte_order: little-endian
//! dims: 128 128 128
//! spacing: 1 1 1
//! origin: -63.5 -63.5 -63.5
//! data_file: volume.raw
//! ```
//!
//! Sinograms use magic `RAYMAR-SINO-1` and carry the scanner geometry
//! (`sad`, `sdd`, `det_bins`, `det_size`, `n_views`, `angles`) instead of
//! the grid keys. Masks use the same two layouts with `element_type: uint8`
//! and one 0/1 byte per element. Values are stored as 32-bit floats; header
//! numbers are written in shortest round-trip form so re-reading is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, MetalShadowMask, Sinogram};
use crate::volume::{BinaryMask3D, Grid, Volume3D};

pub const VOLUME_MAGIC: &str = "RAYMAR-VOL-1";
pub const SINOGRAM_MAGIC: &str = "RAYMAR-SINO-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Element {
    Float32,
    Uint8,
}

impl Element {
    fn name(self) -> &'static str {
        match self {
            Element::Float32 => "float32",
            Element::Uint8 => "uint8",
        }
    }
}

struct Header {
    path: PathBuf,
    fields: BTreeMap<String, String>,
}

impl Header {
    fn read(path: &Path, kind: &'static str) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| Error::Format {
                kind,
                path: path.to_path_buf(),
                reason: format!("line without `key: value`: {line}"),
            })?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Header {
            path: path.to_path_buf(),
            fields,
        })
    }

    fn err(&self, kind: &'static str, reason: impl Into<String>) -> Error {
        Error::Format {
            kind,
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn get(&self, kind: &'static str, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| self.err(kind, format!("missing key `{key}`")))
    }

    fn numbers<T: std::str::FromStr>(&self, kind: &'static str, key: &str) -> Result<Vec<T>> {
        self.get(kind, key)?
            .split_whitespace()
            .map(|t| t.parse::<T>().map_err(|_| self.err(kind, format!("bad number `{t}` in `{key}`"))))
            .collect()
    }

    fn array<T: std::str::FromStr + Copy, const N: usize>(&self, kind: &'static str, key: &str) -> Result<[T; N]> {
        let v = self.numbers::<T>(kind, key)?;
        v.try_into()
            .map_err(|_| self.err(kind, format!("`{key}` needs {N} values")))
    }

    fn expect(&self, kind: &'static str, magic: &str) -> Result<Element> {
        let m = self.get(kind, "magic")?;
        if m != magic {
            return Err(self.err(kind, format!("magic `{m}`, expected `{magic}`")));
        }
        let order = self.get(kind, "byte_order")?;
        if order != "little-endian" {
            return Err(self.err(kind, format!("unsupported byte order `{order}`")));
        }
        match self.get(kind, "element_type")? {
            "float32" => Ok(Element::Float32),
            "uint8" => Ok(Element::Uint8),
            other => Err(self.err(kind, format!("unsupported element type `{other}`"))),
        }
    }

    fn data_path(&self, kind: &'static str) -> Result<PathBuf> {
        let name = self.get(kind, "data_file")?;
        Ok(self.path.parent().unwrap_or(Path::new(".")).join(name))
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn write_header(path: &Path, magic: &str, elem: Element, body: &str) -> Result<PathBuf> {
    let raw = raw_path(path);
    let name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad output path {}", path.display())))?
        .to_string();
    let mut text = String::new();
    writeln!(text, "magic: {magic}").unwrap();
    writeln!(text, "element_type: {}", elem.name()).unwrap();
    writeln!(text, "byte_order: little-endian").unwrap();
    text.push_str(body);
    writeln!(text, "data_file: {name}").unwrap();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(raw)
}

fn grid_body(g: &Grid) -> String {
    format!(
        "dims: {}\nspacing: {}\norigin: {}\n",
        join(&g.dims),
        join(&g.spacing),
        join(&g.origin)
    )
}

fn geometry_body(g: &ConeBeamGeometry) -> String {
    format!(
        "sad: {}\nsdd: {}\ndet_bins: {}\ndet_size: {}\nn_views: {}\nangles: {}\n",
        g.sad,
        g.sdd,
        join(&g.det_bins),
        join(&g.det_size),
        g.n_views(),
        join(&g.angles)
    )
}

fn encode_f32(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn read_payload(h: &Header, kind: &'static str, elem: Element, count: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(h.data_path(kind)?)?;
    let need = count * if elem == Element::Float32 { 4 } else { 1 };
    if bytes.len() != need {
        return Err(h.err(kind, format!("data file has {} bytes, expected {need}", bytes.len())));
    }
    Ok(bytes)
}

fn read_grid(h: &Header) -> Result<Grid> {
    let kind = "volume";
    Grid::new(
        h.array(kind, "dims")?,
        h.array(kind, "spacing")?,
        h.array(kind, "origin")?,
    )
}

fn read_geometry(h: &Header) -> Result<ConeBeamGeometry> {
    let kind = "sinogram";
    let n_views: usize = h.get(kind, "n_views")?.parse().map_err(|_| h.err(kind, "bad n_views"))?;
    let angles = h.numbers::<f64>(kind, "angles")?;
    if angles.len() != n_views {
        return Err(h.err(kind, format!("{} angles for {n_views} views", angles.len())));
    }
    let g = ConeBeamGeometry {
        sad: h.get(kind, "sad")?.parse().map_err(|_| h.err(kind, "bad sad"))?,
        sdd: h.get(kind, "sdd")?.parse().map_err(|_| h.err(kind, "bad sdd"))?,
        det_bins: h.array(kind, "det_bins")?,
        det_size: h.array(kind, "det_size")?,
        angles,
    };
    g.validate()?;
    Ok(g)
}

pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    let raw = write_header(path, VOLUME_MAGIC, Element::Float32, &grid_body(vol.grid()))?;
    fs::write(raw, encode_f32(vol.data()))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let h = Header::read(path, "volume")?;
    if h.expect("volume", VOLUME_MAGIC)? != Element::Float32 {
        return Err(h.err("volume", "expected float32 volume"));
    }
    let grid = read_grid(&h)?;
    let bytes = read_payload(&h, "volume", Element::Float32, grid.len())?;
    Volume3D::new(grid, decode_f32(&bytes))
}

pub fn write_mask(path: &Path, mask: &BinaryMask3D) -> Result<()> {
    let raw = write_header(path, VOLUME_MAGIC, Element::Uint8, &grid_body(mask.grid()))?;
    fs::write(raw, mask.data().iter().map(|&b| b as u8).collect::<Vec<_>>())?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask3D> {
    let h = Header::read(path, "mask")?;
    if h.expect("mask", VOLUME_MAGIC)? != Element::Uint8 {
        return Err(h.err("mask", "expected uint8 mask"));
    }
    let grid = read_grid(&h)?;
    let bytes = read_payload(&h, "mask", Element::Uint8, grid.len())?;
    BinaryMask3D::new(grid, bytes.iter().map(|&b| b != 0).collect())
}

/// Small-integer label volume (material indices) in the uint8 layout.
pub fn write_labels(path: &Path, grid: &Grid, labels: &[u8]) -> Result<()> {
    if labels.len() != grid.len() {
        return Err(Error::ShapeMismatch("label count differs from grid".into()));
    }
    let raw = write_header(path, VOLUME_MAGIC, Element::Uint8, &grid_body(grid))?;
    fs::write(raw, labels)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(Grid, Vec<u8>)> {
    let h = Header::read(path, "labels")?;
    if h.expect("labels", VOLUME_MAGIC)? != Element::Uint8 {
        return Err(h.err("labels", "expected uint8 labels"));
    }
    let grid = read_grid(&h)?;
    let bytes = read_payload(&h, "labels", Element::Uint8, grid.len())?;
    Ok((grid, bytes))
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    let raw = write_header(path, SINOGRAM_MAGIC, Element::Float32, &geometry_body(sino.geometry()))?;
    fs::write(raw, encode_f32(sino.data()))?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let h = Header::read(path, "sinogram")?;
    if h.expect("sinogram", SINOGRAM_MAGIC)? != Element::Float32 {
        return Err(h.err("sinogram", "expected float32 sinogram"));
    }
    let geom = read_geometry(&h)?;
    let bytes = read_payload(&h, "sinogram", Element::Float32, geom.n_rays())?;
    Sinogram::new(geom, decode_f32(&bytes))
}

pub fn write_shadow(path: &Path, mask: &MetalShadowMask) -> Result<()> {
    let raw = write_header(path, SINOGRAM_MAGIC, Element::Uint8, &geometry_body(mask.geometry()))?;
    fs::write(raw, mask.data().iter().map(|&b| b as u8).collect::<Vec<_>>())?;
    Ok(())
}

pub fn read_shadow(path: &Path) -> Result<MetalShadowMask> {
    let h = Header::read(path, "shadow mask")?;
    if h.expect("shadow mask", SINOGRAM_MAGIC)? != Element::Uint8 {
        return Err(h.err("shadow mask", "expected uint8 shadow mask"));
    }
    let geom = read_geometry(&h)?;
    let bytes = read_payload(&h, "shadow mask", Element::Uint8, geom.n_rays())?;
    MetalShadowMask::new(geom, bytes.iter().map(|&b| b != 0).collect())
}
