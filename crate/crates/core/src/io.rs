//! On-disk formats.
//!
//! * KSET: a one-line JSON header terminated by `\n`, then little-endian
//!   `f32` samples, interleaved `(re, im)`, coil-major, row-major per coil.
//! * IMG: little-endian `f32` row-major pixels in `<stem>.img` with a JSON
//!   sidecar `<stem>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scan::ScanType;
use crate::sim::{KSpaceVolume, MagnitudeImage};

pub const KSET_MAGIC: &str = "KSET1";

/// Writes through a temporary sibling and renames it into place, so readers
/// see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn f32_le(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn parse_f32_le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect()
}

/// Rounds every pixel to `f32`, the precision images are stored at.
pub fn quantize(img: &MagnitudeImage) -> MagnitudeImage {
    let mut out = img.clone();
    out.pixels.mapv_inplace(|v| v as f32 as f64);
    out
}

#[derive(Serialize, Deserialize)]
struct KsetHeader {
    magic: String,
    height: usize,
    width: usize,
    n_coils: usize,
    etl: usize,
    acquisition_order: Vec<(usize, usize)>,
    scan_type: ScanType,
}

pub fn kset_to_bytes(k: &KSpaceVolume) -> Vec<u8> {
    let (height, width) = k.dim();
    let header = KsetHeader {
        magic: KSET_MAGIC.into(),
        height,
        width,
        n_coils: k.n_coils(),
        etl: k.echo_train_length,
        acquisition_order: k.acquisition_order.clone(),
        scan_type: k.scan_type.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(f32_le(
        k.coils.iter().flat_map(|c| c.iter()).flat_map(|v| [v.re, v.im]),
    ));
    out
}

pub fn kset_from_bytes(bytes: &[u8], origin: &Path) -> Result<KSpaceVolume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(origin, "missing header line"))?;
    let header: KsetHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
    if header.magic != KSET_MAGIC {
        return Err(Error::format(origin, format!("magic {:?} is not {KSET_MAGIC}", header.magic)));
    }
    let per_coil = header.height * header.width;
    let body = &bytes[nl + 1..];
    if body.len() != 8 * per_coil * header.n_coils {
        return Err(Error::format(
            origin,
            format!("expected {} sample bytes, found {}", 8 * per_coil * header.n_coils, body.len()),
        ));
    }
    let values = parse_f32_le(body);
    let coils = values
        .chunks_exact(2 * per_coil)
        .map(|c| {
            Array2::from_shape_fn((header.height, header.width), |(r, col)| {
                let i = 2 * (r * header.width + col);
                Complex64::new(c[i], c[i + 1])
            })
        })
        .collect();
    KSpaceVolume::new(coils, header.acquisition_order, header.etl, header.scan_type)
        .map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_kset(path: &Path, k: &KSpaceVolume) -> Result<()> {
    write_atomic(path, &kset_to_bytes(k))
}

pub fn read_kset(path: &Path) -> Result<KSpaceVolume> {
    kset_from_bytes(&read(path)?, path)
}

/// How an image came to be.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Noise { target_snr_db: f64 },
    Motion { positions: usize },
    Imported { source: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub slice_id: String,
    pub scan_type: ScanType,
    pub version: usize,
    pub provenance: Provenance,
    pub height: usize,
    pub width: usize,
}

fn sidecar_path(img_path: &Path) -> PathBuf {
    img_path.with_extension("json")
}

/// Writes `<stem>.img` and `<stem>.json`.
pub fn write_image(path: &Path, img: &MagnitudeImage, provenance: Provenance) -> Result<()> {
    let (height, width) = img.dim();
    let side = ImageSidecar {
        slice_id: img.slice_id.clone(),
        scan_type: img.scan_type.clone(),
        version: img.version,
        provenance,
        height,
        width,
    };
    write_atomic(path, &f32_le(img.pixels.iter().copied()))?;
    let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_image(path: &Path) -> Result<(MagnitudeImage, ImageSidecar)> {
    let side_path = sidecar_path(path);
    let side: ImageSidecar = serde_json::from_slice(&read(&side_path)?)
        .map_err(|e| Error::format(&side_path, e.to_string()))?;
    let bytes = read(path)?;
    if bytes.len() != 4 * side.height * side.width {
        return Err(Error::format(
            path,
            format!("{} bytes for a {}x{} image", bytes.len(), side.height, side.width),
        ));
    }
    let pixels = Array2::from_shape_vec((side.height, side.width), parse_f32_le(&bytes))
        .expect("length checked");
    let img = MagnitudeImage::new(pixels, side.scan_type.clone())
        .map_err(|e| Error::format(path, e.to_string()))?
        .with_id(&side.slice_id, side.version);
    Ok((img, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{forward_kspace, generate_phantom, recon_sos, synth_coil_maps};

    fn volume() -> KSpaceVolume {
        let st: ScanType = "knee-fs".parse().unwrap();
        let p = generate_phantom(1, 32, &st).unwrap();
        forward_kspace(&p, &synth_coil_maps(32, 3, 2).unwrap(), 4).unwrap()
    }

    #[test]
    fn kset_round_trip() {
        let k = volume();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.kset");
        write_kset(&path, &k).unwrap();
        let back = read_kset(&path).unwrap();
        assert_eq!(back.acquisition_order, k.acquisition_order);
        assert_eq!(back.scan_type, k.scan_type);
        assert_eq!(back.echo_train_length, 4);
        for (a, b) in back.coils.iter().zip(&k.coils) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).norm() <= 1e-6 * y.norm().max(1e-3));
            }
        }
        assert_eq!(kset_to_bytes(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn kset_rejects_bad_files() {
        let p = Path::new("x.kset");
        assert!(kset_from_bytes(b"no newline", p).is_err());
        let mut bytes = kset_to_bytes(&volume());
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(kset_from_bytes(&bytes, p), Err(Error::Format { .. })));
        let bytes = kset_to_bytes(&volume());
        let text = String::from_utf8_lossy(&bytes[..20]).replace("KSET1", "KSET9");
        let mut swapped = text.into_bytes();
        swapped.extend_from_slice(&bytes[20..]);
        assert!(kset_from_bytes(&swapped, p).is_err());
    }

    #[test]
    fn image_round_trip() {
        let img = quantize(&recon_sos(&volume()).with_id("s1", 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/s1_v3.img");
        write_image(&path, &img, Provenance::Noise { target_snr_db: 21.0 }).unwrap();
        let (back, side) = read_image(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(side.provenance, Provenance::Noise { target_snr_db: 21.0 });
        assert_eq!((side.version, side.slice_id.as_str()), (3, "s1"));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_image(Path::new("/nonexistent/x.img")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.json"));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
