//! Dataset scanning, slice decoding and preprocessing.
//!
//! Labeled layout: `root/{covid,non-covid}/<volume_id>/<slice files>`.
//! Prediction layout: `root/<volume_id>/<slice files>`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};
use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::diagnosis::Label;
use crate::tensor::Tensor;
use crate::xception::PAPER_INPUT_SIDE;

pub const COVID_DIR: &str = "covid";
pub const NON_COVID_DIR: &str = "non-covid";
pub const DEFAULT_BATCH_SIZE: usize = 128;
/// Typical slice-count range of a CT volume; counts outside it only warn.
pub const TYPICAL_SLICES: std::ops::RangeInclusive<usize> = 50..=700;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no volumes found under {0}")]
    NoVolumes(PathBuf),
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtVolume {
    pub volume_id: String,
    pub slice_paths: Vec<PathBuf>,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub volumes: Vec<CtVolume>,
}

impl DatasetManifest {
    /// `(covid, non_covid)` volume counts.
    pub fn class_counts(&self) -> (usize, usize) {
        self.volumes.iter().fold((0, 0), |(c, n), v| match v.label {
            Some(Label::Covid) => (c + 1, n),
            Some(Label::NonCovid) => (c, n + 1),
            None => (c, n),
        })
    }

    pub fn slice_count(&self) -> usize {
        self.volumes.iter().map(|v| v.slice_paths.len()).sum()
    }

    pub fn is_labeled(&self) -> bool {
        self.volumes.iter().all(|v| v.label.is_some())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_slice_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn scan_volumes(dir: &Path, label: Option<Label>, out: &mut Vec<CtVolume>) -> Result<()> {
    for vdir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let slices: Vec<PathBuf> = sorted_entries(&vdir)?
            .into_iter()
            .filter(|p| is_slice_file(p))
            .collect();
        let volume_id = vdir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if slices.is_empty() {
            warn!("skipping empty volume directory {}", vdir.display());
            continue;
        }
        if !TYPICAL_SLICES.contains(&slices.len()) {
            warn!(
                "volume {volume_id} has {} slices, outside the typical {}..={} range",
                slices.len(),
                TYPICAL_SLICES.start(),
                TYPICAL_SLICES.end()
            );
        }
        out.push(CtVolume {
            volume_id,
            slice_paths: slices,
            label,
        });
    }
    Ok(())
}

fn split_name(root: &Path) -> String {
    root.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string())
}

/// Scans the labeled layout. Volumes are ordered by class directory
/// (`covid` first), then lexicographically by id; slices lexicographically.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    fs::read_dir(root).map_err(io_err(root))?;
    let mut volumes = Vec::new();
    for (dir, label) in [(COVID_DIR, Label::Covid), (NON_COVID_DIR, Label::NonCovid)] {
        let d = root.join(dir);
        if d.is_dir() {
            scan_volumes(&d, Some(label), &mut volumes)?;
        } else {
            warn!("{} has no `{dir}` directory", root.display());
        }
    }
    Ok(DatasetManifest {
        split: split_name(root),
        volumes,
    })
}

/// Scans for prediction: uses the labeled layout when `covid/` or
/// `non-covid/` exists, otherwise treats each subdirectory as an unlabeled
/// volume.
pub fn scan_for_prediction(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if root.join(COVID_DIR).is_dir() || root.join(NON_COVID_DIR).is_dir() {
        return scan_dataset(root);
    }
    let mut volumes = Vec::new();
    scan_volumes(root, None, &mut volumes)?;
    Ok(DatasetManifest {
        split: split_name(root),
        volumes,
    })
}

/// Bilinear resize with half-pixel-centred sampling and edge clamping,
/// on raw 0..=255 intensities.
fn resize_bilinear(img: &GrayImage, side: usize) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.as_raw();
    let sx = w as f32 / side as f32;
    let sy = h as f32 / side as f32;
    let axis = |o: usize, scale: f32, len: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f32)
    };
    let cols: Vec<_> = (0..side).map(|x| axis(x, sx, w)).collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (y0, y1, fy) = axis(y, sy, h);
        for &(x0, x1, fx) in &cols {
            let p = |yy: usize, xx: usize| px[yy * w + xx] as f32;
            let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
            let bottom = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
            out.push(top + fy * (bottom - top));
        }
    }
    out
}

/// Resizes to `side × side`, maps intensity `p` to `p/127.5 − 1` and
/// replicates the single channel three times.
pub fn preprocess_slice_to(image: &GrayImage, side: usize) -> Tensor {
    let plane = resize_bilinear(image, side);
    let mut data = Vec::with_capacity(side * side * 3);
    for v in plane {
        let x = (v / 127.5 - 1.0).clamp(-1.0, 1.0);
        data.extend_from_slice(&[x, x, x]);
    }
    Tensor::new(vec![side, side, 3], data).expect("consistent shape")
}

pub fn preprocess_slice(image: &GrayImage) -> Tensor {
    preprocess_slice_to(image, PAPER_INPUT_SIDE)
}

/// Decodes a PNG or JPEG slice to 8-bit grayscale. Colour images are
/// converted with standard luma weights.
pub fn decode_slice(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes).map_err(|source| IngestError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            if other.color().has_color() {
                warn!("{} is not grayscale; converting to luma", path.display());
            }
            other.to_luma8()
        }
    })
}

pub fn load_slice(path: &Path, side: usize) -> Result<Tensor> {
    Ok(preprocess_slice_to(&decode_slice(path)?, side))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    /// `N × side × side × 3`.
    pub tensor: Tensor,
    /// `(volume_id, slice index)` of each row.
    pub provenance: Vec<(String, usize)>,
}

/// Streams preprocessed slices in (volume, slice) order. Slices within a
/// batch are decoded in parallel; order is unaffected.
pub struct BatchIter<'a> {
    items: Vec<(&'a str, usize, &'a Path)>,
    pos: usize,
    batch_size: usize,
    side: usize,
    failed: bool,
}

pub fn batch_iter(volumes: &[CtVolume], batch_size: usize, side: usize) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(IngestError::ZeroBatch);
    }
    let items = volumes
        .iter()
        .flat_map(|v| {
            v.slice_paths
                .iter()
                .enumerate()
                .map(move |(i, p)| (v.volume_id.as_str(), i, p.as_path()))
        })
        .collect();
    Ok(BatchIter {
        items,
        pos: 0,
        batch_size,
        side,
        failed: false,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Result<SliceBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.pos >= self.items.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.items.len());
        let chunk = &self.items[self.pos..end];
        self.pos = end;
        let side = self.side;
        let decoded = chunk
            .par_iter()
            .map(|(_, _, p)| load_slice(p, side))
            .collect::<Result<Vec<_>>>();
        let tensors = match decoded {
            Ok(t) => t,
            Err(e) => {
                self.failed = true;
                return Some(Err(e));
            }
        };
        let mut data = Vec::with_capacity(tensors.len() * side * side * 3);
        for t in tensors {
            data.extend_from_slice(t.data());
        }
        let tensor = Tensor::new(vec![chunk.len(), side, side, 3], data).expect("consistent shape");
        let provenance = chunk.iter().map(|(v, i, _)| (v.to_string(), *i)).collect();
        Some(Ok(SliceBatch { tensor, provenance }))
    }
}

/// Up to `max` slices for statistics calibration: the middle slice of each
/// volume in manifest order, then further slices round-robin.
pub fn probe_batch(volumes: &[CtVolume], max: usize, side: usize) -> Result<Tensor> {
    let mut picks: Vec<&Path> = Vec::new();
    let longest = volumes.iter().map(|v| v.slice_paths.len()).max().unwrap_or(0);
    'outer: for round in 0..longest {
        for v in volumes {
            let n = v.slice_paths.len();
            if round < n {
                picks.push(&v.slice_paths[(n / 2 + round) % n]);
                if picks.len() == max {
                    break 'outer;
                }
            }
        }
    }
    if picks.is_empty() {
        return Err(IngestError::NoVolumes(PathBuf::from("<probe>")));
    }
    let tensors = picks.par_iter().map(|p| load_slice(p, side)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat_rows(
        &tensors
            .into_iter()
            .map(|t| t.reshape(vec![1, side, side, 3]))
            .collect::<std::result::Result<Vec<_>, _>>()
            .expect("slice tensors are side×side×3"),
    )
    .expect("equal shapes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn write_png(path: &Path, side: u32, value: u8) {
        GrayImage::from_pixel(side, side, Luma([value])).save(path).unwrap();
    }

    fn fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (class, vols) in [("covid", &["p2", "p1"][..]), ("non-covid", &["q1"][..])] {
            for v in vols {
                let vd = dir.path().join(class).join(v);
                fs::create_dir_all(&vd).unwrap();
                for s in ["s2.png", "s0.png", "s1.png"] {
                    write_png(&vd.join(s), 8, 100);
                }
            }
        }
        fs::create_dir_all(dir.path().join("covid/empty")).unwrap();
        dir
    }

    #[test]
    fn scan_counts_and_order() {
        let dir = fixture();
        let m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.class_counts(), (2, 1));
        let ids: Vec<_> = m.volumes.iter().map(|v| v.volume_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2", "q1"]);
        for v in &m.volumes {
            assert_eq!(v.slice_paths.len(), 3);
            let names: Vec<_> = v.slice_paths.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
            assert_eq!(names, ["s0.png", "s1.png", "s2.png"]);
        }
        assert_eq!(scan_dataset(dir.path()).unwrap(), m);
        assert!(m.is_labeled());
    }

    #[test]
    fn unreadable_root_is_an_error() {
        assert!(matches!(scan_dataset("/definitely/not/here"), Err(IngestError::Io { .. })));
    }

    #[test]
    fn prediction_layout() {
        let dir = tempfile::tempdir().unwrap();
        let vd = dir.path().join("vol-a");
        fs::create_dir_all(&vd).unwrap();
        write_png(&vd.join("0.png"), 4, 0);
        let m = scan_for_prediction(dir.path()).unwrap();
        assert_eq!(m.volumes.len(), 1);
        assert_eq!(m.volumes[0].label, None);
        let labeled = fixture();
        assert!(scan_for_prediction(labeled.path()).unwrap().is_labeled());
    }

    #[test]
    fn preprocess_endpoints() {
        for (v, expected) in [(0u8, -1.0f32), (255, 1.0), (128, 0.003_921_6)] {
            let img = GrayImage::from_pixel(512, 512, Luma([v]));
            let t = preprocess_slice(&img);
            assert_eq!(t.shape(), &[224, 224, 3]);
            for px in t.data().chunks(3) {
                assert!((px[0] - expected).abs() < 1e-6, "{v}: {}", px[0]);
                assert_eq!(px[0], px[1]);
                assert_eq!(px[1], px[2]);
            }
        }
    }

    #[test]
    fn all_gray_levels_map_into_range() {
        for v in 0..=255u8 {
            let t = preprocess_slice_to(&GrayImage::from_pixel(1, 1, Luma([v])), 4);
            assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn constant_224_is_fixed_point() {
        let img = GrayImage::from_pixel(224, 224, Luma([77]));
        let t = preprocess_slice(&img);
        assert!(t.data().iter().all(|&x| x == 77.0 / 127.5 - 1.0));
    }

    #[test]
    fn resize_preserves_gradient_monotonicity() {
        let img = GrayImage::from_fn(512, 512, |x, _| Luma([(x / 2) as u8]));
        let t = preprocess_slice(&img);
        let row: Vec<f32> = t.data()[..224 * 3].chunks(3).map(|p| p[0]).collect();
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn batches_follow_manifest_order() {
        let dir = fixture();
        let m = scan_dataset(dir.path()).unwrap();
        let batches: Vec<_> = batch_iter(&m.volumes, 2, 16).unwrap().map(Result::unwrap).collect();
        assert_eq!(batches.iter().map(|b| b.provenance.len()).collect::<Vec<_>>(), [2, 2, 2, 2, 1]);
        let prov: Vec<_> = batches.into_iter().flat_map(|b| b.provenance).collect();
        let expected: Vec<_> = m
            .volumes
            .iter()
            .flat_map(|v| (0..3).map(move |i| (v.volume_id.clone(), i)))
            .collect();
        assert_eq!(prov, expected);
        assert!(batch_iter(&m.volumes, 0, 16).is_err());
    }

    #[test]
    fn undecodable_slice_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let vd = dir.path().join("covid/v");
        fs::create_dir_all(&vd).unwrap();
        fs::write(vd.join("bad.png"), b"not an image").unwrap();
        let m = scan_dataset(dir.path()).unwrap();
        let mut it = batch_iter(&m.volumes, 4, 8).unwrap();
        let err = it.next().unwrap().unwrap_err();
        assert!(err.to_string().contains("bad.png"));
        assert!(it.next().is_none());
    }
}
