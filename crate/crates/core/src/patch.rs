//! Per-class patch extraction from predicted class maps.
//!
//! A patch is the RGB content inside the tight bounding box of one maximal
//! connected region of pixels that the segmentation model assigned to a
//! single class. Regions are found with a two-pass union-find labeling.

use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, sha256_hex};
use crate::error::{Error, Result};
use crate::oracle::image_content_hash;

/// Class index reserved for "no label" pixels; never a region class.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticClass {
    pub index: u8,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_name: Option<String>,
}

impl SemanticClass {
    pub fn new(index: u8, name: impl Into<String>) -> Self {
        SemanticClass {
            index,
            name: name.into(),
            prompt_name: None,
        }
    }

    /// Text used when the class is named in oracle queries.
    pub fn prompt_name(&self) -> &str {
        self.prompt_name.as_deref().unwrap_or(&self.name)
    }

    pub fn validate(&self, num_classes: u16) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("class name must be nonempty".into()));
        }
        if self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!(
                "class name {:?} cannot be used as a directory name",
                self.name
            )));
        }
        if self.index == IGNORE_INDEX || u16::from(self.index) >= num_classes {
            return Err(Error::Config(format!(
                "class {} has index {} outside the class table of {num_classes}",
                self.name, self.index
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}


/// Row-major grid of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidClassMap {
                image_id: String::new(),
                reason: format!(
                    "data length {} does not match {width}x{height}",
                    data.len()
                ),
            });
        }
        Ok(ClassMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        ClassMap {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    /// Loads a single-channel 8-bit PNG of class indices.
    pub fn load_png(path: &Path, image_id: &str) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::InvalidClassMap {
            image_id: image_id.to_string(),
            reason: format!("{}: {e}", path.display()),
        })?;
        match img {
            DynamicImage::ImageLuma8(buf) => {
                let (width, height) = buf.dimensions();
                Ok(ClassMap {
                    width,
                    height,
                    data: buf.into_raw(),
                })
            }
            other => Err(Error::InvalidClassMap {
                image_id: image_id.to_string(),
                reason: format!(
                    "{}: expected 8-bit single-channel PNG, got {:?}",
                    path.display(),
                    other.color()
                ),
            }),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width, self.height, self.data.clone())
            .expect("length checked at construction");
        let mut bytes = Vec::new();
        buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        artifact::write_atomic(path, &bytes)
    }

    /// Every cell must be a valid class index or the ignore value.
    pub fn validate(&self, num_classes: u16, image_id: &str) -> Result<()> {
        if let Some(bad) = self
            .data
            .iter()
            .find(|&&v| v != IGNORE_INDEX && u16::from(v) >= num_classes)
        {
            return Err(Error::InvalidClassMap {
                image_id: image_id.to_string(),
                reason: format!("cell value {bad} outside class table of {num_classes}"),
            });
        }
        Ok(())
    }
}

/// Half-open pixel rectangle: `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    fn sort_key(&self) -> (u32, u32, u32, u32) {
        (self.y0, self.x0, self.x1, self.y1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub bbox: BoundingBox,
    pub area: u64,
    /// Raster index of the region's first cell; final tie-break for ordering.
    pub first_cell: usize,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Maximal connected components of cells equal to `class.index`, sorted by
/// `(y0, x0, x1, y1)`.
pub fn connected_regions(
    map: &ClassMap,
    class: &SemanticClass,
    connectivity: Connectivity,
) -> Vec<Region> {
    let target = class.index;
    if target == IGNORE_INDEX {
        return Vec::new();
    }
    let (w, h) = (map.width as usize, map.height as usize);
    let mut labels = vec![0u32; w * h];
    // parent[0] is the "background" sentinel.
    let mut parent: Vec<u32> = vec![0];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if map.data[i] != target {
                continue;
            }
            let mut neigh = [0u32; 4];
            let mut n = 0;
            if x > 0 && labels[i - 1] != 0 {
                neigh[n] = labels[i - 1];
                n += 1;
            }
            if y > 0 {
                let up = i - w;
                if labels[up] != 0 {
                    neigh[n] = labels[up];
                    n += 1;
                }
                if connectivity == Connectivity::Eight {
                    if x > 0 && labels[up - 1] != 0 {
                        neigh[n] = labels[up - 1];
                        n += 1;
                    }
                    if x + 1 < w && labels[up + 1] != 0 {
                        neigh[n] = labels[up + 1];
                        n += 1;
                    }
                }
            }
            if n == 0 {
                let id = parent.len() as u32;
                parent.push(id);
                labels[i] = id;
            } else {
                let first = neigh[0];
                labels[i] = first;
                for &other in &neigh[1..n] {
                    union(&mut parent, first, other);
                }
            }
        }
    }

    // Second pass: accumulate per-root statistics.
    let mut stats: Vec<Option<Region>> = vec![None; parent.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if labels[i] == 0 {
                continue;
            }
            let root = find(&mut parent, labels[i]) as usize;
            let (xu, yu) = (x as u32, y as u32);
            match &mut stats[root] {
                Some(r) => {
                    r.area += 1;
                    r.bbox.x0 = r.bbox.x0.min(xu);
                    r.bbox.x1 = r.bbox.x1.max(xu + 1);
                    r.bbox.y1 = r.bbox.y1.max(yu + 1);
                }
                slot @ None => {
                    *slot = Some(Region {
                        bbox: BoundingBox {
                            x0: xu,
                            y0: yu,
                            x1: xu + 1,
                            y1: yu + 1,
                        },
                        area: 1,
                        first_cell: i,
                    });
                }
            }
        }
    }

    let mut regions: Vec<Region> = stats.into_iter().flatten().collect();
    regions.sort_by_key(|r| (r.bbox.sort_key(), r.first_cell));
    regions
}

/// Content address of a patch: hex SHA-256 of `image_id|class|x0,y0,x1,y1`.
pub fn patch_id(image_id: &str, class_index: u8, bbox: &BoundingBox) -> String {
    sha256_hex(
        format!(
            "{image_id}|{class_index}|{},{},{},{}",
            bbox.x0, bbox.y0, bbox.x1, bbox.y1
        )
        .as_bytes(),
    )
}

fn empty_crop() -> RgbImage {
    RgbImage::new(0, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub patch_id: String,
    pub image_id: String,
    pub class: SemanticClass,
    pub bbox: BoundingBox,
    /// Number of region pixels, not the bbox area.
    pub region_area: u64,
    /// Content hash of the raw RGB crop; also the oracle cache subject.
    pub crop_sha256: String,
    #[serde(skip, default = "empty_crop")]
    pub crop: RgbImage,
}

impl Patch {
    pub fn crop_file_name(&self) -> String {
        format!("{}.png", self.patch_id)
    }

    pub fn crop_png(&self) -> Vec<u8> {
        encode_png(&self.crop)
    }
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    bytes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub pred_map_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_map_path: Option<PathBuf>,
}

/// Reads a JSON-lines manifest. Relative paths are resolved against the
/// manifest's own directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |reason: String| Error::CorruptManifest {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let mut entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        if entry.image_id.is_empty() {
            return Err(corrupt("empty image_id".into()));
        }
        if !seen.insert(entry.image_id.clone()) {
            return Err(corrupt(format!("duplicate image_id {}", entry.image_id)));
        }
        entry.image_path = base.join(&entry.image_path);
        entry.pred_map_path = base.join(&entry.pred_map_path);
        entry.gt_map_path = entry.gt_map_path.map(|p| base.join(p));
        entries.push(entry);
    }
    Ok(entries)
}

#[derive(Clone, Debug)]
pub struct SegmentationRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub pred_map: ClassMap,
    pub gt_map: Option<ClassMap>,
}

impl SegmentationRecord {
    /// Loads the class maps of a manifest entry. The RGB image itself is
    /// read lazily by [`extract_patches`].
    pub fn load(entry: &ManifestEntry, num_classes: u16, with_gt: bool) -> Result<Self> {
        let pred_map = ClassMap::load_png(&entry.pred_map_path, &entry.image_id)?;
        pred_map.validate(num_classes, &entry.image_id)?;
        let gt_map = match (&entry.gt_map_path, with_gt) {
            (Some(p), true) => {
                let gt = ClassMap::load_png(p, &entry.image_id)?;
                gt.validate(num_classes, &entry.image_id)?;
                if (gt.width, gt.height) != (pred_map.width, pred_map.height) {
                    return Err(Error::InvalidClassMap {
                        image_id: entry.image_id.clone(),
                        reason: "ground-truth map dimensions differ from prediction".into(),
                    });
                }
                Some(gt)
            }
            _ => None,
        };
        Ok(SegmentationRecord {
            image_id: entry.image_id.clone(),
            image_path: entry.image_path.clone(),
            pred_map,
            gt_map,
        })
    }

    pub fn load_image(&self) -> Result<RgbImage> {
        let img = image::open(&self.image_path).map_err(|e| Error::ImageLoad {
            image_id: self.image_id.clone(),
            reason: format!("{}: {e}", self.image_path.display()),
        })?;
        let rgb = img.to_rgb8();
        if rgb.dimensions() != (self.pred_map.width, self.pred_map.height) {
            return Err(Error::ImageLoad {
                image_id: self.image_id.clone(),
                reason: format!(
                    "image is {}x{} but class map is {}x{}",
                    rgb.width(),
                    rgb.height(),
                    self.pred_map.width,
                    self.pred_map.height
                ),
            });
        }
        Ok(rgb)
    }
}

pub fn crop(image: &RgbImage, bbox: &BoundingBox) -> RgbImage {
    image::imageops::crop_imm(image, bbox.x0, bbox.y0, bbox.width(), bbox.height()).to_image()
}

/// Patches of one record for `class` whose bbox is at least `min_size` in
/// both dimensions, given an already loaded image.
pub fn extract_patches_from(
    record: &SegmentationRecord,
    image: &RgbImage,
    class: &SemanticClass,
    min_size: u32,
    connectivity: Connectivity,
) -> Vec<Patch> {
    connected_regions(&record.pred_map, class, connectivity)
        .into_iter()
        .filter(|r| r.bbox.width() >= min_size && r.bbox.height() >= min_size)
        .map(|r| {
            let crop = crop(image, &r.bbox);
            Patch {
                patch_id: patch_id(&record.image_id, class.index, &r.bbox),
                image_id: record.image_id.clone(),
                class: class.clone(),
                bbox: r.bbox,
                region_area: r.area,
                crop_sha256: image_content_hash(&crop),
                crop,
            }
        })
        .collect()
}

pub fn extract_patches(
    record: &SegmentationRecord,
    class: &SemanticClass,
    min_size: u32,
    connectivity: Connectivity,
) -> Result<Vec<Patch>> {
    let regions = connected_regions(&record.pred_map, class, connectivity);
    if !regions
        .iter()
        .any(|r| r.bbox.width() >= min_size && r.bbox.height() >= min_size)
    {
        return Ok(Vec::new());
    }
    let image = record.load_image()?;
    Ok(extract_patches_from(
        record,
        &image,
        class,
        min_size,
        connectivity,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub class: SemanticClass,
    /// Ascending by `patch_id`, no duplicates.
    pub patches: Vec<Patch>,
    pub source_manifest: PathBuf,
}

/// Per-class patch-set header stored next to `metadata.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PatchSetHeader {
    class: SemanticClass,
    count: usize,
    source_manifest: PathBuf,
}

pub fn build_patch_set(
    records: &[SegmentationRecord],
    source_manifest: &Path,
    class: &SemanticClass,
    min_size: u32,
    connectivity: Connectivity,
) -> Result<PatchSet> {
    if records.is_empty() {
        return Err(Error::RejectedEmptyManifest);
    }
    let per_record: Vec<Vec<Patch>> = records
        .par_iter()
        .map(|r| extract_patches(r, class, min_size, connectivity))
        .collect::<Result<_>>()?;
    let mut patches: Vec<Patch> = per_record.into_iter().flatten().collect();
    patches.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
    patches.dedup_by(|a, b| a.patch_id == b.patch_id);
    Ok(PatchSet {
        class: class.clone(),
        patches,
        source_manifest: source_manifest.to_path_buf(),
    })
}

impl PatchSet {
    pub fn dir(root: &Path, class: &SemanticClass) -> PathBuf {
        root.join("patches").join(&class.name)
    }

    pub fn metadata_path(root: &Path, class: &SemanticClass) -> PathBuf {
        Self::dir(root, class).join("metadata.jsonl")
    }

    /// Writes crops and metadata under `root/patches/<class>/`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = Self::dir(root, &self.class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.patches.par_iter().try_for_each(|p| {
            artifact::write_atomic(&dir.join(p.crop_file_name()), &p.crop_png())
        })?;
        artifact::write_json(
            &dir.join("patchset.json"),
            &PatchSetHeader {
                class: self.class.clone(),
                count: self.patches.len(),
                source_manifest: self.source_manifest.clone(),
            },
        )?;
        artifact::write_jsonl(&dir.join("metadata.jsonl"), &self.patches)
    }

    /// Reads a written patch set back, verifying each crop against its hash.
    pub fn read(root: &Path, class: &SemanticClass) -> Result<Self> {
        let dir = Self::dir(root, class);
        let header: PatchSetHeader = artifact::read_json(&dir.join("patchset.json"))?;
        let mut patches: Vec<Patch> = artifact::read_jsonl(&dir.join("metadata.jsonl"))?;
        patches.par_iter_mut().try_for_each(|p| -> Result<()> {
            let path = dir.join(p.crop_file_name());
            let img = image::open(&path).map_err(|e| Error::ImageLoad {
                image_id: p.image_id.clone(),
                reason: format!("{}: {e}", path.display()),
            })?;
            p.crop = img.to_rgb8();
            if image_content_hash(&p.crop) != p.crop_sha256 {
                return Err(Error::ImageLoad {
                    image_id: p.image_id.clone(),
                    reason: format!("{} does not match its recorded hash", path.display()),
                });
            }
            Ok(())
        })?;
        Ok(PatchSet {
            class: header.class,
            patches,
            source_manifest: header.source_manifest,
        })
    }

    pub fn get(&self, patch_id: &str) -> Option<&Patch> {
        self.patches
            .binary_search_by(|p| p.patch_id.as_str().cmp(patch_id))
            .ok()
            .map(|i| &self.patches[i])
    }
}
