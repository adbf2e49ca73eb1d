//! On-disk dataset layout.
//!
//! ```text
//! <root>/images/<id>.<pgm|png>
//! <root>/annotations/<id>.<csv|xml>
//! <root>/metadata.csv   id,original_name,marker,magnification,width,height,count
//! ```
//!
//! Source directories for ingest follow the same pairing rule, with
//! `metadata.csv` optional and only `id`, `original_name`, `marker` and
//! `magnification` consulted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::annotations::{
    parse_cellcounter_xml, parse_csv, write_csv, AnnotationError, AnnotationSet, CandidatePair, DatasetManifest,
    ImageEntry, Magnification, Marker,
};
use crate::error::{Error, Result};
use crate::imaging::{encode_pgm, image_dimensions, read_image, GaussianKernel, GrayImage};
use crate::model::ModelConfig;
use crate::synthgen::SyntheticScene;
use crate::training::{prepare_sample, Sample};

pub const METADATA_FILE: &str = "metadata.csv";
pub const METADATA_HEADER: [&str; 7] = [
    "id",
    "original_name",
    "marker",
    "magnification",
    "width",
    "height",
    "count",
];

const IMAGE_EXTENSIONS: [&str; 2] = ["pgm", "png"];
const ANNOTATION_EXTENSIONS: [&str; 2] = ["xml", "csv"];

/// One row of `metadata.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub original_name: String,
    pub marker: Marker,
    pub magnification: Magnification,
    pub width: u32,
    pub height: u32,
    pub count: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, row: usize, msg: impl ToString) -> Error {
    Error::Annotation(AnnotationError::Csv {
        row,
        msg: format!("{}: {}", path.display(), msg.to_string()),
    })
}

pub fn metadata_csv(records: &[DatasetRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METADATA_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.id.clone(),
            r.original_name.clone(),
            r.marker.to_string(),
            r.magnification.to_string(),
            r.width.to_string(),
            r.height.to_string(),
            r.count.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

/// Rows of a metadata file as column-name → value maps, with line numbers.
fn metadata_rows(path: &Path) -> Result<Vec<(usize, BTreeMap<String, String>)>> {
    let bytes = read(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(&bytes[..]);
    let headers = reader.headers().map_err(|e| csv_err(path, 1, e))?.clone();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, i + 2, e))?;
        let map = headers
            .iter()
            .zip(rec.iter())
            .map(|(h, v)| (h.to_string(), v.to_string()))
            .collect();
        rows.push((i + 2, map));
    }
    Ok(rows)
}

pub fn parse_metadata(path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (row, map) in metadata_rows(path)? {
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| csv_err(path, row, format!("missing column {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            let v = get(k)?;
            v.parse()
                .map_err(|_| csv_err(path, row, format!("bad {k} value {v:?}")))
        };
        out.push(DatasetRecord {
            id: get("id")?,
            original_name: get("original_name")?,
            marker: get("marker")?.parse()?,
            magnification: get("magnification")?.parse()?,
            width: num("width")? as u32,
            height: num("height")? as u32,
            count: num("count")? as usize,
        });
    }
    Ok(out)
}

/// Fallback labels for source images without a metadata row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceDefaults {
    pub marker: Marker,
    pub magnification: Magnification,
}

fn list_dir(dir: &Path, extensions: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
        if let (Some(ext), Some(stem)) = (ext, stem) {
            if extensions.contains(&ext.as_str()) && path.is_file() {
                out.push((stem, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Pairs `images/<key>.*` with `annotations/<key>.*` under `src`.
///
/// Read and parse failures are recorded on the candidate rather than
/// returned, so cleaning can report them.
pub fn scan_source(src: &Path, defaults: &SourceDefaults) -> Result<Vec<CandidatePair>> {
    if !src.is_dir() {
        return Err(Error::io(
            src,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let meta_path = src.join(METADATA_FILE);
    let mut labels: BTreeMap<String, (Option<String>, Option<String>, Option<String>)> = BTreeMap::new();
    if meta_path.is_file() {
        for (_, row) in metadata_rows(&meta_path)? {
            if let Some(id) = row.get("id") {
                labels.insert(
                    id.clone(),
                    (
                        row.get("original_name").cloned(),
                        row.get("marker").cloned(),
                        row.get("magnification").cloned(),
                    ),
                );
            }
        }
    }

    let mut pairs: BTreeMap<String, CandidatePair> = BTreeMap::new();
    let images = list_dir(&src.join("images"), &IMAGE_EXTENSIONS)?;
    let scanned: Vec<(String, PathBuf, std::result::Result<ImageEntry, String>)> = images
        .into_par_iter()
        .map(|(key, path)| {
            let entry = fs::read(&path).map_err(|e| e.to_string()).and_then(|bytes| {
                let (w, h) = image_dimensions(&bytes).map_err(|e| e.to_string())?;
                Ok(ImageEntry {
                    file_name: file_name(&path),
                    digest: Sha256::digest(&bytes).into(),
                    width: w as u32,
                    height: h as u32,
                })
            });
            (key, path, entry)
        })
        .collect();
    for (key, path, entry) in scanned {
        let pair = pairs.entry(key.clone()).or_insert_with(|| CandidatePair::new(key));
        if pair.image.is_some() {
            pair.load_error = Some(format!(
                "more than one image file for key, including {}",
                file_name(&path)
            ));
            continue;
        }
        match entry {
            Ok(e) => pair.image = Some(e),
            Err(msg) => pair.load_error = Some(format!("{}: {msg}", file_name(&path))),
        }
    }

    for (key, path) in list_dir(&src.join("annotations"), &ANNOTATION_EXTENSIONS)? {
        let pair = pairs
            .entry(key.clone())
            .or_insert_with(|| CandidatePair::new(key.clone()));
        if pair.annotation_file.is_some() {
            pair.load_error = Some(format!(
                "more than one annotation file for key, including {}",
                file_name(&path)
            ));
            continue;
        }
        pair.annotation_file = Some(file_name(&path));
        let parsed = fs::read(&path).map_err(|e| e.to_string()).and_then(|bytes| {
            let is_xml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml"));
            let res = if is_xml {
                parse_cellcounter_xml(&bytes)
            } else {
                parse_csv(&bytes, &key)
            };
            res.map_err(|e| e.to_string())
        });
        match parsed {
            Ok(mut set) => {
                set.image_id = key.clone();
                set.marker = defaults.marker.clone();
                set.magnification = defaults.magnification;
                pair.annotation = Some(set);
            }
            Err(msg) => pair.load_error = Some(format!("{}: {msg}", file_name(&path))),
        }
    }

    for (key, pair) in pairs.iter_mut() {
        let Some((name, marker, mag)) = labels.get(key) else {
            continue;
        };
        pair.original_name = name.clone().filter(|n| !n.is_empty());
        if let Some(set) = pair.annotation.as_mut() {
            let labelled = marker
                .as_deref()
                .map(str::parse::<Marker>)
                .transpose()
                .and_then(|m| Ok((m, mag.as_deref().map(str::parse::<Magnification>).transpose()?)));
            match labelled {
                Ok((m, g)) => {
                    if let Some(m) = m {
                        set.marker = m;
                    }
                    if let Some(g) = g {
                        set.magnification = g;
                    }
                }
                Err(e) => pair.load_error = Some(format!("metadata: {e}")),
            }
        }
    }
    Ok(pairs.into_values().collect())
}

/// Writes a cleaned manifest in dataset layout. Images are copied
/// byte-for-byte from `src/images`, keeping their extension.
pub fn write_dataset(manifest: &DatasetManifest, src: &Path, out: &Path) -> Result<()> {
    let (img_dir, ann_dir) = (out.join("images"), out.join("annotations"));
    create_dir(&img_dir)?;
    create_dir(&ann_dir)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let from = src.join("images").join(&r.image_file);
        let ext = Path::new(&r.image_file)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("pgm");
        let bytes = read(&from)?;
        write(&img_dir.join(format!("{}.{}", r.id, ext.to_ascii_lowercase())), bytes)?;
        write(&ann_dir.join(format!("{}.csv", r.id)), write_csv(&r.annotation))?;
        records.push(DatasetRecord {
            id: r.id.clone(),
            original_name: r.original_name.clone(),
            marker: r.annotation.marker.clone(),
            magnification: r.annotation.magnification,
            width: r.width(),
            height: r.height(),
            count: r.annotation.count(),
        });
    }
    write(&out.join(METADATA_FILE), metadata_csv(&records))
}

/// Writes generated scenes as 16-bit PGM images with CSV annotations.
pub fn write_synthetic_corpus(scenes: &[SyntheticScene], out: &Path) -> Result<Vec<DatasetRecord>> {
    let (img_dir, ann_dir) = (out.join("images"), out.join("annotations"));
    create_dir(&img_dir)?;
    create_dir(&ann_dir)?;
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        let id = &s.dots.image_id;
        let name = format!("{id}.pgm");
        write(&img_dir.join(&name), encode_pgm(&s.image, true))?;
        write(&ann_dir.join(format!("{id}.csv")), write_csv(&s.dots))?;
        records.push(DatasetRecord {
            id: id.clone(),
            original_name: name,
            marker: s.dots.marker.clone(),
            magnification: s.dots.magnification,
            width: s.image.width() as u32,
            height: s.image.height() as u32,
            count: s.count(),
        });
    }
    write(&out.join(METADATA_FILE), metadata_csv(&records))?;
    Ok(records)
}

/// A dataset directory with its metadata loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let meta = root.join(METADATA_FILE);
        if !meta.is_file() {
            return Err(Error::io(
                &meta,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "dataset metadata not found; run ingest or synth first",
                ),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            records: parse_metadata(&meta)?,
        })
    }

    pub fn record(&self, id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.root.join("images").join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                let p = self.root.join("images").join(format!("{id}.pgm"));
                Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"))
            })
    }

    pub fn read_image(&self, id: &str) -> Result<GrayImage> {
        let path = self.image_path(id)?;
        Ok(read_image(&read(&path)?)?)
    }

    pub fn read_annotations(&self, id: &str) -> Result<AnnotationSet> {
        let path = self.root.join("annotations").join(format!("{id}.csv"));
        let mut set = parse_csv(&read(&path)?, id)?;
        if let Some(r) = self.record(id) {
            set.marker = r.marker.clone();
            set.magnification = r.magnification;
            set.bind_to_image(r.width, r.height)?;
        }
        Ok(set)
    }

    pub fn annotation_sets(&self) -> Result<Vec<AnnotationSet>> {
        self.records.par_iter().map(|r| self.read_annotations(&r.id)).collect()
    }

    /// Loads and prepares the given images for `cfg`, in the given order.
    pub fn samples(&self, ids: &[&str], cfg: &ModelConfig, kernel: &GaussianKernel) -> Result<Vec<Sample>> {
        ids.par_iter()
            .map(|id| {
                let img = self.read_image(id)?;
                let set = self.read_annotations(id)?;
                Ok(prepare_sample(*id, &img, &set.dots, cfg, kernel)?)
            })
            .collect()
    }
}
