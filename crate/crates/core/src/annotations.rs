//! Dot annotations: CellCounter XML import, `X,Y` CSV conversion, dataset
//! cleaning and per-group count statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed XML at byte {offset}: {msg}")]
    Xml { offset: u64, msg: String },
    #[error("marker {index}: missing {field}")]
    MissingCoordinate { index: usize, field: &'static str },
    #[error("marker {index}: invalid {field} value {value:?}")]
    InvalidCoordinate {
        index: usize,
        field: &'static str,
        value: String,
    },
    #[error("CSV row {row}: {msg}")]
    Csv { row: usize, msg: String },
    #[error("unknown marker {0:?}")]
    UnknownMarker(String),
    #[error("unknown magnification {0:?}")]
    UnknownMagnification(String),
    #[error("dot {index} at ({x}, {y}) lies outside a {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("dataset statistics need at least one record")]
    EmptyManifest,
}

type Result<T> = std::result::Result<T, AnnotationError>;

/// One annotated cell center, in pixel coordinates of its source image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DotAnnotation {
    pub x: f64,
    pub y: f64,
}

impl DotAnnotation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Staining markers of the dataset vocabulary, in canonical display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MarkerKind {
    Dapi,
    Gfap,
    Ki67,
    Map2ab,
    Pi,
    Rip,
    Tuj1,
}

impl MarkerKind {
    pub const ALL: [MarkerKind; 7] = [
        MarkerKind::Dapi,
        MarkerKind::Gfap,
        MarkerKind::Ki67,
        MarkerKind::Map2ab,
        MarkerKind::Pi,
        MarkerKind::Rip,
        MarkerKind::Tuj1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MarkerKind::Dapi => "DAPI",
            MarkerKind::Gfap => "GFAP",
            MarkerKind::Ki67 => "Ki67",
            MarkerKind::Map2ab => "MAP2ab",
            MarkerKind::Pi => "PI",
            MarkerKind::Rip => "RIP",
            MarkerKind::Tuj1 => "TuJ1",
        }
    }
}

/// A single marker or a co-labeling combination such as `Ki67+TuJ1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Marker(Vec<MarkerKind>);

impl Marker {
    pub fn single(kind: MarkerKind) -> Self {
        Marker(vec![kind])
    }

    pub fn combination(kinds: impl IntoIterator<Item = MarkerKind>) -> Option<Self> {
        let mut v: Vec<MarkerKind> = kinds.into_iter().collect();
        v.sort();
        v.dedup();
        (!v.is_empty()).then_some(Marker(v))
    }

    pub fn kinds(&self) -> &[MarkerKind] {
        &self.0
    }
}

impl Default for Marker {
    fn default() -> Self {
        Marker::single(MarkerKind::Dapi)
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|k| k.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Marker {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self> {
        let mut kinds = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            let kind = MarkerKind::ALL
                .into_iter()
                .find(|k| k.name().eq_ignore_ascii_case(part))
                .ok_or_else(|| AnnotationError::UnknownMarker(s.to_string()))?;
            kinds.push(kind);
        }
        Marker::combination(kinds).ok_or_else(|| AnnotationError::UnknownMarker(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Magnification {
    #[default]
    X20,
    X40,
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Magnification::X20 => "20x",
            Magnification::X40 => "40x",
        })
    }
}

impl FromStr for Magnification {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "20x" | "20" | "x20" => Ok(Magnification::X20),
            "40x" | "40" | "x40" => Ok(Magnification::X40),
            _ => Err(AnnotationError::UnknownMagnification(s.to_string())),
        }
    }
}

/// All dots annotated on one image, plus image-level metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub image_id: String,
    /// Image file name recorded by the annotation tool, when known.
    pub image_filename: Option<String>,
    pub dots: Vec<DotAnnotation>,
    pub marker: Marker,
    pub magnification: Magnification,
    /// `(width, height)` once bound to an image.
    pub image_size: Option<(u32, u32)>,
}

impl AnnotationSet {
    pub fn new(image_id: impl Into<String>, dots: Vec<DotAnnotation>) -> Self {
        Self {
            image_id: image_id.into(),
            dots,
            ..Default::default()
        }
    }

    pub fn count(&self) -> usize {
        self.dots.len()
    }

    /// Records the image size after checking every dot lies inside it.
    pub fn bind_to_image(&mut self, width: u32, height: u32) -> Result<()> {
        for (index, d) in self.dots.iter().enumerate() {
            let inside = d.x >= 0.0 && d.y >= 0.0 && d.x < width as f64 && d.y < height as f64;
            if !inside {
                return Err(AnnotationError::OutOfBounds {
                    index,
                    x: d.x,
                    y: d.y,
                    width,
                    height,
                });
            }
        }
        self.image_size = Some((width, height));
        Ok(())
    }
}

fn parse_coord(index: usize, field: &'static str, raw: Option<String>) -> Result<f64> {
    let raw = raw.ok_or(AnnotationError::MissingCoordinate { index, field })?;
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(AnnotationError::InvalidCoordinate {
            index,
            field,
            value: raw,
        }),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    None,
    X,
    Y,
    Filename,
}

/// Reads an ImageJ CellCounter marker file.
///
/// Every `Marker` element contributes one dot regardless of its
/// `Marker_Type` group. `MarkerZ` is ignored. The returned set uses the
/// stem of `Image_Filename` as its id.
pub fn parse_cellcounter_xml(bytes: &[u8]) -> Result<AnnotationSet> {
    let text = std::str::from_utf8(bytes).map_err(|e| AnnotationError::Xml {
        offset: e.valid_up_to() as u64,
        msg: "invalid UTF-8".into(),
    })?;
    let mut reader = Reader::from_str(text);
    let xml_err = |reader: &Reader<&[u8]>, msg: String| AnnotationError::Xml {
        offset: reader.error_position(),
        msg,
    };

    let mut depth = 0usize;
    let mut field = Field::None;
    let mut marker_index = 0usize;
    let mut in_marker = false;
    let (mut mx, mut my): (Option<String>, Option<String>) = (None, None);
    let mut filename: Option<String> = None;
    let mut dots = Vec::new();

    loop {
        let event = reader.read_event().map_err(|e| xml_err(&reader, e.to_string()))?;
        match event {
            Event::Start(e) => {
                depth += 1;
                match e.name().as_ref() {
                    "Marker" => {
                        in_marker = true;
                        mx = None;
                        my = None;
                    }
                    "MarkerX" if in_marker => field = Field::X,
                    "MarkerY" if in_marker => field = Field::Y,
                    "Image_Filename" => field = Field::Filename,
                    _ => field = Field::None,
                }
            }
            Event::Empty(e) => {
                if e.name().as_ref() == "Marker" {
                    return Err(AnnotationError::MissingCoordinate {
                        index: marker_index,
                        field: "MarkerX",
                    });
                }
            }
            Event::Text(t) => {
                let s: &str = &t;
                let target = match field {
                    Field::X => &mut mx,
                    Field::Y => &mut my,
                    Field::Filename => &mut filename,
                    Field::None => continue,
                };
                target.get_or_insert_with(String::new).push_str(s);
            }
            Event::GeneralRef(r) => {
                let resolved = match &*r {
                    "amp" => "&",
                    "lt" => "<",
                    "gt" => ">",
                    "quot" => "\"",
                    "apos" => "'",
                    _ => "",
                };
                if field == Field::Filename {
                    filename.get_or_insert_with(String::new).push_str(resolved);
                }
            }
            Event::End(e) => {
                depth = depth.saturating_sub(1);
                field = Field::None;
                if e.name().as_ref() == "Marker" && in_marker {
                    let x = parse_coord(marker_index, "MarkerX", mx.take())?;
                    let y = parse_coord(marker_index, "MarkerY", my.take())?;
                    dots.push(DotAnnotation { x, y });
                    marker_index += 1;
                    in_marker = false;
                }
            }
            Event::Eof => {
                if depth != 0 {
                    return Err(AnnotationError::Xml {
                        offset: reader.buffer_position(),
                        msg: "unexpected end of document".into(),
                    });
                }
                break;
            }
            _ => {}
        }
    }

    let filename = filename.map(|f| f.trim().to_string()).filter(|f| !f.is_empty());
    let image_id = filename
        .as_deref()
        .map(|f| {
            std::path::Path::new(f)
                .file_stem()
                .map_or(f.to_string(), |s| s.to_string_lossy().into_owned())
        })
        .unwrap_or_default();
    Ok(AnnotationSet {
        image_id,
        image_filename: filename,
        dots,
        ..Default::default()
    })
}

/// Serializes the dots as a CSV with an `X,Y` header.
pub fn write_csv(set: &AnnotationSet) -> Vec<u8> {
    let mut out = String::from("X,Y\n");
    for d in &set.dots {
        out.push_str(&format!("{},{}\n", d.x, d.y));
    }
    out.into_bytes()
}

/// Parses an `X,Y` CSV. Row numbers in errors are 1-based file lines.
pub fn parse_csv(bytes: &[u8], image_id: &str) -> Result<AnnotationSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| AnnotationError::Csv {
        row: 1,
        msg: e.to_string(),
    })?;
    let cols: Vec<String> = headers.iter().map(|h| h.to_ascii_uppercase()).collect();
    let (xi, yi) = match (cols.iter().position(|h| h == "X"), cols.iter().position(|h| h == "Y")) {
        (Some(x), Some(y)) => (x, y),
        _ => {
            return Err(AnnotationError::Csv {
                row: 1,
                msg: format!("expected X,Y header, found {:?}", headers),
            })
        }
    };
    let mut dots = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| AnnotationError::Csv {
            row,
            msg: e.to_string(),
        })?;
        let get = |idx: usize, name: &str| -> Result<f64> {
            let cell = rec.get(idx).unwrap_or("");
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| AnnotationError::Csv {
                    row,
                    msg: format!("non-numeric {name} value {cell:?}"),
                })
        };
        dots.push(DotAnnotation {
            x: get(xi, "X")?,
            y: get(yi, "Y")?,
        });
    }
    Ok(AnnotationSet::new(image_id, dots))
}

/// Image file as seen by the cleaning step.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub file_name: String,
    /// SHA-256 of the raw file bytes.
    pub digest: [u8; 32],
    pub width: u32,
    pub height: u32,
}

/// An image and/or annotation sharing one pairing key (the file stem).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub key: String,
    pub image: Option<ImageEntry>,
    pub annotation: Option<AnnotationSet>,
    pub annotation_file: Option<String>,
    /// Name to record as `original_name`; defaults to the image file name.
    pub original_name: Option<String>,
    /// Problem found while reading either file; such pairs are rejected.
    pub load_error: Option<String>,
}

impl CandidatePair {
    pub fn new(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            image: None,
            annotation: None,
            annotation_file: None,
            original_name: None,
            load_error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Sequential numeric identifier assigned by cleaning.
    pub id: String,
    pub original_name: String,
    /// Source file name of the image.
    pub image_file: String,
    pub annotation: AnnotationSet,
    pub digest: [u8; 32],
}

impl ManifestRecord {
    pub fn width(&self) -> u32 {
        self.annotation.image_size.map_or(0, |s| s.0)
    }

    pub fn height(&self) -> u32 {
        self.annotation.image_size.map_or(0, |s| s.1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub notes: Vec<String>,
}

impl DatasetManifest {
    /// Turns the manifest back into cleaning input, keyed by record id.
    pub fn to_candidates(&self) -> Vec<CandidatePair> {
        self.records
            .iter()
            .map(|r| CandidatePair {
                key: r.id.clone(),
                image: Some(ImageEntry {
                    file_name: r.image_file.clone(),
                    digest: r.digest,
                    width: r.width(),
                    height: r.height(),
                }),
                annotation: Some(r.annotation.clone()),
                annotation_file: None,
                original_name: Some(r.original_name.clone()),
                load_error: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    OrphanAnnotation,
    OrphanImage,
    Duplicate,
    /// Unreadable file or dots outside the image.
    Invalid,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::OrphanAnnotation => "orphan_annotation",
            RejectReason::OrphanImage => "orphan_image",
            RejectReason::Duplicate => "duplicate",
            RejectReason::Invalid => "invalid",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub key: String,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RejectReport {
    pub entries: Vec<Rejection>,
}

impl RejectReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "reason", "detail"]).expect("in-memory write");
        for e in &self.entries {
            w.write_record([e.key.as_str(), &e.reason.to_string(), e.detail.as_str()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }
}

/// Content key for duplicate detection: image bytes plus the sorted dots.
fn content_key(digest: &[u8; 32], dots: &[DotAnnotation]) -> [u8; 32] {
    let mut sorted: Vec<(u64, u64)> = dots.iter().map(|d| (d.x.to_bits(), d.y.to_bits())).collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    h.update(digest);
    for (x, y) in sorted {
        h.update(x.to_le_bytes());
        h.update(y.to_le_bytes());
    }
    h.finalize().into()
}

/// Keeps only matched, in-bounds, content-unique pairs and renumbers them.
///
/// Candidates are processed in key order; the first of a set of duplicates
/// is kept. Surviving records get ids `000001`, `000002`, ... in that order.
pub fn clean_dataset(pairs: Vec<CandidatePair>) -> (DatasetManifest, RejectReport) {
    let mut pairs = pairs;
    pairs.sort_by(|a, b| a.key.cmp(&b.key));

    let mut report = RejectReport::default();
    let mut seen = HashSet::new();
    let mut records = Vec::new();

    for pair in pairs {
        let reject = |reason, detail: String| Rejection {
            key: pair.key.clone(),
            reason,
            detail,
        };
        if let Some(err) = &pair.load_error {
            report.entries.push(reject(RejectReason::Invalid, err.clone()));
            continue;
        }
        let (image, mut annotation) = match (pair.image.clone(), pair.annotation.clone()) {
            (Some(i), Some(a)) => (i, a),
            (Some(i), None) => {
                let detail = format!("no annotation for {}", i.file_name);
                report.entries.push(reject(RejectReason::OrphanImage, detail));
                continue;
            }
            (None, Some(_)) => {
                let file = pair.annotation_file.clone().unwrap_or_else(|| pair.key.clone());
                report
                    .entries
                    .push(reject(RejectReason::OrphanAnnotation, format!("no image for {file}")));
                continue;
            }
            (None, None) => continue,
        };
        if let Err(e) = annotation.bind_to_image(image.width, image.height) {
            report.entries.push(reject(RejectReason::Invalid, e.to_string()));
            continue;
        }
        if !seen.insert(content_key(&image.digest, &annotation.dots)) {
            report.entries.push(reject(
                RejectReason::Duplicate,
                "same content as an earlier pair".to_string(),
            ));
            continue;
        }
        let id = format!("{:06}", records.len() + 1);
        annotation.image_id = id.clone();
        records.push(ManifestRecord {
            id,
            original_name: pair.original_name.clone().unwrap_or_else(|| image.file_name.clone()),
            image_file: image.file_name,
            annotation,
            digest: image.digest,
        });
    }

    (
        DatasetManifest {
            records,
            notes: Vec::new(),
        },
        report,
    )
}

/// Count summary of one group of images.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub group: String,
    pub images: usize,
    pub cells: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub min: usize,
    pub max: usize,
}

impl StatsRow {
    pub fn from_counts(group: impl Into<String>, counts: &[usize]) -> Self {
        let n = counts.len();
        let cells: usize = counts.iter().sum();
        let mean = cells as f64 / n as f64;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        StatsRow {
            group: group.into(),
            images: n,
            cells,
            mean,
            std: var.sqrt(),
            median,
            min: sorted[0],
            max: sorted[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsTable {
    pub rows: Vec<StatsRow>,
}

impl StatsTable {
    pub fn row(&self, group: &str) -> Option<&StatsRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Group | #Images | #Cells | Mean CPI ± std | Median CPI | Min / Max CPI |\n\
             |---|---:|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {:.1} ± {:.1} | {} | {} / {} |\n",
                r.group, r.images, r.cells, r.mean, r.std, r.median, r.min, r.max
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,images,cells,mean,std,median,min,max\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.group, r.images, r.cells, r.mean, r.std, r.median, r.min, r.max
            ));
        }
        out
    }
}

/// Summary rows: one overall row, then one per marker and one per
/// magnification, each in sorted order.
pub fn dataset_stats(manifest: &DatasetManifest) -> Result<StatsTable> {
    let sets: Vec<&AnnotationSet> = manifest.records.iter().map(|r| &r.annotation).collect();
    stats_for_sets(&sets)
}

pub fn stats_for_sets(sets: &[&AnnotationSet]) -> Result<StatsTable> {
    if sets.is_empty() {
        return Err(AnnotationError::EmptyManifest);
    }
    let all: Vec<usize> = sets.iter().map(|s| s.count()).collect();
    let mut by_marker: BTreeMap<Marker, Vec<usize>> = BTreeMap::new();
    let mut by_mag: BTreeMap<Magnification, Vec<usize>> = BTreeMap::new();
    for s in sets {
        by_marker.entry(s.marker.clone()).or_default().push(s.count());
        by_mag.entry(s.magnification).or_default().push(s.count());
    }
    let mut rows = vec![StatsRow::from_counts("all", &all)];
    rows.extend(
        by_marker
            .iter()
            .map(|(m, c)| StatsRow::from_counts(format!("marker={m}"), c)),
    );
    rows.extend(
        by_mag
            .iter()
            .map(|(m, c)| StatsRow::from_counts(format!("magnification={m}"), c)),
    );
    Ok(StatsTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cellcounter(groups: &[&[(u32, u32)]]) -> String {
        let mut s = String::from(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<CellCounter_Marker_File>\n\
             <Image_Properties><Image_Filename>C1-plate_03.tif</Image_Filename></Image_Properties>\n\
             <Marker_Data><Current_Type>1</Current_Type>\n",
        );
        for (t, group) in groups.iter().enumerate() {
            s.push_str(&format!("<Marker_Type><Type>{}</Type>\n", t + 1));
            for (x, y) in group.iter() {
                s.push_str(&format!(
                    "<Marker><MarkerX>{x}</MarkerX><MarkerY>{y}</MarkerY><MarkerZ>1</MarkerZ></Marker>\n"
                ));
            }
            s.push_str("</Marker_Type>\n");
        }
        s.push_str("</Marker_Data>\n</CellCounter_Marker_File>\n");
        s
    }

    #[test]
    fn three_markers() {
        let xml = cellcounter(&[&[(10, 20), (30, 40), (50, 60)]]);
        let set = parse_cellcounter_xml(xml.as_bytes()).unwrap();
        assert_eq!(
            set.dots,
            vec![
                DotAnnotation::new(10.0, 20.0),
                DotAnnotation::new(30.0, 40.0),
                DotAnnotation::new(50.0, 60.0)
            ]
        );
        assert_eq!(set.image_filename.as_deref(), Some("C1-plate_03.tif"));
        assert_eq!(set.image_id, "C1-plate_03");
    }

    #[test]
    fn zero_markers() {
        let xml = cellcounter(&[&[]]);
        assert_eq!(parse_cellcounter_xml(xml.as_bytes()).unwrap().count(), 0);
    }

    #[test]
    fn marker_types_are_merged() {
        let xml = cellcounter(&[&[(1, 1), (2, 2)], &[(3, 3), (4, 4), (5, 5)]]);
        assert_eq!(parse_cellcounter_xml(xml.as_bytes()).unwrap().count(), 5);
    }

    #[test]
    fn missing_coordinate_names_marker_index() {
        let xml = "<CellCounter_Marker_File><Marker_Data><Marker_Type>\
                   <Marker><MarkerX>1</MarkerX><MarkerY>1</MarkerY></Marker>\
                   <Marker><MarkerX>4</MarkerX></Marker>\
                   </Marker_Type></Marker_Data></CellCounter_Marker_File>";
        match parse_cellcounter_xml(xml.as_bytes()) {
            Err(AnnotationError::MissingCoordinate {
                index: 1,
                field: "MarkerY",
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_xml_reports_offset() {
        let xml = "<CellCounter_Marker_File><Marker_Data></Marker_Type></CellCounter_Marker_File>";
        match parse_cellcounter_xml(xml.as_bytes()) {
            Err(AnnotationError::Xml { offset, .. }) => assert!(offset > 0 && offset <= xml.len() as u64),
            other => panic!("unexpected {other:?}"),
        }
        let truncated = "<CellCounter_Marker_File><Marker_Data>";
        assert!(matches!(
            parse_cellcounter_xml(truncated.as_bytes()),
            Err(AnnotationError::Xml { .. })
        ));
    }

    #[test]
    fn csv_shapes() {
        let empty = AnnotationSet::new("a", vec![]);
        assert_eq!(write_csv(&empty), b"X,Y\n");
        let three = AnnotationSet::new(
            "b",
            vec![
                DotAnnotation::new(1.0, 2.0),
                DotAnnotation::new(3.5, 4.25),
                DotAnnotation::new(0.0, 9.0),
            ],
        );
        let text = String::from_utf8(write_csv(&three)).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(parse_csv(text.as_bytes(), "b").unwrap().dots, three.dots);
    }

    #[test]
    fn csv_non_numeric_reports_row() {
        let text = "X,Y\n1,2\n3,abc\n";
        match parse_csv(text.as_bytes(), "c") {
            Err(AnnotationError::Csv { row: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn marker_vocabulary() {
        let m: Marker = "TuJ1 + Ki67".parse().unwrap();
        assert_eq!(m.to_string(), "Ki67+TuJ1");
        assert_eq!("dapi".parse::<Marker>().unwrap(), Marker::default());
        assert!("Cy5".parse::<Marker>().is_err());
        assert_eq!("40x".parse::<Magnification>().unwrap(), Magnification::X40);
        assert!("10x".parse::<Magnification>().is_err());
    }

    fn image(name: &str, seed: u8) -> ImageEntry {
        ImageEntry {
            file_name: name.into(),
            digest: [seed; 32],
            width: 100,
            height: 100,
        }
    }

    fn pair(key: &str, img: Option<ImageEntry>, dots: Option<Vec<DotAnnotation>>) -> CandidatePair {
        CandidatePair {
            image: img,
            annotation: dots.map(|d| AnnotationSet::new(key, d)),
            annotation_file: Some(format!("{key}.xml")),
            ..CandidatePair::new(key)
        }
    }

    #[test]
    fn orphan_image_is_rejected() {
        let (m, r) = clean_dataset(vec![
            pair(
                "img1",
                Some(image("img1.pgm", 1)),
                Some(vec![DotAnnotation::new(1.0, 1.0)]),
            ),
            pair("img2", Some(image("img2.pgm", 2)), None),
        ]);
        assert_eq!(m.records.len(), 1);
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].reason, RejectReason::OrphanImage);
    }

    #[test]
    fn orphan_annotation_is_rejected() {
        let (m, r) = clean_dataset(vec![pair("x", None, Some(vec![]))]);
        assert!(m.records.is_empty());
        assert_eq!(r.entries[0].reason, RejectReason::OrphanAnnotation);
    }

    #[test]
    fn duplicate_content_is_rejected() {
        let dots = vec![DotAnnotation::new(5.0, 5.0), DotAnnotation::new(1.0, 2.0)];
        let mut reversed = dots.clone();
        reversed.reverse();
        let (m, r) = clean_dataset(vec![
            pair("a", Some(image("a.pgm", 7)), Some(dots)),
            pair("b", Some(image("b.pgm", 7)), Some(reversed)),
        ]);
        assert_eq!(m.records.len(), 1);
        assert_eq!(r.entries[0].reason, RejectReason::Duplicate);
        assert_eq!(r.entries[0].key, "b");
    }

    #[test]
    fn clean_input_passes_through_and_renumbers() {
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                pair(
                    &format!("scan_{i}"),
                    Some(image(&format!("scan_{i}.pgm"), i)),
                    Some(vec![DotAnnotation::new(i as f64, 0.0)]),
                )
            })
            .collect();
        let (m, r) = clean_dataset(pairs);
        assert!(r.is_empty());
        let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["000001", "000002", "000003", "000004"]);
        assert_eq!(m.records[2].original_name, "scan_2.pgm");
        assert_eq!(m.records[2].annotation.image_id, "000003");
    }

    #[test]
    fn cleaning_is_idempotent() {
        let (m1, _) = clean_dataset(vec![
            pair("q", Some(image("q.pgm", 1)), Some(vec![DotAnnotation::new(2.0, 2.0)])),
            pair("p", Some(image("p.pgm", 2)), Some(vec![])),
            pair("r", Some(image("r.pgm", 2)), Some(vec![])),
            pair("s", None, Some(vec![])),
        ]);
        let (m2, r2) = clean_dataset(m1.to_candidates());
        assert_eq!(m1, m2);
        assert!(r2.is_empty());
    }

    #[test]
    fn out_of_bounds_dot_is_invalid() {
        let (m, r) = clean_dataset(vec![pair(
            "z",
            Some(image("z.pgm", 1)),
            Some(vec![DotAnnotation::new(100.0, 3.0)]),
        )]);
        assert!(m.records.is_empty());
        assert_eq!(r.entries[0].reason, RejectReason::Invalid);
    }

    #[test]
    fn stats_single_and_pair() {
        let ten = AnnotationSet::new("a", vec![DotAnnotation::new(0.0, 0.0); 10]);
        let t = stats_for_sets(&[&ten]).unwrap();
        let row = t.row("all").unwrap();
        assert_eq!((row.mean, row.std, row.min, row.max), (10.0, 0.0, 10, 10));

        let four = AnnotationSet::new("b", vec![DotAnnotation::new(0.0, 0.0); 4]);
        let eight = AnnotationSet::new("c", vec![DotAnnotation::new(0.0, 0.0); 8]);
        let t = stats_for_sets(&[&four, &eight]).unwrap();
        let row = t.row("all").unwrap();
        assert_eq!(row.mean, 6.0);
        assert_eq!(row.std, 2.0); // population formula
        assert_eq!(row.median, 6.0);
        assert_eq!(t.row("marker=DAPI").unwrap().images, 2);
        assert_eq!(t.row("magnification=20x").unwrap().cells, 12);
    }

    #[test]
    fn stats_on_empty_manifest_fail() {
        assert!(matches!(stats_for_sets(&[]), Err(AnnotationError::EmptyManifest)));
    }
}
