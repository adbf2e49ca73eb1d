//! Grayscale images, Gaussian kernels and count-preserving density maps.

use std::path::Path;

use thiserror::Error;

use crate::annotations::DotAnnotation;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("dot {index} at ({x}, {y}) outside source image {width}x{height}")]
    DotOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("unsupported image format")]
    UnsupportedFormat,
    #[error("corrupt image: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ImagingError>;

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(ImagingError::Parameter(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ImagingError::Parameter(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// A grid whose element sum is a cell count.
///
/// Ground-truth maps are non-negative by construction. Maps predicted by a
/// model are raw head outputs and may contain negative cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(ImagingError::Parameter(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Flat CSV: a `width,height` line, then one line per grid row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.width, self.height);
        for row in self.values.chunks(self.width.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| ImagingError::Corrupt("empty density CSV".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| ImagingError::Corrupt(format!("bad density header {header:?}")))?;
        let [w, h] = dims[..] else {
            return Err(ImagingError::Corrupt(format!("bad density header {header:?}")));
        };
        let mut values = Vec::with_capacity(w * h);
        for line in lines {
            for cell in line.split(',') {
                values.push(
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|_| ImagingError::Corrupt(format!("bad density value {cell:?}")))?,
                );
            }
        }
        Self::from_values(w, h, values)
    }
}

/// Square, normalized Gaussian stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, dx: usize, dy: usize) -> f64 {
        self.weights[dy * self.size + dx]
    }
}

impl Default for GaussianKernel {
    /// 5×5 with σ = 1.
    fn default() -> Self {
        gaussian_kernel(5, 1.0).expect("valid default kernel")
    }
}

/// Samples `exp(-(dx² + dy²) / 2σ²)` on an odd `size × size` grid centered at
/// zero and normalizes the samples to sum to one.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<GaussianKernel> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(ImagingError::Parameter(format!(
            "kernel size must be odd and positive, got {size}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImagingError::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - r, y as f64 - r);
            weights.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianKernel { size, weights })
}

/// Builds a ground-truth density map of `out_size = (width, height)` cells
/// from dots given in a `src_size` image.
///
/// A dot at `(x, y)` maps to grid position `(x·W_f/W, y·H_f/H)` and is
/// stamped on the grid cell whose center is nearest, i.e. the cell
/// containing that position. Kernel weights falling outside the grid are
/// dropped and the rest rescaled, so each dot adds exactly one unit of mass.
pub fn density_from_dots(
    dots: &[DotAnnotation],
    out_size: (usize, usize),
    src_size: (usize, usize),
    kernel: &GaussianKernel,
) -> Result<DensityMap> {
    let (wf, hf) = out_size;
    let (w, h) = src_size;
    if w == 0 || h == 0 {
        return Err(ImagingError::Parameter("source size must be positive".into()));
    }
    if wf == 0 || hf == 0 {
        return Err(ImagingError::Parameter("output size must be positive".into()));
    }
    let mut map = DensityMap::zeros(wf, hf);
    let r = (kernel.size / 2) as isize;
    for (index, d) in dots.iter().enumerate() {
        let inside = d.x >= 0.0 && d.y >= 0.0 && d.x < w as f64 && d.y < h as f64;
        if !inside {
            return Err(ImagingError::DotOutOfBounds {
                index,
                x: d.x,
                y: d.y,
                width: w,
                height: h,
            });
        }
        let gx = ((d.x * wf as f64 / w as f64).floor() as isize).min(wf as isize - 1);
        let gy = ((d.y * hf as f64 / h as f64).floor() as isize).min(hf as isize - 1);

        let in_grid = |dx: isize, dy: isize| {
            let (cx, cy) = (gx + dx, gy + dy);
            cx >= 0 && cy >= 0 && cx < wf as isize && cy < hf as isize
        };
        let mut kept = 0.0;
        for ky in 0..kernel.size {
            for kx in 0..kernel.size {
                if in_grid(kx as isize - r, ky as isize - r) {
                    kept += kernel.at(kx, ky);
                }
            }
        }
        for ky in 0..kernel.size {
            for kx in 0..kernel.size {
                let (dx, dy) = (kx as isize - r, ky as isize - r);
                if in_grid(dx, dy) {
                    let idx = (gy + dy) as usize * wf + (gx + dx) as usize;
                    map.values[idx] += kernel.at(kx, ky) / kept;
                }
            }
        }
    }
    Ok(map)
}

/// Bilinear resampling with pixel centers at half-integer positions.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return Err(ImagingError::Parameter("target size must be positive".into()));
    }
    let (sw, sh) = (img.width, img.height);
    if sw == width && sh == height {
        return Ok(img.clone());
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sh, height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sw, width);
            let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
            let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage { width, height, pixels })
}

struct PgmHeader<'a> {
    binary: bool,
    width: usize,
    height: usize,
    maxval: u32,
    body: &'a [u8],
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader<'_>> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(ImagingError::UnsupportedFormat),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImagingError::Corrupt("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImagingError::Corrupt("bad PGM header field".into()))?;
    }
    // exactly one whitespace byte separates the header from binary data
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(ImagingError::Corrupt("truncated PGM header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(ImagingError::Corrupt(format!(
            "bad PGM dimensions {width}x{height} maxval {maxval}"
        )));
    }
    Ok(PgmHeader {
        binary,
        width: width as usize,
        height: height as usize,
        maxval,
        body: &bytes[pos..],
    })
}

fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let hdr = parse_pgm_header(bytes)?;
    let n = hdr.width * hdr.height;
    let max = hdr.maxval as f64;
    let raw: Vec<u32> = if hdr.binary {
        let bpp = if hdr.maxval > 255 { 2 } else { 1 };
        if hdr.body.len() < n * bpp {
            return Err(ImagingError::Corrupt(format!(
                "PGM data truncated: {} of {} bytes",
                hdr.body.len(),
                n * bpp
            )));
        }
        if bpp == 1 {
            hdr.body[..n].iter().map(|&b| b as u32).collect()
        } else {
            hdr.body[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(hdr.body).map_err(|_| ImagingError::Corrupt("non-ASCII P2 data".into()))?;
        let vals: Vec<u32> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| {
                t.parse()
                    .map_err(|_| ImagingError::Corrupt(format!("bad P2 sample {t:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() < n {
            return Err(ImagingError::Corrupt(format!(
                "PGM data truncated: {} of {n} samples",
                vals.len()
            )));
        }
        vals
    };
    let pixels = raw.iter().map(|&v| (v as f64 / max).min(1.0)).collect();
    GrayImage::new(hdr.width, hdr.height, pixels)
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decodes PGM (P2/P5, 8 or 16 bit) or PNG into a normalized gray image.
pub fn read_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        return read_pgm(bytes);
    }
    if bytes.starts_with(PNG_SIGNATURE) {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Corrupt(e.to_string()))?
            .into_luma16();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        return GrayImage::new(w as usize, h as usize, pixels);
    }
    Err(ImagingError::UnsupportedFormat)
}

/// Width and height without decoding pixel data, for PGM; PNG is decoded.
pub fn image_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        let h = parse_pgm_header(bytes)?;
        return Ok((h.width, h.height));
    }
    let img = read_image(bytes)?;
    Ok((img.width, img.height))
}

/// Binary PGM, 16-bit when `sixteen_bit`, otherwise 8-bit.
pub fn encode_pgm(img: &GrayImage, sixteen_bit: bool) -> Vec<u8> {
    let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    for &p in &img.pixels {
        let q = (p * maxval as f64).round() as u32;
        if sixteen_bit {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    out
}

/// Renders a density map as an 8-bit PGM scaled so the maximum is white.
/// Negative cells are shown as zero.
pub fn heatmap_pgm(map: &DensityMap) -> Vec<u8> {
    let max = map.values.iter().copied().fold(0.0_f64, f64::max);
    let pixels = map
        .values
        .iter()
        .map(|&v| if max > 0.0 { (v.max(0.0) / max).min(1.0) } else { 0.0 })
        .collect();
    let img = GrayImage {
        width: map.width,
        height: map.height,
        pixels,
    };
    encode_pgm(&img, false)
}

/// Ground truth and prediction side by side on one shared intensity scale,
/// each cell drawn as a `zoom`×`zoom` block, separated by a white column.
pub fn comparison_pgm(truth: &DensityMap, pred: &DensityMap, zoom: usize) -> Result<Vec<u8>> {
    if (truth.width, truth.height) != (pred.width, pred.height) {
        return Err(ImagingError::Parameter(format!(
            "cannot compare {}x{} with {}x{} maps",
            truth.width, truth.height, pred.width, pred.height
        )));
    }
    if zoom == 0 {
        return Err(ImagingError::Parameter("zoom must be positive".into()));
    }
    let max = truth.values.iter().chain(&pred.values).copied().fold(0.0_f64, f64::max);
    let shade = |v: f64| if max > 0.0 { v.max(0.0) / max } else { 0.0 };
    let (w, h) = (2 * truth.width * zoom + 1, truth.height * zoom);
    let mut pixels = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..truth.width * zoom {
            let cell = (y / zoom) * truth.width + x / zoom;
            pixels[y * w + x] = shade(truth.values[cell]);
            pixels[y * w + x + truth.width * zoom + 1] = shade(pred.values[cell]);
        }
    }
    Ok(encode_pgm(
        &GrayImage {
            width: w,
            height: h,
            pixels,
        },
        false,
    ))
}

pub fn write_heatmap(map: &DensityMap, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_pgm(map)).map_err(|source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_kernel() {
        let k = gaussian_kernel(1, 0.7).unwrap();
        assert_eq!(k.weights(), &[1.0]);
    }

    #[test]
    fn kernel_normalized_and_peaked() {
        let k = gaussian_kernel(5, 1.0).unwrap();
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let center = k.at(2, 2);
        assert!(k.weights().iter().all(|&w| w <= center));
        // 90 degree rotation symmetry
        for y in 0..5 {
            for x in 0..5 {
                assert!((k.at(x, y) - k.at(4 - y, x)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn wide_kernel_is_flat() {
        let k = gaussian_kernel(5, 1e6).unwrap();
        for w in k.weights() {
            assert!((w - 1.0 / 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_rejects_bad_parameters() {
        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(0, 1.0).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
    }

    #[test]
    fn empty_dots_give_zero_map() {
        let m = density_from_dots(&[], (8, 8), (64, 64), &GaussianKernel::default()).unwrap();
        assert_eq!(m.total(), 0.0);
    }

    #[test]
    fn interior_dots_conserve_count() {
        let dots: Vec<DotAnnotation> = (0..10)
            .map(|i| DotAnnotation::new(20.0 + 3.0 * i as f64, 30.0 + 2.0 * i as f64))
            .collect();
        let m = density_from_dots(&dots, (16, 16), (100, 100), &GaussianKernel::default()).unwrap();
        assert!((m.total() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn corner_dot_is_renormalized() {
        let k = GaussianKernel::default();
        let m = density_from_dots(&[DotAnnotation::new(0.0, 0.0)], (10, 10), (10, 10), &k).unwrap();
        assert!((m.total() - 1.0).abs() < 1e-9);
        // oracle: the in-grid quarter of the kernel, rescaled
        let kept: f64 = (2..5)
            .flat_map(|y| (2..5).map(move |x| (x, y)))
            .map(|(x, y)| k.at(x, y))
            .sum();
        assert!((m.get(0, 0) - k.at(2, 2) / kept).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_dot_names_index() {
        let dots = [DotAnnotation::new(1.0, 1.0), DotAnnotation::new(64.0, 1.0)];
        match density_from_dots(&dots, (8, 8), (64, 64), &GaussianKernel::default()) {
            Err(ImagingError::DotOutOfBounds { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 2).unwrap(), img);
        let c = GrayImage::filled(5, 7, 0.42);
        let r = resize_bilinear(&c, 11, 3).unwrap();
        assert!(r.pixels().iter().all(|&p| (p - 0.42).abs() < 1e-15));
    }

    #[test]
    fn resize_checkerboard_matches_hand_values() {
        // Source [[0,1],[1,0]]. Target coordinates map to source positions
        // -0.25, 0.25, 0.75, 1.25, clamped to [0,1] => 0, 0.25, 0.75, 1.
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&img, 4, 4).unwrap();
        let pos = [0.0, 0.25, 0.75, 1.0];
        for (yi, &fy) in pos.iter().enumerate() {
            for (xi, &fx) in pos.iter().enumerate() {
                let expected = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((r.get(xi, yi) - expected).abs() < 1e-12, "({xi},{yi})");
            }
        }
    }

    #[test]
    fn pgm_scaling() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let img = read_image(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);

        let ascii = b"P2\n# comment\n2 2\n255\n0 255\n128 64\n";
        assert_eq!(read_image(ascii).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_pgm_round_trip() {
        let img = GrayImage::new(2, 1, vec![0.25, 1.0]).unwrap();
        let back = read_image(&encode_pgm(&img, true)).unwrap();
        assert!((back.get(0, 0) - 0.25).abs() < 1.0 / 65535.0);
        assert_eq!(back.get(1, 0), 1.0);
    }

    #[test]
    fn truncated_and_unknown_formats() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128]);
        assert!(matches!(read_image(&bytes), Err(ImagingError::Corrupt(_))));
        assert!(matches!(read_image(b"GIF89a"), Err(ImagingError::UnsupportedFormat)));
        assert!(matches!(read_image(b"P5\n2 "), Err(ImagingError::Corrupt(_))));
    }

    #[test]
    fn heatmap_preserves_argmax_and_zero() {
        let m = DensityMap::from_values(3, 2, vec![0.1, 0.0, 0.7, 0.2, -0.3, 0.05]).unwrap();
        let img = read_image(&heatmap_pgm(&m)).unwrap();
        let argmax = img
            .pixels()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
        assert_eq!(img.get(1, 1), 0.0);

        let zero = DensityMap::zeros(4, 4);
        let img = read_image(&heatmap_pgm(&zero)).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn density_csv_round_trip() {
        let m = DensityMap::from_values(2, 3, vec![0.5, 1e-17, 0.0, 3.25, 1.0 / 3.0, 2.0]).unwrap();
        let back = DensityMap::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_csv().starts_with("2,3\n"));
    }

    #[test]
    fn comparison_shares_one_scale() {
        let gt = DensityMap::from_values(2, 1, vec![1.0, 0.0]).unwrap();
        let pred = DensityMap::from_values(2, 1, vec![0.5, -1.0]).unwrap();
        let img = read_image(&comparison_pgm(&gt, &pred, 2).unwrap()).unwrap();
        assert_eq!((img.width(), img.height()), (9, 2));
        assert_eq!(img.get(0, 1), 1.0);
        assert_eq!(img.get(3, 0), 0.0);
        assert_eq!(img.get(4, 0), 1.0);
        assert!((img.get(5, 1) - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(img.get(8, 0), 0.0);
        assert!(comparison_pgm(&gt, &DensityMap::zeros(1, 1), 1).is_err());
    }
}
