//! File formats: PFM, PNG (16-bit millimeter depth, 8-bit RGB/gray),
//! Middlebury `.flo`, binary PLY, and the DTFH/DTFC histogram containers.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::histogram::{CompressedHistogram, Histogram, TimeAxis};
use crate::raster::{DepthFrame, FlowField, Raster, RgbFrame};

const DTFH_MAGIC: &[u8; 4] = b"DTFH";
const DTFC_MAGIC: &[u8; 4] = b"DTFC";
const CONTAINER_VERSION: u32 = 1;
const DTFH_HEADER_LEN: usize = 28;
const DTFC_HEADER_LEN: usize = 32;

const FLO_MAGIC: f32 = 202021.25;
/// Middlebury convention: components above this mark unknown flow.
const FLO_UNKNOWN_THRESHOLD: f32 = 1e9;
const FLO_UNKNOWN: f32 = 1e10;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.kind,
                format!("truncated at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- PFM

/// Encodes a 1- or 3-channel float image. Rows are stored bottom to top,
/// little-endian.
fn encode_pfm(width: usize, height: usize, channels: usize, data: &[f32]) -> Vec<u8> {
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bad = |d: &str| Error::format("pfm", d);
    // three whitespace-terminated header tokens, then a single whitespace byte
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    let channels = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(bad(&format!("unknown tag {t:?}"))),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != n * 4 {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            n * 4,
            body.len()
        )));
    }
    let row = width * channels;
    let mut data = vec![0.0f32; n];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok((width, height, channels, data))
}

pub fn write_pfm_gray(path: &Path, image: &Raster<f64>) -> Result<()> {
    let data: Vec<f32> = image.data().iter().map(|&v| v as f32).collect();
    write_file(path, &encode_pfm(image.width(), image.height(), 1, &data))
}

pub fn read_pfm_gray(path: &Path) -> Result<Raster<f64>> {
    let (w, h, c, data) = decode_pfm(&read_file(path)?)?;
    if c != 1 {
        return Err(Error::format(
            "pfm",
            format!("{}: expected 1 channel, found {c}", path.display()),
        ));
    }
    Raster::from_vec(w, h, data.into_iter().map(f64::from).collect())
}

pub fn write_pfm_rgb(path: &Path, image: &Raster<[f64; 3]>) -> Result<()> {
    let data: Vec<f32> = image
        .data()
        .iter()
        .flat_map(|p| p.map(|v| v as f32))
        .collect();
    write_file(path, &encode_pfm(image.width(), image.height(), 3, &data))
}

pub fn read_pfm_rgb(path: &Path) -> Result<Raster<[f64; 3]>> {
    let (w, h, c, data) = decode_pfm(&read_file(path)?)?;
    if c != 3 {
        return Err(Error::format(
            "pfm",
            format!("{}: expected 3 channels, found {c}", path.display()),
        ));
    }
    let px = data
        .chunks_exact(3)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    Raster::from_vec(w, h, px)
}

// ---------------------------------------------------------------- PNG

fn png_err(path: &Path, e: image::ImageError) -> Error {
    Error::format("png", format!("{}: {e}", path.display()))
}

fn save_png<P>(path: &Path, buf: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| png_err(path, e))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    image::open(path).map_err(|e| png_err(path, e))
}

/// Depth in meters to 16-bit millimeters. Invalid or negative depth maps to 0,
/// depths beyond 65.535 m saturate.
pub fn write_depth_png_mm(path: &Path, depth: &DepthFrame) -> Result<()> {
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(
        depth.width() as u32,
        depth.height() as u32,
        |x, y| {
            let d = *depth.get(x as usize, y as usize);
            let mm = if d.is_finite() && d > 0.0 {
                (d * 1000.0).round().min(65535.0)
            } else {
                0.0
            };
            Luma([mm as u16])
        },
    );
    save_png(path, &buf)
}

pub fn read_depth_png_mm(path: &Path) -> Result<DepthFrame> {
    let img = open_png(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Raster::from_vec(
        w as usize,
        h as usize,
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 / 1000.0)
            .collect(),
    )
}

pub fn write_rgb_png(path: &Path, rgb: &RgbFrame) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf =
        ImageBuffer::<Rgb<u8>, _>::from_fn(rgb.width() as u32, rgb.height() as u32, |x, y| {
            Rgb(rgb.get(x as usize, y as usize).map(q))
        });
    save_png(path, &buf)
}

/// Reads an 8- or 16-bit color PNG into `[0, 1]` RGB.
pub fn read_rgb_png(path: &Path) -> Result<RgbFrame> {
    let img = open_png(path)?.into_rgb32f();
    let (w, h) = img.dimensions();
    let px = img
        .into_raw()
        .chunks_exact(3)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    Raster::from_vec(w as usize, h as usize, px)
}

/// Values in `[0, 1]` (e.g. confidence) to 8-bit gray.
pub fn write_gray_png(path: &Path, image: &Raster<f64>) -> Result<()> {
    let buf =
        ImageBuffer::<Luma<u8>, _>::from_fn(image.width() as u32, image.height() as u32, |x, y| {
            Luma([(image.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
        });
    save_png(path, &buf)
}

// ---------------------------------------------------------------- FLO

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + w * h * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (v, &ok) in flow.vectors.data().iter().zip(flow.valid.data()) {
        let (u, v) = if ok {
            (v[0] as f32, v[1] as f32)
        } else {
            (FLO_UNKNOWN, FLO_UNKNOWN)
        };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let mut r = Reader::new(bytes, "flo");
    let magic = r.f32()?;
    if magic != FLO_MAGIC {
        return Err(Error::format("flo", format!("bad magic {magic}")));
    }
    let (w, h) = (r.i32()?, r.i32()?);
    if w < 0 || h < 0 {
        return Err(Error::format("flo", format!("negative size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::format(
            "flo",
            format!("{} bytes for {w}x{h}", bytes.len()),
        ));
    }
    let mut vectors = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let (u, v) = (r.f32()?, r.f32()?);
        let ok = u.is_finite()
            && v.is_finite()
            && u.abs() <= FLO_UNKNOWN_THRESHOLD
            && v.abs() <= FLO_UNKNOWN_THRESHOLD;
        vectors.push(if ok { [u as f64, v as f64] } else { [0.0; 2] });
        valid.push(ok);
    }
    r.finish()?;
    Ok(FlowField {
        vectors: Raster::from_vec(w, h, vectors)?,
        valid: Raster::from_vec(w, h, valid)?,
    })
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_file(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_file(path)?)
}

// ---------------------------------------------------------------- PLY

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredPoint {
    pub position: [f64; 3],
    pub color: [u8; 3],
}

/// Binary little-endian PLY with float xyz and uchar rgb.
pub fn encode_ply(points: &[ColoredPoint]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    let mut out = header.into_bytes();
    out.reserve(points.len() * 15);
    for p in points {
        for c in p.position {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.color);
    }
    out
}

/// Reads back the layout written by [`encode_ply`].
pub fn decode_ply(bytes: &[u8]) -> Result<Vec<ColoredPoint>> {
    const END: &[u8] = b"end_header\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format("ply", "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::format("ply", "non-ascii header"))?;
    if !header.contains("format binary_little_endian 1.0") {
        return Err(Error::format(
            "ply",
            "only binary_little_endian is supported",
        ));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::format("ply", "missing vertex count"))?;
    let mut r = Reader::new(&bytes[split + END.len()..], "ply");
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let position = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
        let c = r.take(3)?;
        points.push(ColoredPoint {
            position,
            color: [c[0], c[1], c[2]],
        });
    }
    r.finish()?;
    Ok(points)
}

pub fn write_ply(path: &Path, points: &[ColoredPoint]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ply(points))
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- DTFH / DTFC

fn push_header(out: &mut Vec<u8>, magic: &[u8; 4], rows: usize, cols: usize, axis: &TimeAxis) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&(axis.num_bins() as u32).to_le_bytes());
    out.extend_from_slice(&axis.bin_width().to_le_bytes());
}

fn read_header(r: &mut Reader, magic: &[u8; 4]) -> Result<(usize, usize, TimeAxis)> {
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::format(r.kind, format!("bad magic {found:?}")));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::format(
            r.kind,
            format!("unsupported version {version}"),
        ));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let k = r.u32()? as usize;
    let t0 = r.f64()?;
    let axis = TimeAxis::new(k, t0).map_err(|e| Error::format(r.kind, e.to_string()))?;
    Ok((rows, cols, axis))
}

/// Encodes a histogram grid. Every histogram must share one time axis.
pub fn encode_dtfh(grid: &Raster<Histogram>) -> Result<Vec<u8>> {
    let axis = grid
        .data()
        .first()
        .map(|h| *h.axis())
        .ok_or_else(|| Error::ShapeMismatch("empty histogram grid".into()))?;
    let mut out = Vec::with_capacity(DTFH_HEADER_LEN + grid.len() * axis.num_bins() * 4);
    push_header(&mut out, DTFH_MAGIC, grid.height(), grid.width(), &axis);
    for h in grid.data() {
        if *h.axis() != axis {
            return Err(Error::AxisMismatch {
                left: format!("{axis:?}"),
                right: format!("{:?}", h.axis()),
            });
        }
        for &m in h.mass() {
            out.extend_from_slice(&(m as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dtfh(bytes: &[u8]) -> Result<Raster<Histogram>> {
    let mut r = Reader::new(bytes, "dtfh");
    let (rows, cols, axis) = read_header(&mut r, DTFH_MAGIC)?;
    let k = axis.num_bins();
    let mut hists = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let mut mass = Vec::with_capacity(k);
        for _ in 0..k {
            mass.push(r.f32()? as f64);
        }
        hists.push(Histogram::new(axis, mass).map_err(|e| Error::format("dtfh", e.to_string()))?);
    }
    r.finish()?;
    Raster::from_vec(cols, rows, hists)
}

/// Encodes a compressed grid. Every cell must share one axis and section count.
///
/// Raw peak-bin masses are not stored; [`decode_dtfc`] recovers them as the
/// mass of the compressed bin that contains each peak.
pub fn encode_dtfc(grid: &Raster<CompressedHistogram>) -> Result<Vec<u8>> {
    let first = grid
        .data()
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty compressed grid".into()))?;
    let (axis, m) = (first.axis, first.section_count());
    if axis.num_bins() > u16::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "{} bins do not fit u16 edges",
            axis.num_bins()
        )));
    }
    let mut out = Vec::with_capacity(DTFC_HEADER_LEN + grid.len() * (2 * (2 * m + 1) + 12 * m));
    push_header(&mut out, DTFC_MAGIC, grid.height(), grid.width(), &axis);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for c in grid.data() {
        if c.axis != axis || c.section_count() != m {
            return Err(Error::ShapeMismatch(
                "compressed grid mixes axes or section counts".into(),
            ));
        }
        for &e in &c.edges {
            out.extend_from_slice(&(e as u16).to_le_bytes());
        }
        for &v in &c.mass {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &d in &c.peak_depths {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dtfc(bytes: &[u8]) -> Result<Raster<CompressedHistogram>> {
    let mut r = Reader::new(bytes, "dtfc");
    let (rows, cols, axis) = read_header(&mut r, DTFC_MAGIC)?;
    let m = r.u32()? as usize;
    if m == 0 || 2 * m > axis.num_bins() {
        return Err(Error::format("dtfc", format!("bad section count {m}")));
    }
    let mut cells = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let edges = (0..=2 * m)
            .map(|_| r.u16().map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        if edges.windows(2).any(|w| w[0] > w[1]) || edges[2 * m] != axis.num_bins() {
            return Err(Error::format("dtfc", "edges not increasing to K"));
        }
        let mass = (0..2 * m)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let peak_depths = (0..m)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let peak_bins: Vec<usize> = peak_depths
            .iter()
            .map(|&d| {
                ((d / axis.depth_per_bin()).floor().max(0.0) as usize).min(axis.num_bins() - 1)
            })
            .collect();
        // a peak on its section's left boundary lies in the first bin of the pair
        let peak_masses = (0..m)
            .map(|j| {
                if peak_bins[j] < edges[2 * j + 1] {
                    mass[2 * j]
                } else {
                    mass[2 * j + 1]
                }
            })
            .collect();
        cells.push(CompressedHistogram {
            axis,
            edges,
            mass,
            peak_bins,
            peak_depths,
            peak_masses,
        });
    }
    r.finish()?;
    Raster::from_vec(cols, rows, cells)
}

macro_rules! file_pair {
    ($write:ident, $read:ident, $enc:ident, $dec:ident, $t:ty) => {
        pub fn $write(path: &Path, grid: &Raster<$t>) -> Result<()> {
            write_file(path, &$enc(grid)?)
        }

        pub fn $read(path: &Path) -> Result<Raster<$t>> {
            $dec(&read_file(path)?)
        }
    };
}

file_pair!(write_dtfh, read_dtfh, encode_dtfh, decode_dtfh, Histogram);
file_pair!(
    write_dtfc,
    read_dtfc,
    encode_dtfc,
    decode_dtfc,
    CompressedHistogram
);
