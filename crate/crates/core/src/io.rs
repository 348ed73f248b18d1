//! Little-endian binary containers.
//!
//! | magic  | contents            | after the 8-byte header                         |
//! |--------|---------------------|-------------------------------------------------|
//! | `HSC1` | hyperspectral cube  | `nx ny nλ` (u32), f32 payload                   |
//! | `HSR1` | RGB image           | `nx ny 3` (u32), f32 payload                    |
//! | `HSM1` | CASSI measurement   | `nx wy ny nλ d` (u32), f32 payload              |
//! | `HSK1` | coded mask          | `nx ny 1` (u32), binary flag (u8), f32 payload  |
//! | `HSP1` | parameter store     | entry count, then name/rank/dims/f32 per entry  |
//!
//! The header is the magic, a u16 version (1) and two reserved zero bytes.
//! Payloads are channel-outermost, row-major. Values are stored as f32, so
//! only f32-representable data round-trips bit-exactly.
//!
//! Files are written to a sibling temporary and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::CodedMask;
use crate::nn::params::ModelParams;
use crate::nn::tape::Tensor;
use crate::optics::{CassiMeasurement, Dispersion};
use crate::spectral::{validate_cube, HyperspectralCube, RgbImage};

pub const VERSION: u16 = 1;

/// Largest payload (in values) a header may declare.
const MAX_VALUES: u64 = 1 << 32;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&[0, 0]);
        Writer { buf }
    }

    fn u32(&mut self, v: usize, field: &'static str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::format(field, format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32s(&mut self, data: &[f64]) {
        self.buf.reserve(4 * data.len());
        for &v in data {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::format("magic", "bad magic"));
        }
        let mut r = Reader { buf, pos: 4 };
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        r.take(2, "reserved")?;
        Ok(r)
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            let detail = if field == "payload" {
                "truncated payload".to_string()
            } else {
                format!("file ends inside {field}")
            };
            return Err(Error::format(field, detail));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(4 * n, "payload")?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Product of declared dimensions, refusing overflow and absurd sizes.
fn volume(dims: &[usize]) -> Result<usize> {
    let mut n: u64 = 1;
    for &d in dims {
        n = n
            .checked_mul(d as u64)
            .filter(|&n| n <= MAX_VALUES)
            .ok_or_else(|| Error::format("dims", format!("dimension overflow in {dims:?}")))?;
    }
    usize::try_from(n).map_err(|_| Error::format("dims", format!("dimension overflow in {dims:?}")))
}

/// Writes `bytes` to a temporary next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::param(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn encode_cube(cube: &HyperspectralCube) -> Result<Vec<u8>> {
    if let Err(v) = validate_cube(cube) {
        return Err(Error::param(format!("cannot save an invalid cube: {}", v[0])));
    }
    let mut w = Writer::new(b"HSC1");
    w.u32(cube.nx, "nx")?;
    w.u32(cube.ny, "ny")?;
    w.u32(cube.bands, "nλ")?;
    w.f32s(&cube.data);
    Ok(w.buf)
}

pub fn decode_cube(bytes: &[u8]) -> Result<HyperspectralCube> {
    let mut r = Reader::open(bytes, b"HSC1")?;
    let (nx, ny, bands) = (r.u32("nx")?, r.u32("ny")?, r.u32("nλ")?);
    let n = volume(&[nx, ny, bands])?;
    let data = r.f32s(n)?;
    r.finish()?;
    let cube = HyperspectralCube { nx, ny, bands, data };
    if let Err(v) = validate_cube(&cube) {
        return Err(Error::format("payload", v[0].to_string()));
    }
    Ok(cube)
}

pub fn save_cube(cube: &HyperspectralCube, path: &Path) -> Result<()> {
    write_atomic(path, &encode_cube(cube)?)
}

pub fn load_cube(path: &Path) -> Result<HyperspectralCube> {
    decode_cube(&fs::read(path)?)
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut w = Writer::new(b"HSR1");
    w.u32(img.nx, "nx")?;
    w.u32(img.ny, "ny")?;
    w.u32(3, "channels")?;
    w.f32s(&img.data);
    Ok(w.buf)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let mut r = Reader::open(bytes, b"HSR1")?;
    let (nx, ny, c) = (r.u32("nx")?, r.u32("ny")?, r.u32("channels")?);
    if c != 3 {
        return Err(Error::format(
            "channels",
            format!("RGB images have 3 channels, got {c}"),
        ));
    }
    let data = r.f32s(volume(&[nx, ny, 3])?)?;
    r.finish()?;
    RgbImage::from_vec(nx, ny, data)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_rgb(img)?)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&fs::read(path)?)
}

/// Only linear dispersion fits the header; offset tables are refused.
pub fn encode_measurement(meas: &CassiMeasurement) -> Result<Vec<u8>> {
    let d = meas
        .dispersion
        .step()
        .ok_or_else(|| Error::format("d", "offset-table dispersion cannot be stored in HSM1"))?;
    let mut w = Writer::new(b"HSM1");
    w.u32(meas.nx, "nx")?;
    w.u32(meas.width, "wy")?;
    w.u32(meas.ny, "ny")?;
    w.u32(meas.bands, "nλ")?;
    w.u32(d, "d")?;
    w.f32s(&meas.data);
    Ok(w.buf)
}

pub fn decode_measurement(bytes: &[u8]) -> Result<CassiMeasurement> {
    let mut r = Reader::open(bytes, b"HSM1")?;
    let (nx, wy, ny, bands, d) = (r.u32("nx")?, r.u32("wy")?, r.u32("ny")?, r.u32("nλ")?, r.u32("d")?);
    if bands == 0 {
        return Err(Error::format("nλ", "zero bands"));
    }
    let expected = (bands as u64 - 1)
        .checked_mul(d as u64)
        .and_then(|s| s.checked_add(ny as u64))
        .ok_or_else(|| Error::format("dims", "dimension overflow"))?;
    if wy as u64 != expected {
        return Err(Error::format("wy", format!("width {wy} ≠ ny + d·(nλ−1) = {expected}")));
    }
    let data = r.f32s(volume(&[nx, wy])?)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("payload", "non-finite measurement value"));
    }
    Ok(CassiMeasurement {
        nx,
        width: wy,
        ny,
        bands,
        dispersion: Dispersion::Linear(d),
        data,
    })
}

pub fn save_measurement(meas: &CassiMeasurement, path: &Path) -> Result<()> {
    write_atomic(path, &encode_measurement(meas)?)
}

pub fn load_measurement(path: &Path) -> Result<CassiMeasurement> {
    decode_measurement(&fs::read(path)?)
}

pub fn encode_mask(mask: &CodedMask) -> Result<Vec<u8>> {
    let mut w = Writer::new(b"HSK1");
    w.u32(mask.nx, "nx")?;
    w.u32(mask.ny, "ny")?;
    w.u32(1, "nλ")?;
    w.buf.push(mask.binary as u8);
    w.f32s(&mask.data);
    Ok(w.buf)
}

pub fn decode_mask(bytes: &[u8]) -> Result<CodedMask> {
    let mut r = Reader::open(bytes, b"HSK1")?;
    let (nx, ny, c) = (r.u32("nx")?, r.u32("ny")?, r.u32("nλ")?);
    if c != 1 {
        return Err(Error::format("nλ", format!("masks have one plane, got {c}")));
    }
    let flag = r.take(1, "binary")?[0];
    if flag > 1 {
        return Err(Error::format("binary", format!("flag byte {flag}")));
    }
    let data = r.f32s(volume(&[nx, ny])?)?;
    r.finish()?;
    let mask = CodedMask::from_vec(nx, ny, data).map_err(|e| Error::format("payload", e.to_string()))?;
    if flag == 1 && !mask.binary {
        return Err(Error::format("binary", "flag set but values are not all 0 or 1"));
    }
    Ok(CodedMask {
        binary: flag == 1,
        ..mask
    })
}

pub fn save_mask(mask: &CodedMask, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mask(mask)?)
}

pub fn load_mask(path: &Path) -> Result<CodedMask> {
    decode_mask(&fs::read(path)?)
}

pub fn encode_params(params: &ModelParams) -> Result<Vec<u8>> {
    let mut w = Writer::new(b"HSP1");
    w.u32(params.len(), "entries")?;
    for (name, e) in params.iter() {
        w.u32(name.len(), "name")?;
        w.buf.extend_from_slice(name.as_bytes());
        w.u32(e.value.shape.len(), "rank")?;
        for &d in &e.value.shape {
            w.u32(d, "dims")?;
        }
        w.f32s(&e.value.data);
    }
    Ok(w.buf)
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::open(bytes, b"HSP1")?;
    let count = r.u32("entries")?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let len = r.u32("name")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("name", "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(Error::format("rank", format!("{name}: rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(volume(&dims)?)?;
        if params.contains(&name) {
            return Err(Error::format("name", format!("duplicate entry {name}")));
        }
        params
            .insert(name, Tensor::new(dims, data)?)
            .map_err(|e| Error::format("payload", e.to_string()))?;
    }
    r.finish()?;
    Ok(params)
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(params)?)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    decode_params(&fs::read(path)?)
}

/// `epoch,loss,lr` rows, epochs numbered from 1.
pub fn loss_csv(trace: &[(f64, f64)]) -> String {
    let mut s = String::from("epoch,loss,lr\n");
    for (i, (loss, lr)) in trace.iter().enumerate() {
        s.push_str(&format!("{},{loss:e},{lr:e}\n", i + 1));
    }
    s
}
