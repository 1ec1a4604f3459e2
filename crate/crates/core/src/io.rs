//! File formats: binary pixmaps (P6 colour, P5 grayscale), the `EFRW`
//! weight file and the `EFRT` tensor archive.
//!
//! `EFRW` layout, all integers little-endian:
//!
//! | field            | encoding                                   |
//! |------------------|--------------------------------------------|
//! | magic            | `b"EFRW"`                                  |
//! | version          | u16, currently 1                           |
//! | config           | u32 byte length + UTF-8 JSON `ModelConfig` |
//! | per schema entry | u16 name length + name, u8 rank, u32 dims, f32 values |
//!
//! Entries appear in model schema order and the file must end exactly after
//! the last one. Values are stored as 32-bit floats: 64-bit models are
//! narrowed with round-to-nearest-even on save, so their round-trip is lossy.
//!
//! `EFRT` is a named-tensor archive with a JSON metadata blob and f64
//! payloads, used for optimizer state and feature-extractor weights:
//! magic, u16 version, u32 + JSON metadata, u32 entry count, then entries of
//! u16 name length + name, four u32 dims, f64 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"EFRW";
pub const WEIGHTS_VERSION: u16 = 1;
pub const ARCHIVE_MAGIC: &[u8; 4] = b"EFRT";
pub const ARCHIVE_VERSION: u16 = 1;

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::format(
                at,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(expect)),
            ));
        }
        Ok(())
    }

    fn version(&mut self, supported: u16) -> Result<()> {
        let at = self.pos;
        let v = self.u16("version")?;
        if v != supported {
            return Err(Error::format(at, format!("unsupported version {v} (this build reads {supported})")));
        }
        Ok(())
    }

    fn name(&mut self) -> Result<(usize, String)> {
        let len = self.u16("name length")? as usize;
        let at = self.pos;
        let bytes = self.take(len, "name")?;
        let name = std::str::from_utf8(bytes).map_err(|_| Error::format(at, "name is not UTF-8"))?;
        Ok((at, name.to_owned()))
    }

    fn json<D: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<D> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let bytes = self.take(len, what)?;
        serde_json::from_slice(bytes).map_err(|e| Error::format(at, format!("{what}: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes after the last entry", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::at_path(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::at_path(path))
}

// ---------------------------------------------------------------------------
// Pixmaps

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Parses one whitespace-delimited header integer, skipping `#` comments.
fn header_int(r: &mut Reader<'_>, what: &str) -> Result<(usize, usize)> {
    loop {
        match r.buf.get(r.pos) {
            Some(&b) if is_space(b) => r.pos += 1,
            Some(b'#') => {
                while r.buf.get(r.pos).is_some_and(|&b| b != b'\n') {
                    r.pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = r.pos;
    while r.buf.get(r.pos).is_some_and(u8::is_ascii_digit) {
        r.pos += 1;
    }
    if start == r.pos {
        return Err(Error::format(start, format!("expected {what}")));
    }
    std::str::from_utf8(&r.buf[start..r.pos])
        .unwrap()
        .parse()
        .map(|v| (start, v))
        .map_err(|_| Error::format(start, format!("{what} out of range")))
}

/// Decodes a binary P5 or P6 stream with maxval 255 into `[1, c, h, w]`.
pub fn decode_pnm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(2, "magic")?;
    let c = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected P6 or P5", String::from_utf8_lossy(magic)),
            ))
        }
    };
    let (w_at, w) = header_int(&mut r, "width")?;
    let (_, h) = header_int(&mut r, "height")?;
    if w == 0 || h == 0 {
        return Err(Error::format(w_at, format!("image is {w}x{h}; both sides must be >= 1")));
    }
    let (max_at, maxval) = header_int(&mut r, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(max_at, format!("maxval {maxval} is not 255")));
    }
    match r.buf.get(r.pos) {
        Some(&b) if is_space(b) => r.pos += 1,
        _ => return Err(Error::format(r.pos, "missing whitespace after maxval")),
    }
    let payload = r.take(c * w * h, "pixel payload")?;
    r.finish()?;
    let scale = T::of(255.0);
    Ok(Tensor::from_fn([1, c, h, w], |_, ch, y, x| {
        T::of(payload[(y * w + x) * c + ch] as f64) / scale
    }))
}

/// `round(x * 255)` with halves rounded up, clamped to `[0, 255]`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let x = (v.to_f64_lossy() * 255.0 + 0.5).floor();
    if x.is_nan() {
        0
    } else {
        x.clamp(0.0, 255.0) as u8
    }
}

/// Encodes a `[1, 3, h, w]` (P6) or `[1, 1, h, w]` (P5) tensor with a
/// canonical `P6\n{w} {h}\n255\n` header.
pub fn encode_pnm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    let magic = match s.c {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::shape("write_image", "c", format!("{c} channels; expected 3 or 1"))),
    };
    if s.n != 1 {
        return Err(Error::shape("write_image", "n", format!("batch of {}; expected 1", s.n)));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("write_image", "h/w", "empty image"));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.numel());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                out.push(quantize(img.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

/// Reads a P6 file as `[1, 3, h, w]` with values `byte / 255`. P5 files are
/// read as `[1, 1, h, w]`.
pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode_pnm(&read_file(path)?).map_err(|e| with_path(e, path))
}

pub fn write_image<T: Scalar>(img: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pnm(img)?)
}

/// Writes a single plane as P5 after min-max normalization to `[0, 1]`.
/// A flat plane is written as mid-gray.
pub fn write_gray_normalized<T: Scalar>(plane: &[T], h: usize, w: usize, path: impl AsRef<Path>) -> Result<()> {
    if plane.len() != h * w {
        return Err(Error::shape("write_gray", "h/w", format!("{} values for {h}x{w}", plane.len())));
    }
    let vals: Vec<f64> = plane.iter().map(|v| v.to_f64_lossy()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm = vals
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.5 })
        .collect();
    write_image(&Tensor::<f64>::new([1, 1, h, w], norm)?, path)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, reason } => Error::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Weight files

pub fn encode_weights<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    for (spec, t) in model.schema().iter().zip(model.params()) {
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(spec.dims.len() as u8);
        for &d in &spec.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            let narrowed = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    r.version(WEIGHTS_VERSION)?;
    let cfg_at = r.pos + 4;
    let config: ModelConfig = r.json("config")?;
    config
        .validate()
        .map_err(|e| Error::format(cfg_at, format!("config: {e}")))?;
    let schema = crate::model::schema(&config);
    let mut params = Vec::with_capacity(schema.len());
    for spec in &schema {
        let (at, name) = r.name()?;
        if name != spec.name {
            return Err(Error::format(at, format!("entry `{name}` where the schema expects `{}`", spec.name)));
        }
        let rank_at = r.pos;
        let rank = r.u8("rank")? as usize;
        if rank != spec.dims.len() {
            return Err(Error::format(
                rank_at,
                format!("`{name}` has rank {rank}, schema expects {}", spec.dims.len()),
            ));
        }
        for (i, &want) in spec.dims.iter().enumerate() {
            let dim_at = r.pos;
            let d = r.u32("dims")? as usize;
            if d != want {
                return Err(Error::format(
                    dim_at,
                    format!("`{name}` dim {i} is {d}, schema expects {want}"),
                ));
            }
        }
        let raw = r.take(spec.numel() * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        params.push(Tensor::new(spec.shape(), data)?);
    }
    r.finish()?;
    Model::from_params(config, params)
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_weights(model)?)
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    decode_weights(&read_file(path)?).map_err(|e| with_path(e, path))
}

/// Loads weights and rejects a file whose architecture differs from `expected`.
pub fn load_weights_for<T: Scalar>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<T>> {
    let model = load_weights(path)?;
    let got = model.config();
    let checks: [(&'static str, String, String); 6] = [
        ("channels", got.channels.to_string(), expected.channels.to_string()),
        ("blocks", got.blocks.to_string(), expected.blocks.to_string()),
        ("scale", got.scale.to_string(), expected.scale.to_string()),
        ("activation", got.activation.name().into(), expected.activation.name().into()),
        ("attention", got.attention.name().into(), expected.attention.name().into()),
        ("in_channels", got.in_channels.to_string(), expected.in_channels.to_string()),
    ];
    for (field, g, e) in checks {
        if g != e {
            return Err(Error::config(field, format!("weights have {g}, expected {e}")));
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Tensor archives

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Archive<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive { meta, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("name `{name}` is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(ARCHIVE_MAGIC)?;
        r.version(ARCHIVE_VERSION)?;
        let meta = r.json("metadata")?;
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let (_, name) = r.name()?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("dims")? as usize;
            }
            let shape = Shape::from(dims);
            let bytes_needed = shape.numel().checked_mul(8).ok_or_else(|| Error::format(r.pos, "dims overflow"))?;
            let raw = r.take(bytes_needed, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap())))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Archive { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&read_file(path)?).map_err(|e| with_path(e, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 4,
            blocks: 1,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn white_pixel() {
        let t: Tensor<f32> = decode_pnm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 1));
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(-0.2f64), 0);
        assert_eq!(quantize(1.7f32), 255);
        let t = Tensor::<f64>::full([1, 3, 1, 2], 0.5);
        let back: Tensor<f64> = decode_pnm(&encode_pnm(&t).unwrap()).unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn header_comments_and_errors() {
        let t: Tensor<f64> = decode_pnm(b"P6 # c\n2 # w\n1\n255 \x00\x01\x02\x03\x04\x05").unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.at(0, 2, 0, 1), 5.0 / 255.0);
        let err = |b: &[u8]| match decode_pnm::<f64>(b).unwrap_err() {
            Error::Format { offset, .. } => offset,
            e => panic!("{e}"),
        };
        assert_eq!(err(b"P3\n1 1\n255\n\x00\x00\x00"), 0);
        assert_eq!(err(b"P6\n1 1\n65535\n\x00\x00\x00"), 7);
        assert_eq!(err(b"P6\n1 1\n255\n\x00\x00"), 11);
        assert_eq!(err(b"P6\n1 1\n255\n\x00\x00\x00\x00"), 14);
        assert_eq!(err(b"P6\n0 1\n255\n"), 3);
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let m = Model::<f32>::build(tiny_config()).unwrap();
        let bytes = encode_weights(&m).unwrap();
        let back: Model<f32> = decode_weights(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config().channels, 4);
    }

    #[test]
    fn weights_rejections() {
        let m = Model::<f32>::build(tiny_config()).unwrap();
        let good = encode_weights(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_weights::<f32>(&bad).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_weights::<f32>(&bad).unwrap_err().to_string().contains("unsupported version"));

        let cfg_len = u32::from_le_bytes(good[6..10].try_into().unwrap()) as usize;
        let first_name = 10 + cfg_len + 2;
        let mut bad = good.clone();
        bad[first_name] ^= 0x20;
        assert!(decode_weights::<f32>(&bad).unwrap_err().to_string().contains("schema expects"));

        let mut bad = good.clone();
        bad.push(0);
        assert!(decode_weights::<f32>(&bad).unwrap_err().to_string().contains("trailing"));

        assert!(decode_weights::<f32>(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn archive_roundtrip() {
        let mut a = Archive::<f32>::new(serde_json::json!({"step": 3}));
        a.push("m.0", Tensor::from_fn([1, 2, 2, 1], |_, c, y, _| 0.1 * (c + y) as f32));
        let back = Archive::<f32>::decode(&a.encode().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(Archive::<f32>::decode(&a.encode().unwrap()[..20]).is_err());
    }
}
