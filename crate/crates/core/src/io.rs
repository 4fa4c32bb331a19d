//! Image files, hashing, and the file-exchange denoiser adapter.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use sha2::{Digest, Sha256};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

fn input_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Input {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an 8- or 16-bit grayscale or RGB PNG/PGM/PPM into `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| input_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let to_model = |v: f64, max: f64| v / max * 2.0 - 1.0;
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| to_model(v as f64, 255.0)).collect()),
        DynamicImage::ImageLuma16(b) => (
            1,
            b.into_raw().into_iter().map(|v| to_model(v as f64, 65535.0)).collect(),
        ),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| to_model(v as f64, 255.0)).collect()),
        DynamicImage::ImageRgb16(b) => (
            3,
            b.into_raw().into_iter().map(|v| to_model(v as f64, 65535.0)).collect(),
        ),
        other => {
            return Err(input_err(
                path,
                format!(
                    "unsupported pixel format {:?}; expected 8/16-bit gray or RGB",
                    other.color()
                ),
            ))
        }
    };
    ImageTensor::new(h, w, channels, data)
}

/// [`load_image`] that also checks height and width.
pub fn load_image_expect(path: &Path, height: usize, width: usize) -> Result<ImageTensor> {
    let img = load_image(path)?;
    if (img.height(), img.width()) != (height, width) {
        return Err(input_err(
            path,
            format!("is {}x{}, expected {height}x{width}", img.height(), img.width()),
        ));
    }
    Ok(img)
}

/// Model value to 8-bit code: clamp, rescale, round half to even.
pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round_ties_even() as u8
}

/// The model-space image that survives a save/load round trip.
pub fn quantize(x: &ImageTensor) -> ImageTensor {
    x.map(|v| to_u8(v) as f64 / 255.0 * 2.0 - 1.0)
}

/// Writes an 8-bit image; the format follows the extension (PNG or PGM/PPM).
pub fn save_image(path: &Path, x: &ImageTensor) -> Result<()> {
    let (h, w, c) = x.shape();
    let raw: Vec<u8> = x.data().iter().map(|&v| to_u8(v)).collect();
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size matches"),
        ),
        3 => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size matches"),
        ),
        _ => {
            return Err(Error::validation(
                "channels",
                format!("cannot save a {c}-channel image"),
            ))
        }
    };
    dynamic
        .save(path)
        .map_err(|e| Error::External(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes a file atomically (temporary file plus rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const MESSAGE_MAGIC: &[u8; 4] = b"DIG2";
const HEADER_LEN: usize = 4 + 4 * 4;

/// Tensor exchange format: `DIG2`, `u32` H, W, C, t, then `f64` values,
/// all little-endian, in `(y, x, c)` order.
pub fn encode_message(x: &ImageTensor, t: u32) -> Vec<u8> {
    let (h, w, c) = x.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * x.len());
    out.extend_from_slice(MESSAGE_MAGIC);
    for v in [h as u32, w as u32, c as u32, t] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_message(bytes: &[u8]) -> Result<(ImageTensor, u32)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MESSAGE_MAGIC {
        return Err(Error::External("malformed message header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (h, w, c, t) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::External("message dimensions overflow".into()))?;
    if bytes.len() != HEADER_LEN + 8 * n {
        return Err(Error::External(format!(
            "message payload is {} bytes, header implies {}",
            bytes.len() - HEADER_LEN,
            8 * n
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let x = ImageTensor::new(h, w, c, data).map_err(|e| Error::External(e.to_string()))?;
    Ok((x, t))
}

pub fn request_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("request-{id:06}.bin"))
}

pub fn response_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("response-{id:06}.bin"))
}

/// Denoiser served by another process through files in a directory.
///
/// Each call writes `request-NNNNNN.bin` holding `x_t` and the native
/// timestep, then waits for `response-NNNNNN.bin` holding the noise estimate.
#[derive(Debug)]
pub struct ExternalDenoiser {
    dir: PathBuf,
    timeout: Duration,
    poll: Duration,
    next_id: AtomicU64,
}

impl ExternalDenoiser {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(dir: impl Into<PathBuf>, timeout: Duration) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(input_err(&dir, "exchange directory does not exist"));
        }
        Ok(ExternalDenoiser {
            dir,
            timeout,
            poll: Duration::from_millis(1),
            next_id: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl Denoiser for ExternalDenoiser {
    fn predict_eps(&self, x_t: &ImageTensor, t: usize, s: &NoiseSchedule) -> Result<ImageTensor> {
        s.check_t(t)?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        write_atomic(
            &request_path(&self.dir, id),
            &encode_message(x_t, s.source_step(t) as u32),
        )?;
        let resp = response_path(&self.dir, id);
        let start = Instant::now();
        loop {
            if resp.exists() {
                let bytes = fs::read(&resp).map_err(|e| Error::io(&resp, e))?;
                let _ = fs::remove_file(&resp);
                let (eps, _) = decode_message(&bytes)?;
                if eps.shape() != x_t.shape() {
                    return Err(Error::External(format!(
                        "response shape {:?} does not match request {:?}",
                        eps.shape(),
                        x_t.shape()
                    )));
                }
                return Ok(eps);
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::External(format!(
                    "no response {} within {:?}",
                    resp.display(),
                    self.timeout
                )));
            }
            std::thread::sleep(self.poll);
        }
    }
}
