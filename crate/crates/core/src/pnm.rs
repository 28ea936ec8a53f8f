//! Binary PGM (masks, confidence maps) and PPM (images) with an optional header comment.

use std::path::Path;

use crate::error::{Error, Result};
use crate::files::{read, write_atomic};
use crate::refinement::ConfidenceMap;
use crate::tensor::{BinaryMask, Tensor};

/// A decoded 8-bit image with 1 (gray) or 3 (RGB) channels, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub comment: Option<String>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n").into_bytes();
        if let Some(c) = &self.comment {
            for line in c.lines() {
                out.extend_from_slice(format!("# {line}\n").as_bytes());
            }
        }
        out.extend_from_slice(format!("{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut comments = Vec::new();
        let mut token = |pos: &mut usize| -> Result<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    let start = *pos + 1;
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    comments.push(String::from_utf8_lossy(&bytes[start..*pos]).trim().to_string());
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(Error::Format("truncated PNM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        let channels = match token(&mut pos)?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Format(format!("unsupported PNM type {m}"))),
        };
        let num = |s: String| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PNM header field {s:?}")))
        };
        let width = num(token(&mut pos)?)?;
        let height = num(token(&mut pos)?)?;
        let maxval = num(token(&mut pos)?)?;
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PNM is supported, maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * channels;
        if width == 0 || height == 0 || bytes.len() < pos + n {
            return Err(Error::Format("PNM raster is truncated".into()));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            pixels: bytes[pos..pos + n].to_vec(),
            comment: if comments.is_empty() { None } else { Some(comments.join("\n")) },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read(path)?)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn mask_to_pnm(mask: &BinaryMask, comment: Option<&str>) -> Pnm {
    Pnm {
        width: mask.width(),
        height: mask.height(),
        channels: 1,
        pixels: mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        comment: comment.map(str::to_string),
    }
}

/// Gray masks: values of 128 and above are foreground.
pub fn pnm_to_mask(p: &Pnm) -> Result<BinaryMask> {
    if p.channels != 1 {
        return Err(Error::Format("masks must be grayscale PGM".into()));
    }
    BinaryMask::new(p.height, p.width, p.pixels.iter().map(|&v| (v >= 128) as u8).collect())
}

pub fn image_to_pnm(image: &Tensor, comment: Option<&str>) -> Result<Pnm> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
    }
    let mut pixels = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            pixels.push(quantize(image.data()[ch * h * w + i]));
        }
    }
    Ok(Pnm {
        width: w,
        height: h,
        channels: 3,
        pixels,
        comment: comment.map(str::to_string),
    })
}

/// `[3,H,W]` in `[0,1]`; gray input is replicated across channels.
pub fn pnm_to_image(p: &Pnm) -> Tensor {
    let hw = p.width * p.height;
    Tensor::from_fn(&[3, p.height, p.width], |i| {
        let (ch, px) = (i / hw, i % hw);
        let v = if p.channels == 3 {
            p.pixels[px * 3 + ch]
        } else {
            p.pixels[px]
        };
        v as f64 / 255.0
    })
}

/// Foreground probability as gray levels.
pub fn confidence_to_pnm(map: &ConfidenceMap, comment: Option<&str>) -> Pnm {
    Pnm {
        width: map.width(),
        height: map.height(),
        channels: 1,
        pixels: map.foreground().iter().map(|&v| quantize(v)).collect(),
        comment: comment.map(str::to_string),
    }
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    pnm_to_mask(&Pnm::load(path)?)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(pnm_to_image(&Pnm::load(path)?))
}
