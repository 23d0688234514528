//! Dataset directory format.
//!
//! `manifest.jsonl` holds one JSON record per sample (question, answer id,
//! corner box, image file name). Each image is stored as the magic `VQLA`,
//! three little-endian `u32` (H, W, C), then `H·W·C` little-endian `f32`
//! in row-major `(H, W, C)` order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Image, VqlaSample};
use crate::boxes::BoundingBox;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"VQLA";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const HEADER_LEN: usize = 4 + 3 * 4;

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    question: String,
    answer_id: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    image: String,
}

pub fn encode_image(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * image.data.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for dim in [image.height, image.width, image.channels] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated magic".into(),
        });
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected \"VQLA\"", &bytes[..4]),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated header".into(),
        });
    }
    let dim = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice")) as usize
    };
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::Format {
            offset: 4,
            msg: format!("image dims {h}x{w}x{c} overflow"),
        })?;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated pixel data: need {expected} bytes"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            msg: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Image {
        height: h,
        width: w,
        channels: c,
        data,
    })
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_image(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

fn image_name(index: usize) -> String {
    format!("img_{index:06}.vqla")
}

pub fn write_dataset(samples: &[VqlaSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = image_name(i);
        write_image(&s.image, &dir.join(&name))?;
        let rec = ManifestRecord {
            question: s.question.clone(),
            answer_id: s.answer_id,
            bbox: s.bbox.to_array(),
            image: name,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VqlaSample>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| Error::Format {
                offset,
                msg: format!("{MANIFEST_FILE}: {e}"),
            })?;
            let [x1, y1, x2, y2] = rec.bbox;
            let bbox = BoundingBox::new(x1, y1, x2, y2).map_err(|e| Error::Format {
                offset,
                msg: format!("{MANIFEST_FILE}: {e}"),
            })?;
            let image_path = dir.join(&rec.image);
            let image = read_image(&image_path).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format {
                    offset,
                    msg: format!("{}: {msg}", image_path.display()),
                },
                other => other,
            })?;
            samples.push(VqlaSample {
                image,
                question: rec.question,
                answer_id: rec.answer_id,
                bbox,
            });
        }
        offset += line.len() as u64;
    }
    Ok(samples)
}
