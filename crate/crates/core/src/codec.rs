//! Binary bundle container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "WSAB" | u32 version=1 | u32 image_w | u32 image_h | u16 patch_size | u16 grid_h | u16 grid_w
//! | u32 d_vit | u32 n_tokens | u8 flags | u32 caption_len | caption bytes
//! | u16 l_vl | u16 l_vit | u8 head_reduction
//! | f32 keys[grid_h * grid_w * d_vit]          (row = patch index)
//! | per token: u16 text_len | text | u32 char_start | u32 char_end
//! |            f32 attention[N_P + 1] | f32 gradient[N_P + 1]
//! ```
//!
//! Values are widened to f64 on read and narrowed to f32 on write.

use std::path::Path;

use crate::bundle::{FeatureBundle, HeadReduction, KeyMatrix, Provenance, TokenRecord};
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;

pub const MAGIC: &[u8; 4] = b"WSAB";
pub const VERSION: u32 = 1;

pub fn encode_bundle(b: &FeatureBundle) -> Result<Vec<u8>> {
    b.validate()?;
    let g = &b.geometry;
    let np = g.num_patches();
    let mut out = Vec::with_capacity(64 + 4 * (b.vit_keys.as_slice().len() + 2 * (np + 1) * b.tokens.len()));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, g.image_w());
    put_u32(&mut out, g.image_h());
    put_u16(&mut out, g.patch_size());
    put_u16(&mut out, g.grid_h() as u16);
    put_u16(&mut out, g.grid_w() as u16);
    put_u32(&mut out, narrow_len(b.vit_keys.dim(), "d_vit")?);
    put_u32(&mut out, narrow_len(b.tokens.len(), "token count")?);
    out.push(b.flags);
    put_u32(&mut out, narrow_len(b.caption.len(), "caption length")?);
    out.extend_from_slice(b.caption.as_bytes());
    put_u16(&mut out, b.provenance.l_vl);
    put_u16(&mut out, b.provenance.l_vit);
    out.push(b.provenance.head_reduction.tag());
    put_f32s(&mut out, b.vit_keys.as_slice())?;
    for (t, tok) in b.tokens.iter().enumerate() {
        let len = u16::try_from(tok.text.len())
            .map_err(|_| Error::Argument(format!("token {t} text exceeds 65535 bytes")))?;
        put_u16(&mut out, len);
        out.extend_from_slice(tok.text.as_bytes());
        put_u32(&mut out, tok.char_start);
        put_u32(&mut out, tok.char_end);
        put_f32s(&mut out, &tok.attention_row)?;
        put_f32s(&mut out, &tok.gradient_row)?;
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let image_w = r.u32("image_w")?;
    let image_h = r.u32("image_h")?;
    let patch_size = r.u16("patch_size")?;
    let grid_at = r.pos;
    let grid_h = r.u16("grid_h")?;
    let grid_w = r.u16("grid_w")?;
    let geometry = GridGeometry::new(image_w, image_h, patch_size).map_err(|e| Error::Format {
        offset: 8,
        message: e.to_string(),
    })?;
    if usize::from(grid_h) != geometry.grid_h() || usize::from(grid_w) != geometry.grid_w() {
        return Err(Error::Format {
            offset: grid_at as u64,
            message: format!(
                "grid {grid_h}x{grid_w} inconsistent with {image_w}x{image_h} at patch size {patch_size}"
            ),
        });
    }
    let d_vit = r.u32("d_vit")? as usize;
    if d_vit == 0 {
        return Err(Error::Format {
            offset: (r.pos - 4) as u64,
            message: "d_vit is zero".into(),
        });
    }
    let n_tokens = r.u32("n_tokens")? as usize;
    let flags = r.take(1, "flags")?[0];
    let caption_len = r.u32("caption length")? as usize;
    let caption = r.utf8(caption_len, "caption")?;
    let l_vl = r.u16("l_vl")?;
    let l_vit = r.u16("l_vit")?;
    let tag_at = r.pos;
    let tag = r.take(1, "head_reduction")?[0];
    let head_reduction = HeadReduction::from_tag(tag).ok_or(Error::Format {
        offset: tag_at as u64,
        message: format!("unknown head reduction tag {tag}"),
    })?;

    let np = geometry.num_patches();
    let n_keys = np.checked_mul(d_vit).ok_or(Error::Format {
        offset: 22,
        message: "key matrix size overflows".into(),
    })?;
    let keys = r.f32s(n_keys, "ViT keys")?;

    let mut tokens = Vec::with_capacity(n_tokens.min(4096));
    for t in 0..n_tokens {
        let ctx = |what: &str| format!("token {t} {what}");
        let len = r.u16(&ctx("text length"))? as usize;
        let text = r.utf8(len, &ctx("text"))?;
        let char_start = r.u32(&ctx("char_start"))?;
        let char_end = r.u32(&ctx("char_end"))?;
        let attention_row = r.f32s(np + 1, &ctx("attention row"))?;
        let gradient_row = r.f32s(np + 1, &ctx("gradient row"))?;
        tokens.push(TokenRecord {
            text,
            char_start,
            char_end,
            attention_row,
            gradient_row,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let bundle = FeatureBundle {
        geometry,
        caption,
        tokens,
        vit_keys: KeyMatrix::new(d_vit, keys)?,
        provenance: Provenance {
            l_vl,
            l_vit,
            head_reduction,
        },
        flags,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_bundle(b: &FeatureBundle, path: &Path) -> Result<()> {
    let bytes = encode_bundle(b)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_bundle(&bytes)
}

fn narrow_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Argument(format!("{what} {n} exceeds u32")))
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    for &v in values {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::Data(format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes_needed = n.checked_mul(4).ok_or(Error::Format {
            offset: self.pos as u64,
            message: format!("{what} size overflows"),
        })?;
        let at = self.pos;
        let raw = self.take(bytes_needed, what)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(k, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(Error::Data(format!(
                        "non-finite {what} value at byte {}",
                        at + 4 * k
                    )))
                }
            })
            .collect()
    }
}
