//! The "TVIT" weight container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "TVIT"
//! version u16      currently 1
//! header  8 x u32  M, embed_dim, num_blocks, num_heads, num_classes, C, H, W
//! then named sections until EOF, each:
//!   name_len u16, name bytes, rank u8, extents rank x u32, f32 payload
//! ```
//!
//! Round-trips are bit-exact; floats travel as raw IEEE-754 bits.

use crate::error::{Error, Result};
use crate::vit::{VitConfig, VitParams};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TVIT";
const VERSION: u16 = 1;

fn section_shape(name: &str, cfg: &VitConfig) -> Vec<usize> {
    let d = cfg.embed_dim;
    match name {
        "patch_embed.w" => vec![cfg.patch_dim(), d],
        "patch_embed.b" | "class_token" => vec![d],
        "pos_embed" => vec![cfg.seq_len(), d],
        "final_ln.g" | "final_ln.b" => vec![d],
        "head.w" => vec![d, cfg.num_classes],
        "head.b" => vec![cfg.num_classes],
        _ => {
            // blockN.<role>
            let rest = name.split_once('.').map(|x| x.1).unwrap_or("");
            match rest {
                "ln1.g" | "ln1.b" | "ln2.g" | "ln2.b" => vec![d],
                "attn.wq.w" | "attn.wk.w" | "attn.wv.w" | "attn.wo.w" => vec![d, d],
                "attn.wq.b" | "attn.wk.b" | "attn.wv.b" | "attn.wo.b" => vec![d],
                "mlp.fc1.w" => vec![d, cfg.mlp_hidden],
                "mlp.fc1.b" => vec![cfg.mlp_hidden],
                "mlp.fc2.w" => vec![cfg.mlp_hidden, d],
                "mlp.fc2.b" => vec![d],
                _ => vec![],
            }
        }
    }
}

pub fn params_to_bytes(params: &VitParams<f32>) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.patch_size,
        cfg.embed_dim,
        cfg.num_blocks,
        cfg.num_heads,
        cfg.num_classes,
        cfg.channels,
        cfg.height,
        cfg.width,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    params.visit(&mut |name, data| {
        let shape = section_shape(name, cfg);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for e in &shape {
            out.extend_from_slice(&(*e as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format("truncated weight file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<VitParams<f32>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a TVIT weight file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported TVIT version {version}")));
    }
    let mut hdr = [0usize; 8];
    for h in &mut hdr {
        *h = r.u32()? as usize;
    }
    let [m, d, l, heads, nc, c, h, w] = hdr;

    let mut sections: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    while !r.done() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("non-utf8 section name".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if sections.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate section {name:?}")));
        }
    }

    let mlp_hidden = sections
        .get("block0.mlp.fc1.w")
        .and_then(|(s, _)| s.get(1).copied())
        .ok_or_else(|| Error::Format("missing block0.mlp.fc1.w section".into()))?;
    let cfg = VitConfig {
        channels: c,
        height: h,
        width: w,
        patch_size: m,
        embed_dim: d,
        num_blocks: l,
        num_heads: heads,
        mlp_hidden,
        num_classes: nc,
    };
    cfg.validate().map_err(|e| Error::Format(format!("bad header: {e}")))?;

    let mut params = VitParams::<f32>::zeros(cfg)?;
    let mut err: Option<Error> = None;
    let mut used = 0usize;
    params.visit_mut(&mut |name, dst| {
        if err.is_some() {
            return;
        }
        match sections.get(name) {
            None => err = Some(Error::Format(format!("missing section {name:?}"))),
            Some((shape, data)) => {
                let want = section_shape(name, &cfg);
                if *shape != want {
                    err = Some(Error::Format(format!(
                        "section {name:?} has extents {shape:?}, expected {want:?}"
                    )));
                } else {
                    dst.copy_from_slice(data);
                    used += 1;
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != sections.len() {
        return Err(Error::Format(format!(
            "{} unrecognized sections in weight file",
            sections.len() - used
        )));
    }
    Ok(params)
}

pub fn save_params(params: &VitParams<f32>, path: &Path) -> Result<()> {
    crate::report::write_atomic(path, &params_to_bytes(params))
}

pub fn load_params(path: &Path) -> Result<VitParams<f32>> {
    params_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> VitParams<f32> {
        let cfg = VitConfig {
            channels: 2,
            height: 8,
            width: 8,
            patch_size: 4,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_hidden: 24,
            num_classes: 5,
        };
        VitParams::<f32>::init(cfg, 99).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let params = sample_params();
        let bytes = params_to_bytes(&params);
        let back = params_from_bytes(&bytes).unwrap();
        assert_eq!(back, params);
        // and the re-serialization is byte-identical
        assert_eq!(params_to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let params = sample_params();
        let mut bytes = params_to_bytes(&params);
        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(params_from_bytes(&broken).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(params_from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_missing_section() {
        let params = sample_params();
        let bytes = params_to_bytes(&params);
        // Drop the trailing section (head.b) entirely.
        let cut = bytes.len() - (2 + "head.b".len() + 1 + 4 + 4 * params.config.num_classes);
        let err = params_from_bytes(&bytes[..cut]).unwrap_err();
        assert!(err.to_string().contains("head.b"), "{err}");
    }
}
