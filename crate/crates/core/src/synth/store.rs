//! On-disk layout: `manifest.toml` (generator config and seed) next to
//! `blocks.bin`, a little-endian record file.
//!
//! `blocks.bin` starts with `LSRB`, a `u32` version, then `u32` count, side
//! and channels. Each record is `block_id u32, seed u64, split u8, z u16,
//! true_fraction f64`, the image as `C*H*W` byte levels and the mask as `H*W`
//! bytes.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{quadrant_fractions, Dataset, DatasetBlock, GeneratedBlock, GeneratorConfig, Split};
use crate::error::{LsrError, Result};
use crate::provenance;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const RECORDS_FILE: &str = "blocks.bin";
const MAGIC: &[u8; 4] = b"LSRB";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    tool: String,
    config_hash: String,
    /// Hex, since TOML integers are signed 64-bit.
    seed: String,
    n_blocks: usize,
    generator: GeneratorConfig,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LsrError::io(dir, e))?;
    let manifest = Manifest {
        format_version: VERSION,
        tool: provenance::TOOL.to_string(),
        config_hash: provenance::config_hash(&ds.config),
        seed: format!("{:#018x}", ds.seed),
        n_blocks: ds.blocks.len(),
        generator: ds.config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| LsrError::format("manifest", e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| LsrError::io(&mpath, e))?;

    let rpath = dir.join(RECORDS_FILE);
    let file = fs::File::create(&rpath).map_err(|e| LsrError::io(&rpath, e))?;
    let mut w = BufWriter::new(file);
    let side = ds.config.block_side;
    let channels = ds.config.channels;
    let mut buf = Vec::with_capacity(4 + 16);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, ds.blocks.len() as u32, side as u32, channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for b in &ds.blocks {
        if b.block.side != side || b.block.channels != channels {
            return Err(LsrError::format("dataset", format!("block {} has a different geometry", b.block_id)));
        }
        buf.extend_from_slice(&b.block_id.to_le_bytes());
        buf.extend_from_slice(&b.block.seed.to_le_bytes());
        buf.push(b.split.code());
        buf.extend_from_slice(&(b.low_res_label as u16).to_le_bytes());
        buf.extend_from_slice(&b.block.true_fraction.to_le_bytes());
        buf.extend(b.block.image.iter().map(|&v| (v * 255.0).round() as u8));
        buf.extend_from_slice(&b.block.gt_mask);
        w.write_all(&buf).map_err(|e| LsrError::io(&rpath, e))?;
        buf.clear();
    }
    w.write_all(&buf).map_err(|e| LsrError::io(&rpath, e))?;
    w.flush().map_err(|e| LsrError::io(&rpath, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LsrError::format(RECORDS_FILE, "truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| LsrError::io(&mpath, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| LsrError::format(MANIFEST_FILE, e.to_string()))?;
    if manifest.format_version != VERSION {
        return Err(LsrError::format(MANIFEST_FILE, format!("unsupported version {}", manifest.format_version)));
    }
    let seed = u64::from_str_radix(manifest.seed.trim_start_matches("0x"), 16)
        .map_err(|_| LsrError::format(MANIFEST_FILE, "bad seed"))?;
    let cfg = manifest.generator;
    cfg.validate()?;

    let rpath = dir.join(RECORDS_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&rpath)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LsrError::io(&rpath, e))?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(LsrError::format(RECORDS_FILE, "bad magic"));
    }
    if cur.u32()? != VERSION {
        return Err(LsrError::format(RECORDS_FILE, "unsupported version"));
    }
    let count = cur.u32()? as usize;
    let side = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    if count != manifest.n_blocks || side != cfg.block_side || channels != cfg.channels {
        return Err(LsrError::format(RECORDS_FILE, "header disagrees with manifest"));
    }
    let pixels = side * side;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let block_id = cur.u32()?;
        let bseed = u64::from_le_bytes(cur.array()?);
        let split = Split::from_code(cur.array::<1>()?[0])
            .ok_or_else(|| LsrError::format(RECORDS_FILE, "bad split code"))?;
        let z = u16::from_le_bytes(cur.array()?) as usize;
        if z >= cfg.bins.len() {
            return Err(LsrError::UnknownLabel(z));
        }
        let true_fraction = f64::from_le_bytes(cur.array()?);
        let image = cur.take(channels * pixels)?.iter().map(|&l| l as f64 / 255.0).collect();
        let gt_mask = cur.take(pixels)?.to_vec();
        if let Some(&bad) = gt_mask.iter().find(|&&m| m > 1) {
            return Err(LsrError::NonBinaryMask(bad));
        }
        let quadrant_fractions = quadrant_fractions(&gt_mask, side);
        blocks.push(DatasetBlock {
            block_id,
            split,
            block: GeneratedBlock {
                seed: bseed,
                side,
                channels,
                image,
                gt_mask,
                true_fraction,
                quadrant_fractions,
            },
            low_res_label: z,
        });
    }
    if cur.at != bytes.len() {
        return Err(LsrError::format(RECORDS_FILE, "trailing bytes"));
    }
    Ok(Dataset { config: cfg, seed, blocks })
}
