//! HPYR single-file pyramid container.
//!
//! Little-endian layout:
//!
//! ```text
//! "HPYR" | version u16 | channels u8 | reserved u8 | tile_size u32 | level_count u16
//! per level:           width u64 | height u64
//! per level, per tile: offset u64 | byte_length u32   (offset is relative to the data section)
//! data section:        raw row-major tiles, channel-interleaved
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{half_up, PyramidImage};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HPYR";
pub const VERSION: u16 = 1;

const HEADER_LEN: u64 = 14;
const LEVEL_ENTRY_LEN: u64 = 16;
#[cfg(test)]
const TILE_ENTRY_LEN: u64 = 12;

pub fn write_file(pyr: &PyramidImage, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_to(pyr, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_to<W: Write>(pyr: &PyramidImage, out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[pyr.channels() as u8, 0])?;
    out.write_all(&pyr.tile_size().to_le_bytes())?;
    out.write_all(&(pyr.level_count() as u16).to_le_bytes())?;
    for level in pyr.levels() {
        out.write_all(&level.width.to_le_bytes())?;
        out.write_all(&level.height.to_le_bytes())?;
    }
    let mut offset = 0u64;
    for level in pyr.levels() {
        for tile in level.tiles() {
            out.write_all(&offset.to_le_bytes())?;
            out.write_all(&(tile.len() as u32).to_le_bytes())?;
            offset += tile.len() as u64;
        }
    }
    for level in pyr.levels() {
        for tile in level.tiles() {
            out.write_all(tile)?;
        }
    }
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<PyramidImage> {
    let bytes = std::fs::read(path)?;
    parse(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() as u64 {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos as usize..end as usize];
        self.pos = end;
        Ok(s)
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn parse(bytes: &[u8]) -> Result<PyramidImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HPYR\""));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let channels = cur.u8("channels")?;
    if channels != 1 && channels != 3 {
        return Err(Error::format(6, format!("channels must be 1 or 3, got {channels}")));
    }
    let reserved = cur.u8("reserved byte")?;
    if reserved != 0 {
        return Err(Error::format(7, "reserved byte must be zero"));
    }
    let tile_size = cur.u32("tile size")?;
    if tile_size == 0 {
        return Err(Error::format(8, "tile size is zero"));
    }
    let level_count = cur.u16("level count")?;
    if level_count == 0 {
        return Err(Error::format(12, "level count is zero"));
    }
    debug_assert_eq!(cur.pos, HEADER_LEN);

    let mut dims = Vec::with_capacity(level_count as usize);
    for l in 0..level_count as usize {
        let at = cur.pos;
        let w = cur.u64("level width")?;
        let h = cur.u64("level height")?;
        if w == 0 || h == 0 {
            return Err(Error::format(at, format!("level {l} has a zero dimension")));
        }
        if let Some(&(pw, ph)) = dims.last() {
            if w != half_up(pw) || h != half_up(ph) {
                return Err(Error::format(
                    at,
                    format!(
                        "level {l} is {w}x{h}, expected {}x{} from level {}",
                        half_up(pw),
                        half_up(ph),
                        l - 1
                    ),
                ));
            }
        }
        dims.push((w, h));
    }
    debug_assert_eq!(cur.pos, HEADER_LEN + LEVEL_ENTRY_LEN * level_count as u64);

    let ts = tile_size as u64;
    let c = channels as u64;
    let mut table = Vec::new();
    for &(w, h) in &dims {
        let tiles_x = w.div_ceil(ts);
        let tiles_y = h.div_ceil(ts);
        let mut entries = Vec::with_capacity((tiles_x * tiles_y) as usize);
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                let at = cur.pos;
                let offset = cur.u64("tile offset table")?;
                let len = cur.u32("tile offset table")? as u64;
                let tw = (w - tx * ts).min(ts);
                let th = (h - ty * ts).min(ts);
                if len != tw * th * c {
                    return Err(Error::format(
                        at,
                        format!("tile ({tx}, {ty}) declares {len} bytes, expected {}", tw * th * c),
                    ));
                }
                entries.push((at, offset, len));
            }
        }
        table.push(entries);
    }

    let data_start = cur.pos;
    let data = &bytes[data_start as usize..];
    let mut levels = Vec::with_capacity(dims.len());
    for (&(w, h), entries) in dims.iter().zip(table) {
        let mut tiles = Vec::with_capacity(entries.len());
        for (at, offset, len) in entries {
            let end = offset.checked_add(len).filter(|&e| e <= data.len() as u64);
            let Some(end) = end else {
                return Err(Error::format(at, "tile payload extends past end of file"));
            };
            tiles.push(data[offset as usize..end as usize].to_vec());
        }
        levels.push(PyramidImage::level_from_tiles(w, h, ts, tiles));
    }
    Ok(PyramidImage::from_parts(channels, tile_size, levels))
}
