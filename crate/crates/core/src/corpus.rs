//! On-disk corpus: `index.json` plus 8-bit PNGs `t0/<id>.png`,
//! `t1/<id>.png` and `mask/<id>.png`.
//!
//! Image values are stored as `round(v·255)` and read back as `b/255`, so
//! a round trip quantises them. Masks are single-channel, 0 = unchanged and
//! 255 = changed, and round-trip exactly.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{
    derive_tile_label, split, ClassCounts, CorpusSpec, Image, Mask, Split, TileClass, TileId, TilePair, CHANNELS,
};

pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Initial,
    Pool,
    Test,
    /// Ignored-class tiles, kept on disk but never used.
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: TileId,
    pub class: TileClass,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusIndex {
    pub format_version: u32,
    pub tile_side: usize,
    /// Generator parameters, when the corpus is synthetic.
    pub spec: Option<CorpusSpec>,
    pub initial: ClassCounts,
    pub test: ClassCounts,
    pub split_seed: u64,
    pub tiles: Vec<IndexEntry>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub index: CorpusIndex,
    pub tiles: Vec<TilePair>,
}

impl Corpus {
    /// The split recorded by the split tags of the index.
    pub fn tagged_split(&self) -> Split {
        let mut out = Split {
            initial: Vec::new(),
            pool: Vec::new(),
            test: Vec::new(),
        };
        for (entry, tile) in self.index.tiles.iter().zip(&self.tiles) {
            match entry.split {
                SplitTag::Initial => out.initial.push(tile.clone()),
                SplitTag::Pool => out.pool.push(tile.clone()),
                SplitTag::Test => out.test.push(tile.clone()),
                SplitTag::Excluded => {}
            }
        }
        out
    }
}

pub(crate) fn encode_png(side: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, side as u32, side as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub(crate) fn write_png(path: &Path, side: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    fs::write(path, encode_png(side, color, data)?)?;
    Ok(())
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("expected 8-bit samples, got {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels: info.color_type.samples(),
        data: buf,
    })
}

fn check_side(d: &Decoded, side: usize) -> Result<()> {
    if d.width != side || d.height != side {
        return Err(Error::Shape(format!(
            "PNG is {}x{}, expected {side}x{side}",
            d.width, d.height
        )));
    }
    Ok(())
}

pub fn image_to_png(image: &Image) -> Result<Vec<u8>> {
    let side = image.side();
    let mut rgb = Vec::with_capacity(side * side * CHANNELS);
    for y in 0..side {
        for x in 0..side {
            for c in 0..CHANNELS {
                rgb.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    encode_png(side, png::ColorType::Rgb, &rgb)
}

pub fn image_from_png(bytes: &[u8], side: usize) -> Result<Image> {
    let d = decode_png(bytes)?;
    check_side(&d, side)?;
    if d.channels != CHANNELS {
        return Err(Error::Png(format!(
            "expected an RGB image, got {} channels",
            d.channels
        )));
    }
    let mut planar = vec![0.0; CHANNELS * side * side];
    for (p, px) in d.data.chunks(CHANNELS).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * side * side + p] = f64::from(v) / 255.0;
        }
    }
    Image::new(side, planar)
}

pub fn mask_to_png(mask: &Mask) -> Result<Vec<u8>> {
    let gray: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    encode_png(mask.side(), png::ColorType::Grayscale, &gray)
}

/// Decodes a mask PNG. Grey, grey+alpha, RGB and RGBA inputs are accepted
/// as long as every pixel's colour samples are all 0 or all 255; alpha is
/// ignored.
pub fn mask_from_png(bytes: &[u8], side: usize) -> Result<Mask> {
    let d = decode_png(bytes)?;
    check_side(&d, side)?;
    let colour = match d.channels {
        1 | 2 => 1,
        3 | 4 => 3,
        n => return Err(Error::Png(format!("unsupported channel count {n}"))),
    };
    let mut values = Vec::with_capacity(side * side);
    for px in d.data.chunks(d.channels) {
        let c = &px[..colour];
        let v = match c[0] {
            0 if c.iter().all(|&s| s == 0) => 0,
            255 if c.iter().all(|&s| s == 255) => 1,
            _ => {
                return Err(Error::NonBinaryMask(
                    c.iter().copied().find(|&s| s != 0 && s != 255).unwrap_or(c[0]),
                ))
            }
        };
        values.push(v);
    }
    Mask::new(side, values)
}

fn tile_path(dir: &Path, kind: &str, id: TileId) -> std::path::PathBuf {
    dir.join(kind).join(format!("{id}.png"))
}

/// Writes `tiles` (all with masks) and an index whose split tags come from
/// [`split`] with the given counts and seed.
pub fn write_corpus(
    dir: &Path,
    tiles: &[TilePair],
    spec: Option<&CorpusSpec>,
    initial: ClassCounts,
    test: ClassCounts,
    split_seed: u64,
) -> Result<CorpusIndex> {
    let Some(first) = tiles.first() else {
        return Err(Error::CorpusFormat("refusing to write an empty corpus".into()));
    };
    let side = first.side();
    let s = split(tiles, initial, test, split_seed)?;
    let tag_of = |id: TileId| {
        if s.initial.iter().any(|t| t.id == id) {
            SplitTag::Initial
        } else if s.test.iter().any(|t| t.id == id) {
            SplitTag::Test
        } else if s.pool.iter().any(|t| t.id == id) {
            SplitTag::Pool
        } else {
            SplitTag::Excluded
        }
    };
    for kind in ["t0", "t1", "mask"] {
        fs::create_dir_all(dir.join(kind))?;
    }
    let mut entries = Vec::with_capacity(tiles.len());
    for t in tiles {
        let mask = t.mask.as_ref().ok_or(Error::MissingMask(t.id))?;
        fs::write(tile_path(dir, "t0", t.id), image_to_png(&t.t0)?)?;
        fs::write(tile_path(dir, "t1", t.id), image_to_png(&t.t1)?)?;
        fs::write(tile_path(dir, "mask", t.id), mask_to_png(mask)?)?;
        entries.push(IndexEntry {
            id: t.id,
            class: derive_tile_label(mask),
            split: tag_of(t.id),
        });
    }
    let index = CorpusIndex {
        format_version: FORMAT_VERSION,
        tile_side: side,
        spec: spec.cloned(),
        initial,
        test,
        split_seed,
        tiles: entries,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<CorpusIndex> {
    let index: CorpusIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::CorpusFormat(format!(
            "unsupported format version {}",
            index.format_version
        )));
    }
    Ok(index)
}

/// Loads every tile listed in the index and checks its class against its mask.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let index = read_index(dir)?;
    let side = index.tile_side;
    let mut seen = HashSet::new();
    let mut tiles = Vec::with_capacity(index.tiles.len());
    for e in &index.tiles {
        if !seen.insert(e.id) {
            return Err(Error::DuplicateTile(e.id));
        }
        let t0 = image_from_png(&fs::read(tile_path(dir, "t0", e.id))?, side)?;
        let t1 = image_from_png(&fs::read(tile_path(dir, "t1", e.id))?, side)?;
        let mask = mask_from_png(&fs::read(tile_path(dir, "mask", e.id))?, side)?;
        let class = derive_tile_label(&mask);
        if class != e.class {
            return Err(Error::CorpusFormat(format!(
                "tile {} is indexed as {} but its mask says {class}",
                e.id, e.class
            )));
        }
        tiles.push(TilePair::new(e.id, t0, t1, Some(mask))?);
    }
    Ok(Corpus { index, tiles })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip_is_exact() {
        let m = Mask::new(3, vec![0, 1, 1, 0, 0, 1, 1, 1, 0]).unwrap();
        assert_eq!(mask_from_png(&mask_to_png(&m).unwrap(), 3).unwrap(), m);
    }

    #[test]
    fn rgba_masks_are_accepted_and_grey_levels_rejected() {
        let rgba: Vec<u8> = [0u8, 255, 255, 0].iter().flat_map(|&v| [v, v, v, 255]).collect();
        let png = encode_png(2, png::ColorType::Rgba, &rgba).unwrap();
        assert_eq!(mask_from_png(&png, 2).unwrap().data(), &[0, 1, 1, 0]);
        let grey = encode_png(2, png::ColorType::Grayscale, &[0, 128, 255, 0]).unwrap();
        assert!(matches!(mask_from_png(&grey, 2), Err(Error::NonBinaryMask(128))));
        let mixed: Vec<u8> = vec![255, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let png = encode_png(2, png::ColorType::Rgb, &mixed).unwrap();
        assert!(mask_from_png(&png, 2).is_err());
        assert!(mask_from_png(&encode_png(2, png::ColorType::Grayscale, &[0; 4]).unwrap(), 3).is_err());
        assert!(mask_from_png(b"not a png", 2).is_err());
    }

    #[test]
    fn image_png_quantises_to_eight_bits() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let img = Image::new(2, data.clone()).unwrap();
        let back = image_from_png(&image_to_png(&img).unwrap(), 2).unwrap();
        for (a, b) in data.iter().zip(back.data()) {
            assert_eq!(*b, (a * 255.0).round() / 255.0);
        }
    }
}
