//! Procedural change-pair corpus.
//!
//! Each tile is a textured terrain scene with a few static buildings and
//! seasonal vegetation patches. The second acquisition `t1` repeats the scene
//! under a global photometric shift and sensor noise; vegetation changes
//! colour between the two dates but is never annotated. Changed tiles also
//! gain new buildings or lose existing ones, and those footprints form the
//! ground-truth mask.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

pub type TileId = u32;

pub const CHANNELS: usize = 3;

/// Planar (channel-major) RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * side * side {
            return Err(Error::Shape(format!(
                "image of side {side} needs {} values, got {}",
                CHANNELS * side * side,
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.side + y) * self.side + x]
    }

    /// A `1×C×S×S` tensor copy.
    pub fn to_tensor(&self) -> gradkit::Tensor {
        gradkit::Tensor::new(vec![1, CHANNELS, self.side, self.side], self.data.clone()).expect("image shape")
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.side + y) * self.side + x] = v;
    }
}

/// Binary change mask, 1 = changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    side: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::Shape(format!(
                "mask of side {side} needs {} values, got {}",
                side * side,
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryMask(v));
        }
        Ok(Self { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            data: vec![0; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn changed_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.changed_count() as f64 / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileClass {
    Changed,
    Unchanged,
    Ignored,
}

impl fmt::Display for TileClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TileClass::Changed => "changed",
            TileClass::Unchanged => "unchanged",
            TileClass::Ignored => "ignored",
        })
    }
}

/// Tile-level class: changed above 3 % changed pixels, unchanged below 1 %,
/// ignored in between (both bounds inclusive).
pub fn derive_tile_label(mask: &Mask) -> TileClass {
    let (count, total) = (mask.changed_count(), mask.data.len());
    if count * 100 > 3 * total {
        TileClass::Changed
    } else if count * 100 < total {
        TileClass::Unchanged
    } else {
        TileClass::Ignored
    }
}

/// [`derive_tile_label`] over raw values, rejecting anything but 0 and 1.
pub fn derive_tile_label_values(side: usize, values: &[u8]) -> Result<TileClass> {
    Ok(derive_tile_label(&Mask::new(side, values.to_vec())?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePair {
    pub id: TileId,
    pub t0: Image,
    pub t1: Image,
    pub mask: Option<Mask>,
}

impl TilePair {
    pub fn new(id: TileId, t0: Image, t1: Image, mask: Option<Mask>) -> Result<Self> {
        if t0.side != t1.side || mask.as_ref().is_some_and(|m| m.side != t0.side) {
            return Err(Error::Shape(format!("tile {id}: t0, t1 and mask sizes disagree")));
        }
        Ok(Self { id, t0, t1, mask })
    }

    pub fn side(&self) -> usize {
        self.t0.side
    }

    pub fn class(&self) -> Option<TileClass> {
        self.mask.as_ref().map(derive_tile_label)
    }

    /// The same pair with its annotation removed.
    pub fn unlabelled(&self) -> TilePair {
        TilePair {
            mask: None,
            ..self.clone()
        }
    }
}

/// The four geometric augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    HFlip,
    VFlip,
    Rot90,
    Rot270,
}

impl Transform {
    pub const ALL: [Transform; 4] = [Transform::HFlip, Transform::VFlip, Transform::Rot90, Transform::Rot270];

    /// Source pixel of output pixel `(y, x)`. Rotations are counter-clockwise.
    fn source(self, side: usize, y: usize, x: usize) -> (usize, usize) {
        let last = side - 1;
        match self {
            Transform::HFlip => (y, last - x),
            Transform::VFlip => (last - y, x),
            Transform::Rot90 => (x, last - y),
            Transform::Rot270 => (last - x, y),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hflip" => Ok(Transform::HFlip),
            "vflip" => Ok(Transform::VFlip),
            "rot90" => Ok(Transform::Rot90),
            "rot270" => Ok(Transform::Rot270),
            other => Err(Error::UnknownTransform(other.to_string())),
        }
    }
}

fn transform_image(img: &Image, t: Transform) -> Image {
    let s = img.side;
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = t.source(s, y, x);
                out.set(c, y, x, img.get(c, sy, sx));
            }
        }
    }
    out
}

fn transform_mask(mask: &Mask, t: Transform) -> Mask {
    let s = mask.side;
    let mut data = vec![0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = t.source(s, y, x);
            data[y * s + x] = mask.data[sy * s + sx];
        }
    }
    Mask { side: s, data }
}

/// Applies the same geometric transform to both images and the mask.
pub fn augment(pair: &TilePair, transform: Transform) -> TilePair {
    TilePair {
        id: pair.id,
        t0: transform_image(&pair.t0, transform),
        t1: transform_image(&pair.t1, transform),
        mask: pair.mask.as_ref().map(|m| transform_mask(m, transform)),
    }
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub tile_side: usize,
    pub changed: usize,
    pub unchanged: usize,
    /// Tiles whose changed fraction falls in the ignored 1–3 % band.
    pub ignored: usize,
    /// Inclusive range of building rectangle sides, in pixels.
    pub rect_side: [usize; 2],
    /// Inclusive range of building disc radii, in pixels.
    pub disc_radius: [usize; 2],
    /// Amplitude of the per-channel gain/offset shift applied to `t1`.
    pub jitter: f64,
    /// Standard deviation of per-pixel sensor noise on `t1`.
    pub noise: f64,
    /// Expected number of seasonal vegetation patches per tile.
    pub vegetation: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            tile_side: 16,
            changed: 230,
            unchanged: 3990,
            ignored: 60,
            rect_side: [3, 6],
            disc_radius: [2, 3],
            jitter: 0.08,
            noise: 0.02,
            vegetation: 1.0,
            seed: 20_200_601,
        }
    }
}

impl CorpusSpec {
    pub fn change_prior(&self) -> f64 {
        let labelled = self.changed + self.unchanged;
        if labelled == 0 {
            0.0
        } else {
            self.changed as f64 / labelled as f64
        }
    }

    pub fn total(&self) -> usize {
        self.changed + self.unchanged + self.ignored
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorpusSpec(m));
        let s = self.tile_side;
        if s < 8 {
            return bad(format!("tile side {s} is below the minimum of 8"));
        }
        for (name, v) in [("jitter", self.jitter), ("noise", self.noise)] {
            if !(0.0..=0.5).contains(&v) {
                return bad(format!("{name} {v} outside [0, 0.5]"));
            }
        }
        if !(0.0..=4.0).contains(&self.vegetation) {
            return bad(format!("vegetation {} outside [0, 4]", self.vegetation));
        }
        let [rmin, rmax] = self.rect_side;
        let [dmin, dmax] = self.disc_radius;
        if rmin == 0 || rmin > rmax || rmax > s {
            return bad(format!("rect_side {:?} invalid for tile side {s}", self.rect_side));
        }
        if dmin == 0 || dmin > dmax || 2 * dmax + 1 > s {
            return bad(format!("disc_radius {:?} invalid for tile side {s}", self.disc_radius));
        }
        if self.changed > 0 {
            // the largest single building must be able to exceed 3 % of the tile
            let largest = (rmax * rmax).max(disc_footprint(dmax).len());
            if largest * 100 <= 3 * s * s {
                return bad(format!(
                    "changed fraction > 3% unreachable: largest shape covers {largest} of {} pixels",
                    s * s
                ));
            }
        }
        Ok(())
    }
}

fn disc_footprint(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut pts = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r + r / 2 {
                pts.push((dy, dx));
            }
        }
    }
    pts
}

type Rgb = [f64; 3];

const TERRAIN: [Rgb; 4] = [
    [0.36, 0.46, 0.26],
    [0.47, 0.41, 0.30],
    [0.30, 0.37, 0.27],
    [0.52, 0.51, 0.47],
];

const ROOFS: [Rgb; 5] = [
    [0.74, 0.32, 0.26],
    [0.82, 0.81, 0.78],
    [0.28, 0.28, 0.31],
    [0.58, 0.47, 0.38],
    [0.45, 0.52, 0.60],
];

const LEAF: (Rgb, Rgb) = ([0.22, 0.50, 0.20], [0.55, 0.47, 0.22]);

#[derive(Clone)]
struct Shape {
    cells: Vec<(usize, usize)>,
    colour: Rgb,
}

fn rand_colour(rng: &mut ChaCha8Rng, palette: &[Rgb], spread: f64) -> Rgb {
    let base = palette[rng.gen_range(0..palette.len())];
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = (base[k] + rng.gen_range(-spread..=spread)).clamp(0.0, 1.0);
    }
    c
}

fn clip(side: usize, cy: isize, cx: isize, offsets: &[(isize, isize)]) -> Vec<(usize, usize)> {
    offsets
        .iter()
        .map(|(dy, dx)| (cy + dy, cx + dx))
        .filter(|&(y, x)| y >= 0 && x >= 0 && (y as usize) < side && (x as usize) < side)
        .map(|(y, x)| (y as usize, x as usize))
        .collect()
}

fn random_building(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Shape {
    let s = spec.tile_side;
    let cells = if rng.gen_bool(0.7) {
        let h = rng.gen_range(spec.rect_side[0]..=spec.rect_side[1]);
        let w = rng.gen_range(spec.rect_side[0]..=spec.rect_side[1]);
        let y0 = rng.gen_range(0..=s - h);
        let x0 = rng.gen_range(0..=s - w);
        (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| (y, x))).collect()
    } else {
        let r = rng.gen_range(spec.disc_radius[0]..=spec.disc_radius[1]);
        let cy = rng.gen_range(r..s - r) as isize;
        let cx = rng.gen_range(r..s - r) as isize;
        clip(s, cy, cx, &disc_footprint(r))
    };
    Shape {
        cells,
        colour: rand_colour(rng, &ROOFS, 0.06),
    }
}

fn random_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let whole = mean.floor();
    whole as usize + usize::from(rng.gen_bool(mean - whole))
}

struct Scene {
    side: usize,
    ground: Vec<f64>,
}

impl Scene {
    fn new(rng: &mut ChaCha8Rng, side: usize) -> Self {
        let base = rand_colour(rng, &TERRAIN, 0.05);
        let amp = rng.gen_range(0.02..0.06);
        let (fy, fx) = (rng.gen_range(0.3..1.2), rng.gen_range(0.3..1.2));
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut ground = vec![0.0; CHANNELS * side * side];
        for y in 0..side {
            for x in 0..side {
                let wave = amp * (fy * y as f64 + fx * x as f64 + phase).sin();
                let grain = rng.gen_range(-0.03..0.03);
                for c in 0..CHANNELS {
                    ground[(c * side + y) * side + x] = base[c] + wave + grain;
                }
            }
        }
        Self { side, ground }
    }

    fn render(&self, layers: &[&Shape]) -> Image {
        let mut img = Image {
            side: self.side,
            data: self.ground.clone(),
        };
        for shape in layers {
            for &(y, x) in &shape.cells {
                for c in 0..CHANNELS {
                    // keep a little of the ground texture visible through every layer
                    let g = self.ground[(c * self.side + y) * self.side + x];
                    img.set(c, y, x, shape.colour[c] + 0.2 * (g - 0.4));
                }
            }
        }
        img
    }
}

fn paint_mask(mask: &mut [u8], side: usize, shape: &Shape) {
    for &(y, x) in &shape.cells {
        mask[y * side + x] = 1;
    }
}

fn photometric(rng: &mut ChaCha8Rng, img: &mut Image, jitter: f64, noise: f64) {
    let gains: Vec<f64> = (0..CHANNELS).map(|_| 1.0 + rng.gen_range(-jitter..=jitter)).collect();
    let offsets: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-jitter..=jitter) * 0.5).collect();
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sd");
    let plane = img.side * img.side;
    for (i, v) in img.data.iter_mut().enumerate() {
        let c = i / plane;
        let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
        *v = *v * gains[c] + offsets[c] + n;
    }
}

fn clamp_unit(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn generate_tile(spec: &CorpusSpec, id: TileId, class: TileClass) -> Result<TilePair> {
    let s = spec.tile_side;
    let mut rng = seed::rng(spec.seed, &[stream::TILE, id as u64]);
    let scene = Scene::new(&mut rng, s);

    let statics: Vec<Shape> = (0..rng.gen_range(0..=2))
        .map(|_| random_building(&mut rng, spec))
        .collect();
    let mut leaves_t0 = Vec::new();
    let mut leaves_t1 = Vec::new();
    for _ in 0..random_count(&mut rng, spec.vegetation) {
        let r = rng.gen_range(2..=3.min((s - 1) / 2));
        let cy = rng.gen_range(0..s) as isize;
        let cx = rng.gen_range(0..s) as isize;
        let cells = clip(s, cy, cx, &disc_footprint(r));
        let mut green = LEAF.0;
        let mut dry = LEAF.1;
        let shade = rng.gen_range(-0.05..0.05);
        let dryness = rng.gen_range(0.4..1.0);
        for k in 0..3 {
            green[k] += shade;
            dry[k] = green[k] + dryness * (dry[k] - green[k]);
        }
        leaves_t0.push(Shape {
            cells: cells.clone(),
            colour: green,
        });
        leaves_t1.push(Shape { cells, colour: dry });
    }

    let mut mask = vec![0u8; s * s];
    let mut removed: Vec<usize> = Vec::new();
    let mut added: Vec<Shape> = Vec::new();
    match class {
        TileClass::Unchanged => {}
        TileClass::Changed => {
            let mut attempts = 0;
            while mask.iter().map(|&v| v as usize).sum::<usize>() * 100 <= 3 * s * s {
                attempts += 1;
                if attempts > 64 {
                    return Err(Error::CorpusSpec(format!(
                        "tile {id}: could not reach a changed fraction above 3%"
                    )));
                }
                let remaining: Vec<usize> = (0..statics.len()).filter(|i| !removed.contains(i)).collect();
                if !remaining.is_empty() && rng.gen_bool(0.35) {
                    let i = remaining[rng.gen_range(0..remaining.len())];
                    paint_mask(&mut mask, s, &statics[i]);
                    removed.push(i);
                } else {
                    let b = random_building(&mut rng, spec);
                    paint_mask(&mut mask, s, &b);
                    added.push(b);
                }
            }
        }
        TileClass::Ignored => {
            let lo = (s * s).div_ceil(100);
            let hi = 3 * s * s / 100;
            let len = rng.gen_range(lo..=hi.min(s));
            let y = rng.gen_range(0..s);
            let x0 = rng.gen_range(0..=s - len);
            let strip = Shape {
                cells: (x0..x0 + len).map(|x| (y, x)).collect(),
                colour: rand_colour(&mut rng, &ROOFS, 0.06),
            };
            paint_mask(&mut mask, s, &strip);
            added.push(strip);
        }
    }
    let layers_t0: Vec<&Shape> = leaves_t0.iter().chain(statics.iter()).collect();
    let layers_t1: Vec<&Shape> = leaves_t1
        .iter()
        .chain(
            statics
                .iter()
                .enumerate()
                .filter(|(i, _)| !removed.contains(i))
                .map(|(_, b)| b),
        )
        .chain(added.iter())
        .collect();
    let mut t0 = scene.render(&layers_t0);
    let mut t1 = scene.render(&layers_t1);
    clamp_unit(&mut t0);
    photometric(&mut rng, &mut t1, spec.jitter, spec.noise);
    clamp_unit(&mut t1);
    let mask = Mask { side: s, data: mask };
    debug_assert_eq!(derive_tile_label(&mask), class);
    TilePair::new(id, t0, t1, Some(mask))
}

/// Generates the corpus described by `spec`. Tile ids are `0..total` with
/// classes assigned in a seeded random order.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<TilePair>> {
    spec.validate()?;
    let mut classes: Vec<TileClass> = std::iter::repeat_n(TileClass::Changed, spec.changed)
        .chain(std::iter::repeat_n(TileClass::Unchanged, spec.unchanged))
        .chain(std::iter::repeat_n(TileClass::Ignored, spec.ignored))
        .collect();
    classes.shuffle(&mut seed::rng(spec.seed, &[stream::TILE, u64::MAX]));
    classes
        .into_iter()
        .enumerate()
        .map(|(id, class)| generate_tile(spec, id as TileId, class))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub changed: usize,
    pub unchanged: usize,
}

impl ClassCounts {
    pub fn new(changed: usize, unchanged: usize) -> Self {
        Self { changed, unchanged }
    }

    pub fn total(&self) -> usize {
        self.changed + self.unchanged
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub initial: Vec<TilePair>,
    pub pool: Vec<TilePair>,
    pub test: Vec<TilePair>,
}

/// Draws disjoint initial and test sets with exact class counts; every
/// other changed/unchanged tile goes to the pool. Ignored tiles are dropped.
pub fn split(corpus: &[TilePair], initial: ClassCounts, test: ClassCounts, seed: u64) -> Result<Split> {
    let mut changed = Vec::new();
    let mut unchanged = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, t) in corpus.iter().enumerate() {
        if !seen.insert(t.id) {
            return Err(Error::DuplicateTile(t.id));
        }
        match t.class() {
            None => return Err(Error::MissingMask(t.id)),
            Some(TileClass::Changed) => changed.push(i),
            Some(TileClass::Unchanged) => unchanged.push(i),
            Some(TileClass::Ignored) => {}
        }
    }
    for (class, needed, have) in [
        ("changed", initial.changed + test.changed, changed.len()),
        ("unchanged", initial.unchanged + test.unchanged, unchanged.len()),
    ] {
        if needed > have {
            return Err(Error::InsufficientTiles {
                class,
                needed,
                available: have,
            });
        }
    }
    let mut rng = seed::rng(seed, &[stream::SPLIT]);
    changed.sort_by_key(|&i| corpus[i].id);
    unchanged.sort_by_key(|&i| corpus[i].id);
    changed.shuffle(&mut rng);
    unchanged.shuffle(&mut rng);

    let take = |from: &[usize], a: usize, b: usize| -> Vec<usize> { from[a..b].to_vec() };
    let mut test_idx = take(&changed, 0, test.changed);
    test_idx.extend(take(&unchanged, 0, test.unchanged));
    let mut init_idx = take(&changed, test.changed, test.changed + initial.changed);
    init_idx.extend(take(&unchanged, test.unchanged, test.unchanged + initial.unchanged));
    let mut pool_idx = changed[test.changed + initial.changed..].to_vec();
    pool_idx.extend(&unchanged[test.unchanged + initial.unchanged..]);

    let collect = |mut idx: Vec<usize>| -> Vec<TilePair> {
        idx.sort_by_key(|&i| corpus[i].id);
        idx.into_iter().map(|i| corpus[i].clone()).collect()
    };
    Ok(Split {
        initial: collect(init_idx),
        pool: collect(pool_idx),
        test: collect(test_idx),
    })
}
