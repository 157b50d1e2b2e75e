//! Procedural caption/scene pairs: up to three coloured shapes on a 3×3
//! grid, rendered at several scales with per-token occupancy maps.
//!
//! Rendering is integer-only: every scale is box-filtered from one
//! canonical raster (at least 128 px per side), so a scale pooled 2×2 equals
//! the next coarser scale up to float rounding.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Background {
    Plain,
    Gradient,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const BACKGROUNDS: [Background; 2] = [Background::Plain, Background::Gradient];
pub const CELLS: usize = 9;
pub const MAX_OBJECTS: usize = 3;
/// Tokens per object: colour, shape, cell.
pub const TOKENS_PER_OBJECT: usize = 3;

const CELL_NAMES: [&str; CELLS] = [
    "top-left",
    "top",
    "top-right",
    "left",
    "center",
    "right",
    "bottom-left",
    "bottom",
    "bottom-right",
];

impl Color {
    fn rgb(self) -> [u32; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [40, 60, 220],
            Color::Yellow => [230, 210, 40],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Row-major index into the 3×3 grid.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Data(format!("scene needs 1..=3 objects, got {}", self.objects.len())));
        }
        for (i, a) in self.objects.iter().enumerate() {
            if a.cell >= CELLS {
                return Err(Error::Data(format!("cell {} out of range", a.cell)));
            }
            if self.objects[..i].iter().any(|b| b.cell == a.cell) {
                return Err(Error::Data(format!("two objects share cell {}", a.cell)));
            }
        }
        Ok(())
    }
}

/// Closed token vocabulary. Id 0 is padding.
pub mod vocab {
    use super::*;

    pub const PAD: usize = 0;
    const COLOR_BASE: usize = 1;
    const SHAPE_BASE: usize = COLOR_BASE + 4;
    const CELL_BASE: usize = SHAPE_BASE + 3;
    const BG_BASE: usize = CELL_BASE + CELLS;
    pub const SIZE: usize = BG_BASE + 2;

    pub fn color(c: Color) -> usize {
        COLOR_BASE + COLORS.iter().position(|&x| x == c).unwrap()
    }

    pub fn shape(s: Shape) -> usize {
        SHAPE_BASE + SHAPES.iter().position(|&x| x == s).unwrap()
    }

    pub fn cell(c: usize) -> usize {
        CELL_BASE + c
    }

    pub fn background(b: Background) -> usize {
        BG_BASE + BACKGROUNDS.iter().position(|&x| x == b).unwrap()
    }

    pub fn is_color(id: usize) -> bool {
        (COLOR_BASE..SHAPE_BASE).contains(&id)
    }

    pub fn color_index(id: usize) -> Option<usize> {
        is_color(id).then(|| id - COLOR_BASE)
    }

    pub fn word(id: usize) -> Result<&'static str> {
        const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
        const SHAPE_WORDS: [&str; 3] = ["circle", "square", "triangle"];
        const BG_WORDS: [&str; 2] = ["plain", "gradient"];
        Ok(match id {
            PAD => "<pad>",
            i if i < SHAPE_BASE => COLOR_WORDS[i - COLOR_BASE],
            i if i < CELL_BASE => SHAPE_WORDS[i - SHAPE_BASE],
            i if i < BG_BASE => CELL_NAMES[i - CELL_BASE],
            i if i < SIZE => BG_WORDS[i - BG_BASE],
            i => return Err(Error::Vocabulary(format!("unknown token id {i}"))),
        })
    }

    pub fn id(text: &str) -> Result<usize> {
        (0..SIZE)
            .find(|&i| word(i).map(|w| w == text).unwrap_or(false))
            .ok_or_else(|| Error::Vocabulary(format!("unknown word {text:?}")))
    }

    pub fn to_string(ids: &[usize]) -> Result<String> {
        Ok(ids.iter().map(|&i| word(i)).collect::<Result<Vec<_>>>()?.join(" "))
    }

    pub fn parse(text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(id).collect()
    }
}

/// Number of distinct valid specs (ordered object lists).
pub fn spec_space_size() -> u64 {
    spec_space_size_upto(MAX_OBJECTS)
}

/// Number of valid specs with at most `max_objects` objects.
pub fn spec_space_size_upto(max_objects: usize) -> u64 {
    let attrs = (SHAPES.len() * COLORS.len()) as u64;
    let mut total = 0;
    for k in 1..=max_objects.min(MAX_OBJECTS) as u64 {
        let placements: u64 = (0..k).map(|i| CELLS as u64 - i).product();
        total += placements * attrs.pow(k as u32);
    }
    total * BACKGROUNDS.len() as u64
}

/// Decodes `index ∈ [0, spec_space_size())` into a spec; a bijection.
pub fn spec_from_index(mut index: u64) -> SceneSpec {
    let bg = BACKGROUNDS[(index % 2) as usize];
    index /= 2;
    let attrs = (SHAPES.len() * COLORS.len()) as u64;
    let mut k = 1u64;
    loop {
        let placements: u64 = (0..k).map(|i| CELLS as u64 - i).product();
        let block = placements * attrs.pow(k as u32);
        if index < block || k as usize == MAX_OBJECTS {
            break;
        }
        index -= block;
        k += 1;
    }
    let mut free: Vec<usize> = (0..CELLS).collect();
    let mut objects = Vec::with_capacity(k as usize);
    for _ in 0..k {
        let a = (index % attrs) as usize;
        index /= attrs;
        let slot = (index % free.len() as u64) as usize;
        index /= free.len() as u64;
        objects.push(SceneObject {
            shape: SHAPES[a / COLORS.len()],
            color: COLORS[a % COLORS.len()],
            cell: free.remove(slot),
        });
    }
    SceneSpec { objects, background: bg }
}

/// Stream id reserved for scene sampling.
const SCENE_STREAM: u64 = 0x5ce9e;

/// Uniform draw over all valid specs, deterministic in `seed`.
pub fn sample_scene(seed: u64) -> SceneSpec {
    sample_scene_upto(seed, MAX_OBJECTS)
}

/// Uniform draw over specs with at most `max_objects` (≥ 1) objects.
/// Specs are ordered by object count, so a prefix of the index space is
/// exactly the specs with fewer objects.
pub fn sample_scene_upto(seed: u64, max_objects: usize) -> SceneSpec {
    let mut rng = stream_rng(seed, SCENE_STREAM);
    spec_from_index(rng.random_range(0..spec_space_size_upto(max_objects.max(1))))
}

/// Token sequence `color shape cell …  background` padded to `t` slots.
pub fn tokens(spec: &SceneSpec, t: usize) -> Result<Vec<usize>> {
    let need = spec.objects.len() * TOKENS_PER_OBJECT + 1;
    if need > t {
        return Err(Error::Config(format!(
            "{} objects need {need} token slots but T = {t}",
            spec.objects.len()
        )));
    }
    let mut ids = Vec::with_capacity(t);
    for o in &spec.objects {
        ids.extend([vocab::color(o.color), vocab::shape(o.shape), vocab::cell(o.cell)]);
    }
    ids.push(vocab::background(spec.background));
    ids.resize(t, vocab::PAD);
    Ok(ids)
}

/// Which scene part each token describes: `Some(i)` for object `i`,
/// `Some(objects)` for the background token, `None` for padding.
pub fn token_groups(tokens: &[usize]) -> Vec<Option<usize>> {
    let content = tokens.iter().take_while(|&&id| id != vocab::PAD).count();
    (0..tokens.len())
        .map(|j| (j < content).then_some(j / TOKENS_PER_OBJECT))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ScenePair {
    pub spec: SceneSpec,
    pub tokens: Vec<usize>,
    /// `[3, s, s]` in [−1, 1], `s = base · 2ⁱ`.
    pub images: Vec<Tensor>,
    /// `[T, s, s]` of {0, 1} per scale.
    pub layout_truth: Vec<Tensor>,
}

/// Renders `scales` images starting at `base` pixels per side.
pub fn render(spec: &SceneSpec, scales: usize, base: usize, t: usize) -> Result<ScenePair> {
    spec.validate()?;
    if scales == 0 || base == 0 {
        return Err(Error::Config("render needs at least one scale and a positive base".into()));
    }
    let ids = tokens(spec, t)?;
    let top = base << (scales - 1);
    let mut canon = top;
    while canon < 128 {
        canon *= 2;
    }
    let (rgb, owner) = rasterize(spec, canon);
    let groups = token_groups(&ids);
    let n_obj = spec.objects.len();

    let mut images = Vec::with_capacity(scales);
    let mut layout_truth = Vec::with_capacity(scales);
    for i in 0..scales {
        let side = base << i;
        let block = canon / side;
        let area = (block * block) as f64;
        let mut img = vec![0.0; 3 * side * side];
        // counts[p][o]: canonical pixels in output pixel p owned by part o.
        let mut counts = vec![0usize; side * side * (n_obj + 1)];
        for y in 0..canon {
            for x in 0..canon {
                let p = (y / block) * side + x / block;
                let c = y * canon + x;
                for ch in 0..3 {
                    img[ch * side * side + p] += rgb[c * 3 + ch] as f64;
                }
                counts[p * (n_obj + 1) + owner[c]] += 1;
            }
        }
        for v in img.iter_mut() {
            *v = *v / (area * 127.5) - 1.0;
        }
        let mut truth = vec![0.0; t * side * side];
        for (j, g) in groups.iter().enumerate() {
            let Some(g) = *g else { continue };
            for p in 0..side * side {
                if 2 * counts[p * (n_obj + 1) + g] >= block * block {
                    truth[j * side * side + p] = 1.0;
                }
            }
        }
        images.push(Tensor::new(vec![3, side, side], img)?);
        layout_truth.push(Tensor::new(vec![t, side, side], truth)?);
    }
    Ok(ScenePair { spec: spec.clone(), tokens: ids, images, layout_truth })
}

/// Canonical raster: RGB bytes and the owning part per pixel (object index,
/// or `objects.len()` for background).
fn rasterize(spec: &SceneSpec, side: usize) -> (Vec<u32>, Vec<usize>) {
    let n = side * side;
    let mut rgb = vec![0u32; 3 * n];
    let mut owner = vec![spec.objects.len(); n];
    // Units: the image spans 30·side, so pixel centres are 15(2x+1), cell
    // centres 5(2c+1)·side, and object half-extent 4·side (0.8 of half a cell).
    let s = side as i64;
    let rho = 4 * s;
    for y in 0..side {
        for x in 0..side {
            let idx = y * side + x;
            let bg = match spec.background {
                Background::Plain => 128,
                Background::Gradient => 60 + (130 * (2 * y as u32 + 1)) / (2 * side as u32),
            };
            rgb[idx * 3..idx * 3 + 3].copy_from_slice(&[bg, bg, bg]);
            let px = 15 * (2 * x as i64 + 1);
            let py = 15 * (2 * y as i64 + 1);
            for (o, obj) in spec.objects.iter().enumerate() {
                let (cr, cc) = ((obj.cell / 3) as i64, (obj.cell % 3) as i64);
                let dx = px - 5 * (2 * cc + 1) * s;
                let dy = py - 5 * (2 * cr + 1) * s;
                let inside = match obj.shape {
                    Shape::Square => dx.abs() <= rho && dy.abs() <= rho,
                    Shape::Circle => dx * dx + dy * dy <= rho * rho,
                    Shape::Triangle => dy.abs() <= rho && 2 * dx.abs() <= dy + rho,
                };
                if inside {
                    rgb[idx * 3..idx * 3 + 3].copy_from_slice(&obj.color.rgb());
                    owner[idx] = o;
                }
            }
        }
    }
    (rgb, owner)
}

/// Oracle SSM `[T, side²]` from occupancy: each column is the token
/// occupancy plus `eps`, normalised over tokens.
pub fn oracle_ssm(layout_truth: &Tensor, eps: f64) -> Result<Tensor> {
    let s = layout_truth.shape();
    if s.len() != 3 {
        return Err(Error::dim("oracle_ssm", s, &[0, 0, 0]));
    }
    let (t, n) = (s[0], s[1] * s[2]);
    let d = layout_truth.data();
    let mut out = vec![0.0; t * n];
    for k in 0..n {
        let total: f64 = (0..t).map(|j| d[j * n + k] + eps).sum();
        for j in 0..t {
            out[j * n + k] = (d[j * n + k] + eps) / total;
        }
    }
    Tensor::new(vec![t, n], out)
}

/// Seed of the `index`-th scene of a split.
pub fn scene_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7a11u64,
        Split::Eval => 0xe7a1u64,
    };
    dataset_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag << 40)
        .wrapping_add(index as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seed: u64,
    pub tokens: String,
}

/// One JSON object per line; images are regenerated from the seeds.
pub fn write_manifest(path: &Path, seeds: &[u64], t: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &seed in seeds {
        let rec = ManifestRecord { seed, tokens: vocab::to_string(&tokens(&sample_scene(seed), t)?)? };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("manifest: {e}")))?);
    }
    Ok(out)
}
