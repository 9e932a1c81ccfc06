//! Deterministic synthetic scene-caption corpus.
//!
//! Each sample renders 1–3 colored shapes at distinct cells of a 4×4
//! placement lattice onto a grid×grid×3 image and captions them with the
//! fixed template grammar `a <color> <shape> [<relation> a <color>
//! <shape>]`. Attribute labels are indicators of which color and shape
//! words occur in the captions.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::tokenize;

/// Placement lattice is CELLS × CELLS regardless of pixel grid size.
const CELLS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub grid: usize,
    /// Row-major [grid, grid, 3] pixels in [0,1].
    pub image: Vec<f64>,
    pub captions: Vec<String>,
    /// Indicator vector over palette ++ shapes words.
    pub attribute_labels: Vec<f64>,
}

/// Ground truth for one placed shape; indices refer to the palette and
/// shape lists the corpus was generated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedShape {
    pub color: usize,
    pub shape: usize,
    pub row: usize,
    pub col: usize,
}

pub fn default_palette() -> Vec<String> {
    ["red", "green", "blue", "yellow"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn default_shapes() -> Vec<String> {
    ["square", "circle", "triangle", "cross"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn color_rgb(name: &str) -> [f64; 3] {
    match name {
        "red" => [0.9, 0.1, 0.1],
        "green" => [0.1, 0.8, 0.15],
        "blue" => [0.15, 0.2, 0.9],
        "yellow" => [0.9, 0.85, 0.1],
        "white" => [0.95, 0.95, 0.95],
        "purple" => [0.6, 0.15, 0.75],
        "orange" => [0.95, 0.55, 0.1],
        "cyan" => [0.1, 0.8, 0.85],
        other => {
            // Deterministic fallback: FNV-1a of the name, mapped away from
            // the black background.
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in other.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            let ch = |shift: u64| 0.25 + 0.75 * ((h >> shift) & 0xff) as f64 / 255.0;
            [ch(0), ch(8), ch(16)]
        }
    }
}

fn validate_word_list(kind: &str, words: &[String]) -> Result<()> {
    if words.is_empty() {
        return Err(Error::invalid(format!("corpus: empty {kind} list")));
    }
    for (i, w) in words.iter().enumerate() {
        let toks = tokenize(w);
        if toks.len() != 1 || toks[0] != *w {
            return Err(Error::invalid(format!(
                "corpus: {kind} entry '{w}' must be a single normalized token"
            )));
        }
        if words[..i].contains(w) {
            return Err(Error::invalid(format!("corpus: duplicate {kind} entry '{w}'")));
        }
    }
    Ok(())
}

/// Pixel membership test for one shape glyph inside a cs×cs cell.
/// Glyphs are pairwise distinct at cell size >= 4 (grid >= 16); at the
/// minimum grid of 8 a circle degenerates to the full cell.
fn inside(shape: &str, y: usize, x: usize, cs: usize) -> Result<bool> {
    let c = cs as f64 / 2.0;
    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
    Ok(match shape {
        "square" => true,
        "circle" => (py - c) * (py - c) + (px - c) * (px - c) <= c * c,
        "triangle" => (px - c).abs() <= (y as f64 + 1.0) / 2.0 * (c * 2.0 / cs as f64),
        // X-shaped cross: the two diagonals. A plus-shaped glyph is
        // pixel-identical to the circle at cell size 4.
        "cross" => {
            let (fx, fy, n) = (x as f64, y as f64, cs as f64);
            (fx - fy).abs() <= n / 8.0 || (fx + fy - (n - 1.0)).abs() <= n / 8.0
        }
        other => {
            return Err(Error::invalid(format!(
                "corpus: shape '{other}' has no renderer (known: square, circle, triangle, cross)"
            )))
        }
    })
}

fn relation(a: &PlacedShape, b: &PlacedShape) -> &'static str {
    // Vertical wording wins on diagonal ties.
    if a.row.abs_diff(b.row) >= a.col.abs_diff(b.col) {
        if a.row < b.row {
            "above"
        } else {
            "below"
        }
    } else if a.col < b.col {
        "left of"
    } else {
        "right of"
    }
}

fn phrase(p: &PlacedShape, palette: &[String], shapes: &[String]) -> String {
    format!("a {} {}", palette[p.color], shapes[p.shape])
}

/// Generate sample `i` of the corpus for `seed`. Per-index seeding makes
/// the corpus prefix-stable: sample i is identical no matter how many
/// samples are requested.
pub fn generate_scene(
    seed: u64,
    i: usize,
    grid: usize,
    palette: &[String],
    shapes: &[String],
) -> Result<(SceneSample, Vec<PlacedShape>)> {
    if grid < 8 {
        return Err(Error::invalid("corpus: grid must be >= 8"));
    }
    if grid % CELLS != 0 {
        return Err(Error::invalid("corpus: grid must be divisible by 4"));
    }
    validate_word_list("palette", palette)?;
    validate_word_list("shape", shapes)?;

    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let count = rng.random_range(1..=3usize);
    let cells = rand::seq::index::sample(&mut rng, CELLS * CELLS, count);
    let mut placed = Vec::with_capacity(count);
    for cell in cells.iter() {
        placed.push(PlacedShape {
            color: rng.random_range(0..palette.len()),
            shape: rng.random_range(0..shapes.len()),
            row: cell / CELLS,
            col: cell % CELLS,
        });
    }

    let cs = grid / CELLS;
    let mut image = vec![0.0; grid * grid * 3];
    for p in &placed {
        let rgb = color_rgb(&palette[p.color]);
        for y in 0..cs {
            for x in 0..cs {
                if inside(&shapes[p.shape], y, x, cs)? {
                    let base = ((p.row * cs + y) * grid + p.col * cs + x) * 3;
                    image[base..base + 3].copy_from_slice(&rgb);
                }
            }
        }
    }

    let captions = match placed.len() {
        1 => vec![phrase(&placed[0], palette, shapes)],
        2 => vec![
            format!(
                "{} {} {}",
                phrase(&placed[0], palette, shapes),
                relation(&placed[0], &placed[1]),
                phrase(&placed[1], palette, shapes)
            ),
            format!(
                "{} {} {}",
                phrase(&placed[1], palette, shapes),
                relation(&placed[1], &placed[0]),
                phrase(&placed[0], palette, shapes)
            ),
        ],
        _ => vec![
            format!(
                "{} {} {}",
                phrase(&placed[0], palette, shapes),
                relation(&placed[0], &placed[1]),
                phrase(&placed[1], palette, shapes)
            ),
            format!(
                "{} {} {}",
                phrase(&placed[1], palette, shapes),
                relation(&placed[1], &placed[2]),
                phrase(&placed[2], palette, shapes)
            ),
        ],
    };

    let mut attribute_labels = vec![0.0; palette.len() + shapes.len()];
    for caption in &captions {
        for tok in tokenize(caption) {
            if let Some(ci) = palette.iter().position(|p| *p == tok) {
                attribute_labels[ci] = 1.0;
            }
            if let Some(si) = shapes.iter().position(|s| *s == tok) {
                attribute_labels[palette.len() + si] = 1.0;
            }
        }
    }

    Ok((
        SceneSample {
            id: format!("s{i:06}"),
            grid,
            image,
            captions,
            attribute_labels,
        },
        placed,
    ))
}

/// Generate `n` samples. Identical arguments produce identical output.
pub fn generate_corpus(
    seed: u64,
    n: usize,
    grid: usize,
    palette: &[String],
    shapes: &[String],
) -> Result<Vec<SceneSample>> {
    if n < 1 {
        return Err(Error::invalid("corpus: n must be >= 1"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(generate_scene(seed, i, grid, palette, shapes)?.0);
    }
    Ok(out)
}
