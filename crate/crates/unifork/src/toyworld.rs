//! Procedural multimodal toy world.
//!
//! Scenes of one or two attributed objects render deterministically onto an
//! 8×8 symbol grid (the world is born tokenized), captions are canonical
//! word sequences over a closed vocabulary, and each grid cell's symbol
//! splits into residual codes by exact base-b digit decomposition. `parse`
//! inverts `render` exactly and rejects grids that `render` cannot produce,
//! which gives the evaluation suite a perfect detector.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{Special, VocabLayout};

pub const GRID_SIDE: usize = 8;
pub const N_CELLS: usize = GRID_SIDE * GRID_SIDE;
/// Base used to pack (glyph, detail) into one cell symbol. Symbols fit any
/// codec with `base^depth > SYMBOL_SPAN`.
pub const SYMBOL_BASE: u32 = 64;
/// Exclusive upper bound on symbols emitted by `render`.
pub const SYMBOL_SPAN: u32 = 17 * SYMBOL_BASE; // glyphs 1..=16, details 0..8

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

pub const ALL_SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];
pub const ALL_COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const ALL_SIZES: [Size; 2] = [Size::Small, Size::Large];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Coarse 3×3 position, row-major in [0, 9).
    pub cell: u8,
    pub size: Size,
}

/// Up to two objects in disjoint coarse cells, kept sorted by cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(mut objects: Vec<SceneObject>) -> Self {
        assert!(objects.len() <= 2, "at most two objects per scene");
        objects.sort_by_key(|o| o.cell);
        for w in objects.windows(2) {
            assert_ne!(w[0].cell, w[1].cell, "objects must occupy disjoint cells");
        }
        Scene { objects }
    }

    pub fn empty() -> Self {
        Scene { objects: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridImage {
    /// Row-major 8×8 cell symbols; background is 0.
    pub cells: Vec<u32>,
}

impl GridImage {
    pub fn from_cells(cells: Vec<u32>) -> Self {
        assert_eq!(cells.len(), N_CELLS);
        GridImage { cells }
    }
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("symbol {symbol} out of range for base {base} depth {depth}")]
    SymbolRange { symbol: u32, base: u32, depth: usize },
    #[error("grid side {0} unsupported (toy world renders {GRID_SIDE}×{GRID_SIDE})")]
    GridSide(usize),
}

// ── Rendering ────────────────────────────────────────────────────────

fn shape_ix(s: Shape) -> u32 {
    s as u32
}

fn color_ix(c: Color) -> u32 {
    c as u32
}

/// Semantic digit: identifies (shape, color), range 1..=16.
fn glyph_of(o: &SceneObject) -> u32 {
    1 + shape_ix(o.shape) * 4 + color_ix(o.color)
}

/// Top-left grid coordinate of a coarse cell's 2×2 block. Blocks tile
/// rows/cols 1..=6; the outer border stays background.
fn block_origin(cell: u8) -> (usize, usize) {
    let r = (cell / 3) as usize;
    let c = (cell % 3) as usize;
    (1 + 2 * r, 1 + 2 * c)
}

/// Deterministic rendering. Small objects occupy the block's top-left grid
/// cell with detail digit 0; large objects fill the 2×2 block with detail
/// digits 4..8 keyed by in-block position.
pub fn render(scene: &Scene) -> GridImage {
    let mut cells = vec![0u32; N_CELLS];
    for o in &scene.objects {
        let g = glyph_of(o);
        let (r0, c0) = block_origin(o.cell);
        match o.size {
            Size::Small => {
                cells[r0 * GRID_SIDE + c0] = g * SYMBOL_BASE;
            }
            Size::Large => {
                for dr in 0..2 {
                    for dc in 0..2 {
                        let detail = 4 + (dr * 2 + dc) as u32;
                        cells[(r0 + dr) * GRID_SIDE + (c0 + dc)] = g * SYMBOL_BASE + detail;
                    }
                }
            }
        }
    }
    GridImage { cells }
}

/// Exact inverse of `render`. Returns `None` for any grid that `render`
/// cannot produce: stray border symbols, unknown glyphs, inconsistent or
/// incomplete block patterns, or more than two objects.
pub fn parse(grid: &GridImage) -> Option<Scene> {
    if grid.cells.len() != N_CELLS {
        return None;
    }
    // Border must be background.
    for i in 0..GRID_SIDE {
        if grid.cells[i] != 0
            || grid.cells[(GRID_SIDE - 1) * GRID_SIDE + i] != 0
            || grid.cells[i * GRID_SIDE] != 0
            || grid.cells[i * GRID_SIDE + GRID_SIDE - 1] != 0
        {
            return None;
        }
    }
    let mut objects = Vec::new();
    for cell in 0..9u8 {
        let (r0, c0) = block_origin(cell);
        let mut vals = [0u32; 4];
        for dr in 0..2 {
            for dc in 0..2 {
                vals[dr * 2 + dc] = grid.cells[(r0 + dr) * GRID_SIDE + (c0 + dc)];
            }
        }
        if vals.iter().all(|&v| v == 0) {
            continue;
        }
        let glyph = vals.iter().find(|&&v| v != 0).unwrap() / SYMBOL_BASE;
        if !(1..=16).contains(&glyph) {
            return None;
        }
        let shape = ALL_SHAPES[((glyph - 1) / 4) as usize];
        let color = ALL_COLORS[((glyph - 1) % 4) as usize];
        let size = if vals.iter().all(|&v| v != 0) {
            // Large: all four details present with position-keyed digits.
            for (part, &v) in vals.iter().enumerate() {
                if v != glyph * SYMBOL_BASE + 4 + part as u32 {
                    return None;
                }
            }
            Size::Large
        } else {
            // Small: only the top-left cell, detail digit 0.
            if vals[0] != glyph * SYMBOL_BASE || vals[1] != 0 || vals[2] != 0 || vals[3] != 0 {
                return None;
            }
            Size::Small
        };
        objects.push(SceneObject { shape, color, cell, size });
        if objects.len() > 2 {
            return None;
        }
    }
    Some(Scene { objects })
}

/// Printable view of a grid: '.' background, color letter per object cell,
/// uppercase for large-object cells.
pub fn grid_ascii(grid: &GridImage) -> String {
    let mut out = String::with_capacity(N_CELLS + GRID_SIDE);
    for r in 0..GRID_SIDE {
        for c in 0..GRID_SIDE {
            let v = grid.cells[r * GRID_SIDE + c];
            if v == 0 {
                out.push('.');
                continue;
            }
            let glyph = v / SYMBOL_BASE;
            let detail = v % SYMBOL_BASE;
            let ch = if (1..=16).contains(&glyph) {
                b"rgby"[((glyph - 1) % 4) as usize] as char
            } else {
                '?'
            };
            out.push(if detail >= 4 { ch.to_ascii_uppercase() } else { ch });
        }
        out.push('\n');
    }
    out
}

// ── Residual code codec ──────────────────────────────────────────────

/// Big-endian base-`base` digit decomposition of a cell symbol.
pub fn rvq_encode(symbol: u32, depth: usize, base: u32) -> Result<Vec<u16>, WorldError> {
    let span = (base as u64).pow(depth as u32);
    if u64::from(symbol) >= span {
        return Err(WorldError::SymbolRange { symbol, base, depth });
    }
    let mut codes = vec![0u16; depth];
    let mut rest = symbol;
    for d in (0..depth).rev() {
        codes[d] = (rest % base) as u16;
        rest /= base;
    }
    Ok(codes)
}

pub fn rvq_decode(codes: &[u16], base: u32) -> u32 {
    let mut symbol = 0u32;
    for &c in codes {
        debug_assert!(u32::from(c) < base);
        symbol = symbol * base + u32::from(c);
    }
    symbol
}

// ── Captions ─────────────────────────────────────────────────────────

/// Closed caption vocabulary; ids are positions in this table. The text
/// vocab may reserve more ids than there are words.
pub const WORDS: &[&str] = &[
    "a", "an", "and", "empty", "scene", "small", "large", "red", "green", "blue", "yellow",
    "square", "circle", "triangle", "cross", "at", "top", "middle", "bottom", "left", "center",
    "right", "caption", "the", "image",
];

pub fn word_id(w: &str) -> u32 {
    WORDS
        .iter()
        .position(|&x| x == w)
        .unwrap_or_else(|| panic!("word {w} not in vocabulary")) as u32
}

pub fn word_str(id: u32) -> &'static str {
    WORDS.get(id as usize).copied().unwrap_or("<unk>")
}

fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
    }
}

fn shape_word(s: Shape) -> &'static str {
    match s {
        Shape::Square => "square",
        Shape::Circle => "circle",
        Shape::Triangle => "triangle",
        Shape::Cross => "cross",
    }
}

fn size_word(s: Size) -> &'static str {
    match s {
        Size::Small => "small",
        Size::Large => "large",
    }
}

fn row_word(cell: u8) -> &'static str {
    ["top", "middle", "bottom"][(cell / 3) as usize]
}

fn col_word(cell: u8) -> &'static str {
    ["left", "center", "right"][(cell % 3) as usize]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionStyle {
    Template,
    Dialogue,
}

fn push_object_words(out: &mut Vec<u32>, o: &SceneObject) {
    for w in ["a", size_word(o.size), color_word(o.color), shape_word(o.shape), "at",
        row_word(o.cell), col_word(o.cell)]
    {
        out.push(word_id(w));
    }
}

/// Canonical caption word ids. Objects appear in cell order with a fixed
/// size-color-shape word order, so distinct scenes caption distinctly.
pub fn caption_template(scene: &Scene) -> Vec<u32> {
    let mut out = Vec::new();
    if scene.objects.is_empty() {
        for w in ["an", "empty", "scene"] {
            out.push(word_id(w));
        }
        return out;
    }
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            out.push(word_id("and"));
        }
        push_object_words(&mut out, o);
    }
    out
}

/// Query tokens used when asking the model to describe an image.
pub fn und_query() -> Vec<u32> {
    ["caption", "the", "image"].iter().map(|w| word_id(w)).collect()
}

/// Caption in the requested style. `Dialogue` wraps the template response
/// in USER/ASSISTANT role tokens around the standard query.
pub fn caption(scene: &Scene, style: CaptionStyle, vocab: &VocabLayout) -> Vec<u32> {
    match style {
        CaptionStyle::Template => caption_template(scene),
        CaptionStyle::Dialogue => {
            let mut out = vec![vocab.special(Special::User)];
            out.extend(und_query());
            out.push(vocab.special(Special::Assistant));
            out.extend(caption_template(scene));
            out.push(vocab.special(Special::Eos));
            out
        }
    }
}

pub fn caption_to_string(ids: &[u32], vocab: &VocabLayout) -> String {
    ids.iter()
        .map(|&id| {
            if vocab.is_text(id) {
                word_str(id).to_string()
            } else {
                format!("<{id}>")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

// ── Scene sampling and enumeration ───────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Curriculum {
    Single,
    TwoObject,
}

fn sample_object<R: Rng>(rng: &mut R, cell: u8) -> SceneObject {
    SceneObject {
        shape: ALL_SHAPES[rng.gen_range(0..4)],
        color: ALL_COLORS[rng.gen_range(0..4)],
        cell,
        size: ALL_SIZES[rng.gen_range(0..2)],
    }
}

/// Uniform over valid scenes of the curriculum.
pub fn sample_scene<R: Rng>(rng: &mut R, curriculum: Curriculum) -> Scene {
    match curriculum {
        Curriculum::Single => {
            let cell = rng.gen_range(0..9u8);
            Scene::new(vec![sample_object(rng, cell)])
        }
        Curriculum::TwoObject => {
            let c1 = rng.gen_range(0..9u8);
            let mut c2 = rng.gen_range(0..8u8);
            if c2 >= c1 {
                c2 += 1;
            }
            Scene::new(vec![sample_object(rng, c1), sample_object(rng, c2)])
        }
    }
}

/// All 288 single-object scenes.
pub fn enumerate_single() -> Vec<Scene> {
    let mut out = Vec::with_capacity(288);
    for shape in ALL_SHAPES {
        for color in ALL_COLORS {
            for cell in 0..9u8 {
                for size in ALL_SIZES {
                    out.push(Scene::new(vec![SceneObject { shape, color, cell, size }]));
                }
            }
        }
    }
    out
}

// ── Sequence assembly ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Gen,
    Und,
}

/// Layout flavor for understanding samples: plain "<image><caption>" during
/// pretraining, USER/ASSISTANT dialogue from SFT onwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageFormat {
    Pretrain,
    Sft,
}

/// One sequence position: an ordinary token id or an image cell carrying
/// its composite symbol (the model decomposes it into residual codes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqToken {
    Tok(u32),
    Cell(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub tokens: Vec<SeqToken>,
    pub loss_mask: Vec<bool>,
    pub task: Task,
}

fn push_image(tokens: &mut Vec<SeqToken>, mask: &mut Vec<bool>, grid: &GridImage, in_loss: bool, vocab: &VocabLayout) {
    tokens.push(SeqToken::Tok(vocab.special(Special::ImgStart)));
    mask.push(false);
    for &sym in &grid.cells {
        tokens.push(SeqToken::Cell(sym));
        mask.push(in_loss);
    }
    tokens.push(SeqToken::Tok(vocab.special(Special::ImgEnd)));
    mask.push(false);
}

fn push_text(tokens: &mut Vec<SeqToken>, mask: &mut Vec<bool>, ids: &[u32], in_loss: bool) {
    for &id in ids {
        tokens.push(SeqToken::Tok(id));
        mask.push(in_loss);
    }
}

/// Assemble a training sequence for one scene.
///
/// Generation: `<caption><image>` with the loss over image cells only; the
/// caption is replaced token-for-token by the padding id with probability
/// `p_cfg` (classifier-free guidance training).
/// Understanding: `<image><caption>` (pretrain) or the dialogue format
/// (SFT), with the loss over the response text only.
pub fn build_sample<R: Rng>(
    scene: &Scene,
    task: Task,
    format: StageFormat,
    p_cfg: f64,
    vocab: &VocabLayout,
    rng: &mut R,
) -> SequenceSample {
    let grid = render(scene);
    let mut tokens = vec![SeqToken::Tok(vocab.special(Special::Bos))];
    let mut mask = vec![false];
    match task {
        Task::Gen => {
            let mut cap = caption_template(scene);
            if p_cfg > 0.0 && rng.gen_bool(p_cfg.min(1.0)) {
                let pad = vocab.special(Special::PadCfg);
                for t in cap.iter_mut() {
                    *t = pad;
                }
            }
            push_text(&mut tokens, &mut mask, &cap, false);
            push_image(&mut tokens, &mut mask, &grid, true, vocab);
        }
        Task::Und => match format {
            StageFormat::Pretrain => {
                push_image(&mut tokens, &mut mask, &grid, false, vocab);
                let mut resp = caption_template(scene);
                resp.push(vocab.special(Special::Eos));
                push_text(&mut tokens, &mut mask, &resp, true);
            }
            StageFormat::Sft => {
                push_text(&mut tokens, &mut mask, &[vocab.special(Special::User)], false);
                push_image(&mut tokens, &mut mask, &grid, false, vocab);
                push_text(&mut tokens, &mut mask, &und_query(), false);
                push_text(&mut tokens, &mut mask, &[vocab.special(Special::Assistant)], false);
                let mut resp = caption_template(scene);
                resp.push(vocab.special(Special::Eos));
                push_text(&mut tokens, &mut mask, &resp, true);
            }
        },
    }
    SequenceSample { tokens, loss_mask: mask, task }
}

// ── Dataset manifest ─────────────────────────────────────────────────

/// One JSON-lines manifest entry; the token stream regenerates from it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub scene: Scene,
    pub task: Task,
    pub format: StageFormat,
    pub seed: u64,
}

pub fn write_manifest<W: std::io::Write>(
    entries: &[ManifestEntry],
    w: &mut W,
) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_manifest<R: std::io::BufRead>(r: R) -> std::io::Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}
