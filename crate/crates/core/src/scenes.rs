//! Synthetic compositional scenes, their captions, and a compliance metric.
//!
//! A scene holds one or two coloured shapes placed in distinct half-plane
//! regions. The space is finite (32 one-object + 576 ordered two-object
//! scenes), which keeps every metric property exhaustively testable.
//!
//! Compliance rules, per prompted object `o = (colour c, region r)`:
//!
//! 1. Pixels are classified by hue: the class is the colour whose margin
//!    (red `r−max(g,b)`, green `g−max(r,b)`, blue `b−max(r,g)`, yellow
//!    `min(r,g)−b`) is largest, provided it exceeds [`HUE_MARGIN`].
//! 2. Blobs are 4-connected same-class components of at least
//!    [`MIN_BLOB_PIXELS`] pixels, located by their centroid.
//! 3. A blob is attributed to a prompted region whose half-plane contains
//!    its centroid (strictly); ties between overlapping regions go to the
//!    nearest region centre.
//! 4. presence(o) = some blob is attributed to `r`;
//!    binding(o) = the largest blob attributed to `r` has colour `c`;
//!    placement(o) = the largest blob of colour `c` anywhere lies in `r`.
//!
//! Each component is averaged over objects, and `total` is their mean.
//! Shape is not scored.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const HUE_MARGIN: f64 = 0.15;
pub const MIN_BLOB_PIXELS: usize = 4;
pub const DEFAULT_BACKGROUND: f64 = 0.5;
/// Caption length in tokens.
pub const CAPTION_LEN: usize = 8;
/// Seed of the fixed held-out scene selection.
pub const HOLDOUT_SEED: u64 = 0x5EED_0F_4A11;

const SUPERSAMPLE: usize = 4;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(unknown_word(other)),
                }
            }
        }
    };
}

word_enum!(Shape { Square => "square", Circle => "circle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Region { Left => "left", Right => "right", Top => "top", Bottom => "bottom" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Region {
    /// Region centre as fractions of (width, height).
    fn centre_frac(self) -> (f64, f64) {
        match self {
            Region::Left => (0.25, 0.5),
            Region::Right => (0.75, 0.5),
            Region::Top => (0.5, 0.25),
            Region::Bottom => (0.5, 0.75),
        }
    }

    /// Strict half-plane test on a centroid in pixel units.
    pub fn contains(self, cx: f64, cy: f64, w: usize, h: usize) -> bool {
        let (mx, my) = (w as f64 / 2.0, h as f64 / 2.0);
        match self {
            Region::Left => cx < mx,
            Region::Right => cx > mx,
            Region::Top => cy < my,
            Region::Bottom => cy > my,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
    pub region: Region,
}

impl fmt::Display for Object {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.color, self.shape, self.region)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
    pub background: f64,
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                f.write_str(" and ")?;
            }
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

impl SceneSpec {
    pub fn new(objects: Vec<Object>) -> Result<Self> {
        let s = Self {
            objects,
            background: DEFAULT_BACKGROUND,
        };
        if !s.is_valid() {
            return Err(Error::InvalidArgument(format!("invalid scene: {s}")));
        }
        Ok(s)
    }

    /// 1–2 objects with pairwise distinct colours and regions.
    pub fn is_valid(&self) -> bool {
        let n = self.objects.len();
        if !(1..=2).contains(&n) {
            return false;
        }
        n == 1 || (self.objects[0].color != self.objects[1].color && self.objects[0].region != self.objects[1].region)
    }

    pub fn with_background(mut self, gray: f64) -> Self {
        self.background = gray;
        self
    }
}

/// Every valid scene, in a fixed canonical order.
pub fn all_scenes() -> Vec<SceneSpec> {
    let singles: Vec<Object> = Color::ALL
        .iter()
        .flat_map(|&color| {
            Shape::ALL
                .iter()
                .flat_map(move |&shape| Region::ALL.iter().map(move |&region| Object { color, shape, region }))
        })
        .collect();
    let mut out: Vec<SceneSpec> = singles.iter().map(|&o| SceneSpec::new(vec![o]).unwrap()).collect();
    for &a in &singles {
        for &b in &singles {
            if a.color != b.color && a.region != b.region {
                out.push(SceneSpec::new(vec![a, b]).unwrap());
            }
        }
    }
    out
}

/// Uniform draw over valid scenes, deterministic per seed.
pub fn sample_scene(seed: u64) -> SceneSpec {
    let all = all_scenes();
    let mut r = rng::stream(seed, "scene");
    all[r.gen_range(0..all.len())].clone()
}

/// Deterministic split into (training pool, held-out two-object scenes).
pub fn holdout_split(n_holdout: usize) -> (Vec<SceneSpec>, Vec<SceneSpec>) {
    let all = all_scenes();
    let mut pairs: Vec<usize> = (0..all.len()).filter(|&i| all[i].objects.len() == 2).collect();
    pairs.shuffle(&mut rng::stream(HOLDOUT_SEED, "holdout"));
    let mut held: Vec<usize> = pairs.into_iter().take(n_holdout).collect();
    held.sort_unstable();
    let holdout = held.iter().map(|&i| all[i].clone()).collect();
    let train = (0..all.len()).filter(|i| held.binary_search(i).is_err()).map(|i| all[i].clone()).collect();
    (train, holdout)
}

// ── captions ────────────────────────────────────────────────────────────

pub const PAD: usize = 0;
pub const AND: usize = 1;

/// Closed vocabulary; the index of a word is its token id.
pub const VOCAB: [&str; 12] = [
    "<pad>", "and", "red", "green", "blue", "yellow", "square", "circle", "left", "right", "top", "bottom",
];

fn unknown_word(w: &str) -> Error {
    Error::UnknownWord {
        word: w.to_string(),
        valid: VOCAB[1..].join(", "),
    }
}

pub fn token_id(word: &str) -> Result<usize> {
    VOCAB.iter().position(|&v| v == word).ok_or_else(|| unknown_word(word))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Caption {
    pub ids: Vec<usize>,
}

impl Caption {
    pub fn words(&self) -> Vec<&'static str> {
        self.ids.iter().map(|&i| VOCAB[i]).collect()
    }

    /// Re-pads (or truncates trailing padding) to `len` tokens.
    pub fn padded(&self, len: usize) -> Result<Caption> {
        let content = self.ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
        if len < content {
            return Err(Error::Config(format!("caption needs {content} tokens but only {len} are configured")));
        }
        let mut ids = self.ids[..content].to_vec();
        ids.resize(len, PAD);
        Ok(Caption { ids })
    }
}

/// `<color> <shape> <region> [and <color> <shape> <region>]`, PAD-filled.
pub fn caption_of(s: &SceneSpec) -> Caption {
    let mut ids = Vec::with_capacity(CAPTION_LEN);
    for (i, o) in s.objects.iter().enumerate() {
        if i > 0 {
            ids.push(AND);
        }
        for w in [o.color.word(), o.shape.word(), o.region.word()] {
            ids.push(token_id(w).expect("scene words are in the vocabulary"));
        }
    }
    ids.resize(CAPTION_LEN.max(ids.len()), PAD);
    Caption { ids }
}

/// Parses a whitespace-separated prompt into a valid scene.
pub fn parse_prompt(prompt: &str) -> Result<SceneSpec> {
    let malformed = |reason: &str| Error::MalformedPrompt {
        prompt: prompt.to_string(),
        reason: reason.to_string(),
    };
    let words: Vec<&str> = prompt.split_whitespace().filter(|w| *w != VOCAB[PAD]).collect();
    for w in &words {
        token_id(w)?;
    }
    let mut objects = Vec::new();
    for (i, chunk) in words.split(|w| *w == "and").enumerate() {
        if i > 1 {
            return Err(malformed("at most two objects"));
        }
        match chunk {
            [c, s, r] => objects.push(Object {
                color: c.parse().map_err(|_| malformed("expected a colour first"))?,
                shape: s.parse().map_err(|_| malformed("expected a shape second"))?,
                region: r.parse().map_err(|_| malformed("expected a region third"))?,
            }),
            _ => return Err(malformed("each object is '<color> <shape> <region>'")),
        }
    }
    let s = SceneSpec {
        objects,
        background: DEFAULT_BACKGROUND,
    };
    if !s.is_valid() {
        return Err(malformed("objects need distinct colours and regions"));
    }
    Ok(s)
}

pub fn decode_caption(c: &Caption) -> Result<SceneSpec> {
    let text: Vec<&str> = c.words().into_iter().filter(|w| *w != VOCAB[PAD]).collect();
    parse_prompt(&text.join(" "))
}

// ── corpus records ──────────────────────────────────────────────────────

/// `seed,color,shape,region[,color,shape,region]`
pub fn format_record(seed: u64, s: &SceneSpec) -> String {
    let mut out = seed.to_string();
    for o in &s.objects {
        out.push_str(&format!(",{},{},{}", o.color, o.shape, o.region));
    }
    out
}

pub fn parse_record(line: &str) -> Result<(u64, SceneSpec)> {
    let bad = |why: &str| Error::InvalidArgument(format!("bad scene record {line:?}: {why}"));
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != 4 && fields.len() != 7 {
        return Err(bad("expected 4 or 7 fields"));
    }
    let seed = fields[0].parse().map_err(|_| bad("seed"))?;
    let objects = fields[1..]
        .chunks(3)
        .map(|f| {
            Ok(Object {
                color: f[0].parse()?,
                shape: f[1].parse()?,
                region: f[2].parse()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((seed, SceneSpec::new(objects)?))
}

// ── rendering ───────────────────────────────────────────────────────────

fn object_coverage(o: &Object, px: f64, py: f64, w: usize, h: usize) -> f64 {
    let (fx, fy) = o.region.centre_frac();
    let (cx, cy) = (fx * w as f64, fy * h as f64);
    let side = w.min(h) as f64;
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - cx;
            let y = py + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - cy;
            let inside = match o.shape {
                Shape::Square => x.abs() <= 0.125 * side && y.abs() <= 0.125 * side,
                Shape::Circle => x * x + y * y <= (0.15 * side).powi(2),
            };
            hits += inside as usize;
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Anti-aliased `[3, h, w]` image in `[0, 1]`.
pub fn render_scene(s: &SceneSpec, h: usize, w: usize) -> Result<Tensor> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("render size {h}×{w} is below 8×8")));
    }
    let bg = s.background;
    let mut img = Tensor::full([3, h, w], bg);
    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let mut px = [bg; 3];
            for o in &s.objects {
                let a = object_coverage(o, x as f64, y as f64, w, h);
                if a > 0.0 {
                    let c = o.color.rgb();
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - a) + c[ch] * a;
                    }
                }
            }
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = px[ch].clamp(0.0, 1.0);
            }
        }
    }
    Ok(img)
}

// ── compliance ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ComplianceReport {
    pub presence: f64,
    pub binding: f64,
    pub placement: f64,
    pub total: f64,
}

impl ComplianceReport {
    pub fn from_components(presence: f64, binding: f64, placement: f64) -> Self {
        Self {
            presence,
            binding,
            placement,
            total: (presence + binding + placement) / 3.0,
        }
    }

    /// Componentwise mean.
    pub fn mean(reports: &[ComplianceReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&ComplianceReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self::from_components(sum(|r| r.presence), sum(|r| r.binding), sum(|r| r.placement))
    }
}

/// Hue class of one pixel, if any colour clears the margin.
pub fn classify_pixel(r: f64, g: f64, b: f64) -> Option<Color> {
    let margins = [
        (Color::Red, r - g.max(b)),
        (Color::Green, g - r.max(b)),
        (Color::Blue, b - r.max(g)),
        (Color::Yellow, r.min(g) - b),
    ];
    let (c, m) = margins.iter().copied().fold((Color::Red, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    (m > HUE_MARGIN).then_some(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub color: Color,
    pub pixels: usize,
    pub cx: f64,
    pub cy: f64,
}

/// Connected same-hue components of at least [`MIN_BLOB_PIXELS`] pixels.
pub fn find_blobs(img: &Tensor) -> Result<Vec<Blob>> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::InvalidArgument(format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let d = img.data();
    let class: Vec<Option<Color>> = (0..h * w).map(|p| classify_pixel(d[p], d[h * w + p], d[2 * h * w + p])).collect();
    let mut seen = vec![false; h * w];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let Some(color) = class[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            n += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            let mut visit = |q: usize| {
                if !seen[q] && class[q] == Some(color) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if n >= MIN_BLOB_PIXELS {
            blobs.push(Blob {
                color,
                pixels: n,
                cx: sx / n as f64,
                cy: sy / n as f64,
            });
        }
    }
    Ok(blobs)
}

fn largest<'a>(it: impl Iterator<Item = &'a Blob>) -> Option<&'a Blob> {
    // ties resolve to the first blob in scan order
    it.fold(None, |best: Option<&Blob>, b| match best {
        Some(x) if x.pixels >= b.pixels => Some(x),
        _ => Some(b),
    })
}

/// Scores an image in `[0, 1]` against the scene it was prompted with.
pub fn compliance_score(img: &Tensor, s: &SceneSpec) -> Result<ComplianceReport> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let blobs = find_blobs(img)?;
    let regions: Vec<Region> = s.objects.iter().map(|o| o.region).collect();
    let attributed: Vec<Option<Region>> = blobs
        .iter()
        .map(|b| {
            let dist = |r: Region| {
                let (fx, fy) = r.centre_frac();
                (b.cx - fx * w as f64).powi(2) + (b.cy - fy * h as f64).powi(2)
            };
            regions
                .iter()
                .copied()
                .filter(|r| r.contains(b.cx, b.cy, w, h))
                .fold(None, |best: Option<Region>, r| match best {
                    Some(x) if dist(x) <= dist(r) => Some(x),
                    _ => Some(r),
                })
        })
        .collect();

    let n = s.objects.len().max(1) as f64;
    let (mut presence, mut binding, mut placement) = (0.0, 0.0, 0.0);
    for o in &s.objects {
        let in_region = blobs.iter().zip(&attributed).filter(|(_, a)| **a == Some(o.region)).map(|(b, _)| b);
        let dominant = largest(in_region);
        presence += dominant.is_some() as u8 as f64;
        binding += dominant.is_some_and(|b| b.color == o.color) as u8 as f64;
        let by_color = largest(blobs.iter().filter(|b| b.color == o.color));
        placement += by_color.is_some_and(|b| o.region.contains(b.cx, b.cy, w, h)) as u8 as f64;
    }
    Ok(ComplianceReport::from_components(presence / n, binding / n, placement / n))
}

/// Image latent in `[-1, 1]` from an image in `[0, 1]`.
pub fn image_to_latent(img: &Tensor) -> Tensor {
    Tensor::new(img.shape().to_vec(), img.data().iter().map(|v| 2.0 * v - 1.0).collect()).expect("same shape")
}

/// Inverse of [`image_to_latent`], clamped to `[0, 1]`.
pub fn latent_to_image(z: &Tensor) -> Tensor {
    Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()).expect("same shape")
}
