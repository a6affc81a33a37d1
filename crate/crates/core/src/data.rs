//! Binary SITS tile format, dataset index, temporal resampling, flip
//! augmentation, band normalization, and a synthetic phenology dataset
//! generator for desk-scale experiments.
//!
//! Tile file layout (little-endian): magic `SIT1`; u16 T, C, H, W, K,
//! reserved(0) — a 16-byte header — then `T*C*H*W` f32 values ordered
//! t-major (then c, h, w; w fastest), then `H*W` u8 labels row-major.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::render;
use crate::rng::SplitMix64;

pub const IGNORE_LABEL: u8 = 255;
const TILE_MAGIC: &[u8; 4] = b"SIT1";
/// Sentinel-2 style digital-number scale for [`normalize_bands`].
pub const REFLECTANCE_SCALE: f64 = 10000.0;
/// Synthetic phenology noise level.
pub const SYNTH_NOISE_STD: f64 = 0.05;

/// One sample: a `T x C x H x W` reflectance volume plus an `H x W` label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SitsTile {
    pub time_steps: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// `T*C*H*W` reflectances in [0, 1], t-major then c, h, w.
    pub values: Vec<f32>,
    /// `H*W` class ids; [`IGNORE_LABEL`] marks unscored pixels.
    pub labels: Vec<u8>,
}

impl SitsTile {
    pub fn new(
        time_steps: usize,
        bands: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        values: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let tile = SitsTile { time_steps, bands, height, width, num_classes, values, labels };
        tile.validate()?;
        Ok(tile)
    }

    fn validate(&self) -> Result<()> {
        let volume = self.time_steps * self.bands * self.height * self.width;
        if volume == 0 {
            return Err(Error::dim("tile extents must all be positive"));
        }
        if self.values.len() != volume {
            return Err(Error::dim(format!(
                "tile declares {volume} values but holds {}",
                self.values.len()
            )));
        }
        if self.labels.len() != self.height * self.width {
            return Err(Error::dim(format!(
                "tile declares {} label pixels but holds {}",
                self.height * self.width,
                self.labels.len()
            )));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Range(format!(
                "tile class count {} outside [1, 255]",
                self.num_classes
            )));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= self.num_classes)
        {
            return Err(Error::Range(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("tile holds non-finite reflectances".into()));
        }
        Ok(())
    }

    pub fn value_at(&self, t: usize, c: usize, h: usize, w: usize) -> f32 {
        self.values[((t * self.bands + c) * self.height + h) * self.width + w]
    }

    pub fn label_at(&self, h: usize, w: usize) -> u8 {
        self.labels[h * self.width + w]
    }
}

fn put_u16(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u16).to_le_bytes());
}

/// Serialize a tile to its wire format.
pub fn encode_tile(tile: &SitsTile) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + tile.values.len() * 4 + tile.labels.len());
    buf.extend_from_slice(TILE_MAGIC);
    put_u16(&mut buf, tile.time_steps);
    put_u16(&mut buf, tile.bands);
    put_u16(&mut buf, tile.height);
    put_u16(&mut buf, tile.width);
    put_u16(&mut buf, tile.num_classes);
    put_u16(&mut buf, 0); // reserved
    for v in &tile.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&tile.labels);
    buf
}

fn read_u16(bytes: &[u8], offset: usize) -> Result<u16> {
    bytes
        .get(offset..offset + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

/// Parse a tile, reporting the byte offset of any malformed field.
pub fn decode_tile(bytes: &[u8]) -> Result<SitsTile> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "file shorter than the 16-byte header"));
    }
    if &bytes[..4] != TILE_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"SIT1\"", &bytes[..4])));
    }
    let t = read_u16(bytes, 4)? as usize;
    let c = read_u16(bytes, 6)? as usize;
    let h = read_u16(bytes, 8)? as usize;
    let w = read_u16(bytes, 10)? as usize;
    let k = read_u16(bytes, 12)? as usize;
    let reserved = read_u16(bytes, 14)?;
    if reserved != 0 {
        return Err(Error::format(14, format!("reserved field must be 0, got {reserved}")));
    }
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::format(4, format!("zero extent in header ({t}, {c}, {h}, {w})")));
    }
    let volume = t * c * h * w;
    let expected = 16 + volume * 4 + h * w;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for this header, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(volume);
    for i in 0..volume {
        let off = 16 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("length checked"));
        if !v.is_finite() {
            return Err(Error::format(off as u64, "non-finite reflectance value"));
        }
        values.push(v);
    }
    let labels_off = 16 + volume * 4;
    let labels = bytes[labels_off..].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l != IGNORE_LABEL && l as usize >= k) {
        return Err(Error::format(
            (labels_off + pos) as u64,
            format!("label {} out of range for {k} classes", labels[pos]),
        ));
    }
    SitsTile::new(t, c, h, w, k, values, labels)
}

pub fn save_tile(tile: &SitsTile, path: &Path) -> Result<()> {
    tile.validate()?;
    fs::write(path, encode_tile(tile))?;
    Ok(())
}

pub fn load_tile(path: &Path) -> Result<SitsTile> {
    decode_tile(&fs::read(path)?)
}

/// Deterministic frame selection to `target` steps: output frame `k` takes
/// input frame `floor(k * T / target)`. No interpolation.
pub fn temporal_resample(tile: &SitsTile, target: usize) -> Result<SitsTile> {
    if target == 0 || target % 16 != 0 {
        return Err(Error::Config(format!(
            "target time length must be a positive multiple of 16, got {target}"
        )));
    }
    if target == tile.time_steps {
        return Ok(tile.clone());
    }
    let frame = tile.bands * tile.height * tile.width;
    let mut values = Vec::with_capacity(target * frame);
    for k in 0..target {
        let src = k * tile.time_steps / target;
        values.extend_from_slice(&tile.values[src * frame..(src + 1) * frame]);
    }
    SitsTile::new(
        target,
        tile.bands,
        tile.height,
        tile.width,
        tile.num_classes,
        values,
        tile.labels.clone(),
    )
}

fn flip_axis(tile: &mut SitsTile, horizontal: bool) {
    let (h, w) = (tile.height, tile.width);
    for plane in tile.values.chunks_exact_mut(h * w) {
        if horizontal {
            for row in plane.chunks_exact_mut(w) {
                row.reverse();
            }
        } else {
            for r in 0..h / 2 {
                for c in 0..w {
                    plane.swap(r * w + c, (h - 1 - r) * w + c);
                }
            }
        }
    }
    if horizontal {
        for row in tile.labels.chunks_exact_mut(w) {
            row.reverse();
        }
    } else {
        for r in 0..h / 2 {
            for c in 0..w {
                tile.labels.swap(r * w + c, (h - 1 - r) * w + c);
            }
        }
    }
}

/// Vertical then horizontal flip, each applied with probability 1/2 drawn
/// from `rng` (one draw per axis, in that order). Values and labels move
/// identically.
pub fn augment_flip(tile: &SitsTile, rng: &mut SplitMix64) -> SitsTile {
    let mut out = tile.clone();
    if rng.coin() {
        flip_axis(&mut out, false);
    }
    if rng.coin() {
        flip_axis(&mut out, true);
    }
    out
}

/// Map raw integer reflectances to [0, 1]: `min(raw / 10000, 1)`.
pub fn normalize_bands(raw: &[u32]) -> Vec<f32> {
    raw.iter().map(|&v| ((v as f64 / REFLECTANCE_SCALE).min(1.0)) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Tile files with split assignments plus the class table, rooted at one
/// directory holding `splits.txt` and `classes.txt`.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<(String, Split)>,
    pub classes: Vec<ClassDef>,
}

impl DatasetIndex {
    /// Read `splits.txt` and `classes.txt`, checking that every referenced
    /// tile exists and carries a parseable header.
    pub fn load(root: &Path) -> Result<Self> {
        let splits_path = root.join("splits.txt");
        let text = fs::read_to_string(&splits_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", splits_path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (name, split) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(s), None) => (n, s),
                _ => {
                    return Err(Error::Config(format!(
                        "splits.txt line {}: expected `<file> <train|val|test>`",
                        lineno + 1
                    )))
                }
            };
            if entries.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!(
                    "splits.txt line {}: `{name}` listed twice",
                    lineno + 1
                )));
            }
            let split = Split::parse(split)?;
            let path = root.join(name);
            let mut header = [0u8; 16];
            use std::io::Read;
            let mut f = fs::File::open(&path)
                .map_err(|e| Error::Config(format!("tile `{name}` referenced by splits.txt: {e}")))?;
            f.read_exact(&mut header)
                .map_err(|_| Error::format(0, format!("tile `{name}` shorter than its header")))?;
            if &header[..4] != TILE_MAGIC {
                return Err(Error::format(0, format!("tile `{name}` has a bad magic")));
            }
            entries.push((name.to_string(), split));
        }
        let classes = parse_classes(
            &fs::read_to_string(root.join("classes.txt"))
                .map_err(|e| Error::Config(format!("cannot read classes.txt: {e}")))?,
        )?;
        Ok(DatasetIndex { root: root.to_path_buf(), entries, classes })
    }

    pub fn save(&self) -> Result<()> {
        let mut splits = String::new();
        for (name, split) in &self.entries {
            splits.push_str(&format!("{name} {}\n", split.as_str()));
        }
        fs::write(self.root.join("splits.txt"), splits)?;
        let mut classes = String::new();
        for c in &self.classes {
            classes.push_str(&format!(
                "{} {} {} {} {}\n",
                c.id, c.name, c.color[0], c.color[1], c.color[2]
            ));
        }
        fs::write(self.root.join("classes.txt"), classes)?;
        Ok(())
    }

    pub fn files(&self, split: Split) -> Vec<&str> {
        self.entries.iter().filter(|(_, s)| *s == split).map(|(n, _)| n.as_str()).collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SitsTile>> {
        self.files(split).into_iter().map(|name| load_tile(&self.root.join(name))).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

fn parse_classes(text: &str) -> Result<Vec<ClassDef>> {
    let mut classes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::Config(format!(
                "classes.txt line {}: expected `<id> <name> <r> <g> <b>`",
                lineno + 1
            )));
        }
        let parse_u8 = |s: &str, what: &str| {
            s.parse::<u8>()
                .map_err(|_| Error::Config(format!("classes.txt line {}: bad {what} `{s}`", lineno + 1)))
        };
        classes.push(ClassDef {
            id: parse_u8(parts[0], "id")?,
            name: parts[1].to_string(),
            color: [
                parse_u8(parts[2], "red")?,
                parse_u8(parts[3], "green")?,
                parse_u8(parts[4], "blue")?,
            ],
        });
    }
    if classes.is_empty() {
        return Err(Error::Config("classes.txt lists no classes".into()));
    }
    Ok(classes)
}

/// Noiseless per-class reflectance curve: a sinusoid whose mean level steps
/// with `class % 3` and whose phase steps with `class / 3`, keeping any two
/// class profiles at least 0.15 apart in max-norm for up to 24 classes.
pub fn class_profile(
    class: usize,
    num_classes: usize,
    band: usize,
    t: usize,
    time_steps: usize,
) -> f64 {
    let amplitude = 0.25;
    let mean = 0.25 + 0.16 * (class % 3) as f64;
    let groups = num_classes.div_ceil(3).max(1);
    let phase = std::f64::consts::TAU * (class / 3) as f64 / groups as f64 + 0.37 * band as f64;
    mean + amplitude * (std::f64::consts::TAU * t as f64 / time_steps as f64 + phase).sin()
}

/// Synthetic dataset description. `split_counts`, when set, overrides the
/// default 60/20/20 assignment.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_tiles: usize,
    pub num_classes: usize,
    pub time_steps: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub split_counts: Option<(usize, usize, usize)>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tiles == 0 {
            return Err(Error::Config("num_tiles must be positive".into()));
        }
        if !(2..=24).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "synthetic generator supports 2..=24 classes, got {}",
                self.num_classes
            )));
        }
        if self.time_steps == 0 || self.time_steps % 16 != 0 {
            return Err(Error::Config(format!(
                "time_steps must be a positive multiple of 16, got {}",
                self.time_steps
            )));
        }
        if self.bands == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("bands, height, and width must be positive".into()));
        }
        if let Some((tr, va, te)) = self.split_counts {
            if tr + va + te != self.num_tiles {
                return Err(Error::Config(format!(
                    "split counts {tr}+{va}+{te} do not sum to {} tiles",
                    self.num_tiles
                )));
            }
        }
        Ok(())
    }

    fn splits(&self) -> (usize, usize, usize) {
        match self.split_counts {
            Some(c) => c,
            None => {
                let tr = self.num_tiles * 6 / 10;
                let va = self.num_tiles * 2 / 10;
                (tr, va, self.num_tiles - tr - va)
            }
        }
    }
}

/// Generate one tile: a Voronoi partition of 6..=12 field centers, each
/// field a random class, pixel values following the class phenology curve
/// plus Gaussian noise, clamped to [0, 1].
pub fn synth_tile(spec: &SynthSpec, rng: &mut SplitMix64) -> SitsTile {
    let (k, t_, c_, h_, w_) =
        (spec.num_classes, spec.time_steps, spec.bands, spec.height, spec.width);
    let num_fields = 6 + rng.below(7) as usize;
    let mut centers = Vec::with_capacity(num_fields);
    let mut field_class = Vec::with_capacity(num_fields);
    for _ in 0..num_fields {
        let cx = rng.below(w_ as u64) as i64;
        let cy = rng.below(h_ as u64) as i64;
        centers.push((cy, cx));
        field_class.push(rng.below(k as u64) as u8);
    }
    let mut labels = Vec::with_capacity(h_ * w_);
    for y in 0..h_ as i64 {
        for x in 0..w_ as i64 {
            let mut best = 0usize;
            let mut best_d = i64::MAX;
            for (i, &(cy, cx)) in centers.iter().enumerate() {
                let d = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            labels.push(field_class[best]);
        }
    }
    let mut values = Vec::with_capacity(t_ * c_ * h_ * w_);
    for t in 0..t_ {
        for c in 0..c_ {
            for p in 0..h_ * w_ {
                let class = labels[p] as usize;
                let v = class_profile(class, k, c, t, t_) + rng.normal() * SYNTH_NOISE_STD;
                values.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    SitsTile { time_steps: t_, bands: c_, height: h_, width: w_, num_classes: k, values, labels }
}

/// Write `num_tiles` synthetic tiles plus `splits.txt` and `classes.txt`
/// into `dir`; byte-identical for identical specs.
pub fn synth_dataset(dir: &Path, spec: &SynthSpec) -> Result<DatasetIndex> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut rng = SplitMix64::new(spec.seed);
    let (n_train, n_val, _) = spec.splits();
    let mut entries = Vec::with_capacity(spec.num_tiles);
    for i in 0..spec.num_tiles {
        let tile = synth_tile(spec, &mut rng);
        let name = format!("tile_{i:05}.sit");
        save_tile(&tile, &dir.join(&name))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push((name, split));
    }
    let palette = render::default_palette(spec.num_classes);
    let classes = (0..spec.num_classes)
        .map(|id| ClassDef { id: id as u8, name: format!("class_{id}"), color: palette[id] })
        .collect();
    let index = DatasetIndex { root: dir.to_path_buf(), entries, classes };
    index.save()?;
    Ok(index)
}
