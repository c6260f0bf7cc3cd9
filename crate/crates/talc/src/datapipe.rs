//! Multi-scene video-text data generation.
//!
//! Three sources feed training manifests:
//!
//! * scene-cut detection over existing videos (content-difference based,
//!   boundary when the mean absolute inter-frame pixel difference exceeds a
//!   threshold), keeping at most the first four scenes;
//! * an external multimodal captioner: the middle frame of each scene plus
//!   the video's common caption are sent to a chat-completions endpoint
//!   which returns one caption per scene;
//! * a synthetic moving-shape generator that renders scripted videos with
//!   exact ground truth, used for desk-scale training and oracle scoring.
//!
//! Manifests are JSON-lines; writes are atomic (temp file + rename).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{frame_to_png, ChatClient, ClientConfig};
use crate::conditioning::{MultiSceneScript, Scenario, MAX_SCENES};
use crate::error::{Result, TalcError};
use crate::rng::Rng;
use crate::video::VideoTensor;

// ── scene-cut detection ─────────────────────────────────────────────────

/// Default content-difference threshold. On the synthetic fixtures any
/// threshold in the stable range [0.2, 0.8] recovers scene boundaries
/// exactly: adjacent background flips produce mean differences of at least
/// ~0.85 while within-scene shape motion stays below ~0.15.
pub const DEFAULT_CUT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MIN_SCENE_LEN: usize = 4;

/// Detected scene starts. `boundaries[0]` is always 0; `used_len` marks the
/// end of the last retained scene (scenes beyond the fourth are discarded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCutResult {
    pub boundaries: Vec<usize>,
    pub used_len: usize,
}

impl SceneCutResult {
    /// Half-open per-scene frame ranges.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (i, &start) in self.boundaries.iter().enumerate() {
            let end = self
                .boundaries
                .get(i + 1)
                .copied()
                .unwrap_or(self.used_len);
            out.push((start, end));
        }
        out
    }

    pub fn num_scenes(&self) -> usize {
        self.boundaries.len()
    }
}

/// Content-difference scene detection: a new scene starts at frame `t` when
/// the mean absolute pixel difference against frame `t-1` exceeds
/// `threshold` and the previous scene already has at least `min_len` frames.
pub fn detect_scenes(video: &VideoTensor, threshold: f64, min_len: usize) -> SceneCutResult {
    let mut boundaries = vec![0usize];
    for t in 1..video.frames {
        let last = *boundaries.last().unwrap();
        if video.mean_abs_frame_diff(t) > threshold && t - last >= min_len {
            boundaries.push(t);
        }
    }
    let mut used_len = video.frames;
    if boundaries.len() > MAX_SCENES {
        used_len = boundaries[MAX_SCENES];
        boundaries.truncate(MAX_SCENES);
    }
    SceneCutResult {
        boundaries,
        used_len,
    }
}

/// Representative frame per scene: the floor midpoint `(start + end - 1) / 2`.
pub fn middle_frames(cuts: &SceneCutResult) -> Vec<usize> {
    cuts.ranges()
        .iter()
        .map(|&(start, end)| (start + end - 1) / 2)
        .collect()
}

// ── captioning ──────────────────────────────────────────────────────────

const CAPTION_PROMPT_TEMPLATE: &str = include_str!("../assets/caption_prompt.txt");

/// The captioner prompt with the common caption substituted. The template is
/// a fixed asset; images are attached separately by the client.
pub fn build_caption_prompt(common_caption: &str) -> String {
    CAPTION_PROMPT_TEMPLATE.replace("{caption}", common_caption)
}

pub fn caption_prompt_template() -> &'static str {
    CAPTION_PROMPT_TEMPLATE
}

/// Ask the external captioner for one caption per frame. Frames are the
/// per-scene middle frames in temporal order.
pub fn caption_scenes(
    video: &VideoTensor,
    frames: &[usize],
    common_caption: &str,
    config: ClientConfig,
) -> Result<Vec<String>> {
    if frames.is_empty() {
        return Err(TalcError::Usage(
            "caption_scenes: no frames to caption".into(),
        ));
    }
    let client = ChatClient::new(config)?;
    let prompt = build_caption_prompt(common_caption);
    let pngs: Vec<Vec<u8>> = frames
        .iter()
        .map(|&f| frame_to_png(video, f))
        .collect::<Result<_>>()?;
    let reply = client.chat_with_images(&prompt, &pngs)?;
    let captions = parse_caption_list(&reply);
    if captions.len() != frames.len() {
        return Err(TalcError::Parse {
            reason: format!(
                "expected {} captions, parsed {}",
                frames.len(),
                captions.len()
            ),
            raw: reply,
        });
    }
    Ok(captions)
}

/// One caption per non-empty line, with list markers stripped.
fn parse_caption_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(strip_list_marker)
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect()
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.strip_prefix('-').unwrap_or(t).trim_start();
    // "1." / "2)" / "Scene 3:" style prefixes.
    let t = if t.to_lowercase().starts_with("scene") {
        t["scene".len()..].trim_start()
    } else {
        t
    };
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix(['.', ')', ':']) {
            return rest.trim();
        }
    }
    if let Some(rest) = t.strip_prefix(':') {
        return rest.trim();
    }
    t.trim()
}

// ── synthetic moving shapes ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Motion {
    pub fn name(&self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Still => "still",
        }
    }

    /// (dx, dy) per frame at unit speed; y grows downward.
    pub fn velocity(&self) -> (f64, f64) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
            Motion::Still => (0.0, 0.0),
        }
    }

    pub const ALL: [Motion; 5] = [
        Motion::Left,
        Motion::Right,
        Motion::Up,
        Motion::Down,
        Motion::Still,
    ];

    pub const MOVING: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];
}

/// Named foreground color; names feed the caption grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl NamedColor {
    pub fn name(&self) -> &'static str {
        match self {
            NamedColor::Red => "red",
            NamedColor::Green => "green",
            NamedColor::Blue => "blue",
            NamedColor::Yellow => "yellow",
            NamedColor::Magenta => "magenta",
            NamedColor::Cyan => "cyan",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            NamedColor::Red => [1.0, -1.0, -1.0],
            NamedColor::Green => [-1.0, 1.0, -1.0],
            NamedColor::Blue => [-1.0, -1.0, 1.0],
            NamedColor::Yellow => [1.0, 1.0, -1.0],
            NamedColor::Magenta => [1.0, -1.0, 1.0],
            NamedColor::Cyan => [-1.0, 1.0, 1.0],
        }
    }

    pub const ALL: [NamedColor; 6] = [
        NamedColor::Red,
        NamedColor::Green,
        NamedColor::Blue,
        NamedColor::Yellow,
        NamedColor::Magenta,
        NamedColor::Cyan,
    ];
}

/// Background palette, spaced far from every foreground color.
pub const BACKGROUNDS: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub shape: Shape,
    pub color: NamedColor,
    pub motion: Motion,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub id: String,
    /// Square canvas side length.
    pub size: usize,
    pub frames_per_scene: usize,
    /// Shape radius in pixels (half side / radius / half height).
    pub shape_radius: f64,
    /// Pixels moved per frame for non-still motions.
    pub speed: f64,
    pub scenes: Vec<SyntheticScene>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() || self.scenes.len() > MAX_SCENES {
            return Err(TalcError::Usage(format!(
                "spec {:?} has {} scenes; need 1..={MAX_SCENES}",
                self.id,
                self.scenes.len()
            )));
        }
        if self.frames_per_scene == 0 {
            return Err(TalcError::Usage("frames_per_scene must be positive".into()));
        }
        if self.shape_radius <= 0.0 || 2.0 * self.shape_radius + 2.0 > self.size as f64 {
            return Err(TalcError::Usage(format!(
                "shape radius {} does not fit a {} pixel canvas",
                self.shape_radius, self.size
            )));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.frames_per_scene * self.scenes.len()
    }

    /// Scene caption from the fixed phrase grammar.
    pub fn caption(&self, scene: usize) -> String {
        let s = &self.scenes[scene];
        match s.motion {
            Motion::Still => format!("a {} {} stays still", s.color.name(), s.shape.name()),
            m => format!("a {} {} moves {}", s.color.name(), s.shape.name(), m.name()),
        }
    }

    pub fn script(&self) -> Result<MultiSceneScript> {
        MultiSceneScript::new(
            self.id.clone(),
            Scenario::Synthetic,
            (0..self.scenes.len()).map(|j| self.caption(j)).collect(),
        )
    }
}

fn inside_shape(shape: Shape, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    match shape {
        Shape::Square => (x - cx).abs() <= r && (y - cy).abs() <= r,
        Shape::Circle => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
        Shape::Triangle => {
            // Upward-pointing: apex at (cx, cy - r), base at cy + r.
            let t = (y - (cy - r)) / (2.0 * r);
            (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * r
        }
    }
}

/// Render a synthetic spec and emit its matching script. The start position
/// is drawn from `rng` over the positions that keep the whole trajectory
/// inside the frame; an infeasible trajectory is a spec error.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    rng: &mut Rng,
) -> Result<(VideoTensor, MultiSceneScript)> {
    spec.validate()?;
    let total = spec.total_frames();
    let r = spec.shape_radius;
    // Cumulative center displacement before each frame.
    let mut disp = Vec::with_capacity(total);
    let (mut dx, mut dy) = (0.0f64, 0.0f64);
    for t in 0..total {
        if t > 0 {
            let scene = t / spec.frames_per_scene;
            let (vx, vy) = spec.scenes[scene].motion.velocity();
            dx += vx * spec.speed;
            dy += vy * spec.speed;
        }
        disp.push((dx, dy));
    }
    let (dx_min, dx_max) = disp
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
            (lo.min(x), hi.max(x))
        });
    let (dy_min, dy_max) = disp
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| {
            (lo.min(y), hi.max(y))
        });
    let side = spec.size as f64;
    // Feasible integer start centers keeping the shape fully inside.
    let x_lo = (r - dx_min).ceil() as i64;
    let x_hi = (side - 1.0 - r - dx_max).floor() as i64;
    let y_lo = (r - dy_min).ceil() as i64;
    let y_hi = (side - 1.0 - r - dy_max).floor() as i64;
    if x_lo > x_hi || y_lo > y_hi {
        return Err(TalcError::Usage(format!(
            "spec {:?}: trajectory exits the frame",
            spec.id
        )));
    }
    let cx0 = rng.uniform_usize(x_lo as usize, x_hi as usize) as f64;
    let cy0 = rng.uniform_usize(y_lo as usize, y_hi as usize) as f64;

    let mut video = VideoTensor::zeros(total, 3, spec.size, spec.size);
    for t in 0..total {
        let scene = &spec.scenes[t / spec.frames_per_scene];
        let (cx, cy) = (cx0 + disp[t].0, cy0 + disp[t].1);
        let fg = scene.color.rgb();
        for y in 0..spec.size {
            for x in 0..spec.size {
                let color = if inside_shape(scene.shape, cx, cy, r, x as f64, y as f64) {
                    fg
                } else {
                    scene.background
                };
                for (c, &v) in color.iter().enumerate() {
                    video.set(t, c, y, x, v);
                }
            }
        }
    }
    let script = spec.script()?;
    Ok((video, script))
}

/// Every caption the phrase grammar can produce; vocabularies built from
/// this cover any synthetic script with zero unknown tokens.
pub fn grammar_phrases() -> Vec<String> {
    let mut out = Vec::new();
    for color in NamedColor::ALL {
        for shape in Shape::ALL {
            for motion in Motion::ALL {
                let phrase = match motion {
                    Motion::Still => format!("a {} {} stays still", color.name(), shape.name()),
                    m => format!("a {} {} moves {}", color.name(), shape.name(), m.name()),
                };
                out.push(phrase);
            }
        }
    }
    out
}

/// Knobs for sampling random synthetic specs.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub size: usize,
    pub frames_per_scene: usize,
    pub shape_radius: f64,
    pub speed: f64,
    /// Relative weights for 1, 2, 3, 4 scenes.
    pub scene_count_weights: [f64; 4],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            size: 16,
            frames_per_scene: 4,
            shape_radius: 2.5,
            speed: 2.0,
            scene_count_weights: [0.15, 0.30, 0.30, 0.25],
        }
    }
}

fn trajectory_feasible(cfg: &CorpusConfig, motions: &[Motion]) -> bool {
    let total = cfg.frames_per_scene * motions.len();
    let (mut dx, mut dy) = (0.0f64, 0.0f64);
    let (mut dx_lo, mut dx_hi, mut dy_lo, mut dy_hi) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for t in 1..total {
        let (vx, vy) = motions[t / cfg.frames_per_scene].velocity();
        dx += vx * cfg.speed;
        dy += vy * cfg.speed;
        dx_lo = dx_lo.min(dx);
        dx_hi = dx_hi.max(dx);
        dy_lo = dy_lo.min(dy);
        dy_hi = dy_hi.max(dy);
    }
    let side = cfg.size as f64;
    let r = cfg.shape_radius;
    (r - dx_lo).ceil() <= (side - 1.0 - r - dx_hi).floor()
        && (r - dy_lo).ceil() <= (side - 1.0 - r - dy_hi).floor()
}

/// Sample a motion sequence whose trajectory fits the canvas. When
/// `distinct` is set the sequence contains at least two different motions
/// (so merged captions stay ambiguous about order).
fn sample_motions(cfg: &CorpusConfig, n: usize, distinct: bool, rng: &mut Rng) -> Vec<Motion> {
    for _ in 0..200 {
        let motions: Vec<Motion> = (0..n).map(|_| *rng.choose(&Motion::ALL)).collect();
        if distinct && n > 1 {
            let first = motions[0];
            if motions.iter().all(|&m| m == first) {
                continue;
            }
        }
        if trajectory_feasible(cfg, &motions) {
            return motions;
        }
    }
    // Still always fits.
    vec![Motion::Still; n]
}

/// Sample one spec: entity (shape + color) and background persist across
/// scenes, motions vary.
pub fn sample_spec(
    id: impl Into<String>,
    n: usize,
    cfg: &CorpusConfig,
    distinct_motions: bool,
    rng: &mut Rng,
) -> SyntheticSpec {
    let shape = *rng.choose(&Shape::ALL);
    let color = *rng.choose(&NamedColor::ALL);
    let background = *rng.choose(&BACKGROUNDS);
    let motions = sample_motions(cfg, n, distinct_motions, rng);
    SyntheticSpec {
        id: id.into(),
        size: cfg.size,
        frames_per_scene: cfg.frames_per_scene,
        shape_radius: cfg.shape_radius,
        speed: cfg.speed,
        scenes: motions
            .into_iter()
            .map(|motion| SyntheticScene {
                shape,
                color,
                motion,
                background,
            })
            .collect(),
    }
}

/// Sample a corpus of specs with the configured scene-count mix.
pub fn sample_corpus(count: usize, cfg: &CorpusConfig, rng: &mut Rng) -> Vec<SyntheticSpec> {
    let total: f64 = cfg.scene_count_weights.iter().sum();
    (0..count)
        .map(|i| {
            let mut pick = rng.next_f64() * total;
            let mut n = 4;
            for (k, &w) in cfg.scene_count_weights.iter().enumerate() {
                if pick < w {
                    n = k + 1;
                    break;
                }
                pick -= w;
            }
            sample_spec(format!("syn{i:04}"), n, cfg, false, rng)
        })
        .collect()
}

// ── manifest ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Captioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRange {
    pub start_frame: usize,
    pub end_frame: usize,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path to a TALCVID1 file or PPM frame directory, relative to the
    /// manifest unless absolute.
    pub video: String,
    pub source_caption: Option<String>,
    pub scenes: Vec<SceneRange>,
    pub provenance: Provenance,
}

impl ManifestRecord {
    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() || self.scenes.len() > MAX_SCENES {
            return Err(TalcError::Format(format!(
                "manifest record {:?} has {} scenes; need 1..={MAX_SCENES}",
                self.video,
                self.scenes.len()
            )));
        }
        let mut expect = 0;
        for s in &self.scenes {
            if s.start_frame != expect || s.end_frame <= s.start_frame {
                return Err(TalcError::Format(format!(
                    "manifest record {:?}: scene ranges must partition the used prefix",
                    self.video
                )));
            }
            if s.caption.trim().is_empty() {
                return Err(TalcError::Format(format!(
                    "manifest record {:?}: empty scene caption",
                    self.video
                )));
            }
            expect = s.end_frame;
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        match self.provenance {
            Provenance::Synthetic => Scenario::Synthetic,
            Provenance::Captioned => Scenario::S3,
        }
    }

    pub fn script(&self, id: &str) -> Result<MultiSceneScript> {
        MultiSceneScript::new(
            id,
            self.scenario(),
            self.scenes.iter().map(|s| s.caption.clone()).collect(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<DatasetManifest> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| TalcError::Format(format!("manifest line {}: {e}", i + 1)))?;
            record.validate()?;
            records.push(record);
        }
        Ok(DatasetManifest { records })
    }

    /// Atomic write: the file is either the previous manifest or the new
    /// one, never a torn intermediate.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, self.to_jsonl())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        DatasetManifest::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Load the referenced videos, pairing each with its script. Unreadable
    /// or mismatched entries are skipped and counted.
    pub fn load_items(&self, base_dir: &Path) -> (Vec<(VideoTensor, MultiSceneScript)>, usize) {
        let mut items = Vec::new();
        let mut skipped = 0;
        for (i, record) in self.records.iter().enumerate() {
            let path = {
                let p = Path::new(&record.video);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base_dir.join(p)
                }
            };
            let id = format!("item{:04}", i);
            let loaded = VideoTensor::load(&path).and_then(|video| {
                let used = record.scenes.last().map(|s| s.end_frame).unwrap_or(0);
                if used > video.frames {
                    return Err(TalcError::Format(format!(
                        "record {:?} references frame {used} of a {}-frame video",
                        record.video, video.frames
                    )));
                }
                let clip = video.slice_frames(0, used)?;
                Ok((clip, record.script(&id)?))
            });
            match loaded {
                Ok(item) => items.push(item),
                Err(_) => skipped += 1,
            }
        }
        (items, skipped)
    }
}
