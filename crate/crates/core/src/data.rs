//! Synthetic sprite videos with ground-truth keypoints and flow, plus frame I/O.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::keypoints::KeypointSet;
use crate::metrics::KeypointOracle;
use crate::primitives::{normalized_coord, DeformationField, Frame};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeStyle {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Circumradius in pixels at unit scale.
    pub radius: f64,
}

/// Static low-frequency background: `base + Σ amplitude·sin(fx·u + fy·v + phase)` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    pub waves: Vec<[f64; 5]>,
}

/// Everything that stays fixed across the clips of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteIdentity {
    pub shapes: Vec<ShapeStyle>,
    pub background: Background,
}

/// Pose of one shape in one frame, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeState {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpriteConfig {
    pub height: usize,
    pub width: usize,
    pub clip_length: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Translation speed range, pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Largest rotation rate, radians per frame.
    pub max_spin: f64,
    /// Relative amplitude of the periodic scale change.
    pub scale_amplitude: f64,
    /// Std-dev of the per-frame heading random walk, radians.
    pub heading_noise: f64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            clip_length: 16,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 7.0,
            max_radius: 10.0,
            min_speed: 1.0,
            max_speed: 1.5,
            max_spin: 0.05,
            scale_amplitude: 0.05,
            heading_noise: 0.15,
        }
    }
}

impl SpriteConfig {
    /// Every shape is motionless.
    pub fn static_scene(mut self) -> Self {
        self.min_speed = 0.0;
        self.max_speed = 0.0;
        self.max_spin = 0.0;
        self.scale_amplitude = 0.0;
        self.heading_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.clip_length >= 1, "clip length must be positive");
        ensure!(
            self.min_shapes >= 1 && self.max_shapes >= self.min_shapes,
            "shape count range {}..={} is invalid",
            self.min_shapes,
            self.max_shapes
        );
        ensure!(
            self.min_radius > 0.0 && self.max_radius >= self.min_radius,
            "radius range is invalid"
        );
        ensure!(
            self.min_speed >= 0.0 && self.max_speed >= self.min_speed,
            "speed range is invalid"
        );
        ensure!(
            (0.0..1.0).contains(&self.scale_amplitude),
            "scale amplitude must be in [0, 1)"
        );
        let extent = 2.0 * (self.max_radius * (1.0 + self.scale_amplitude) + 1.0);
        ensure!(
            extent < self.height.min(self.width) as f64,
            "shapes of radius {} do not fit a {}x{} canvas",
            self.max_radius,
            self.height,
            self.width
        );
        Ok(())
    }

    fn margin(&self, radius: f64) -> f64 {
        radius * (1.0 + self.scale_amplitude) + 1.0
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.1, 0.85],
    [0.1, 0.85, 0.9],
    [0.98, 0.55, 0.05],
    [0.05, 0.05, 0.05],
];

impl SpriteIdentity {
    pub fn random(rng: &mut ChaCha8Rng, cfg: &SpriteConfig) -> Result<Self> {
        cfg.validate()?;
        let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
        ensure!(n <= PALETTE.len(), "at most {} shapes are supported", PALETTE.len());
        let colors = index::sample(rng, PALETTE.len(), n);
        let shapes = colors
            .iter()
            .map(|c| ShapeStyle {
                kind: [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle][rng.random_range(0..3)],
                color: PALETTE[c],
                radius: rng.random_range(cfg.min_radius..=cfg.max_radius),
            })
            .collect();
        let base = [0.0; 3].map(|_| rng.random_range(0.4..0.6));
        let waves = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.0..3.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.03..0.08),
                ]
            })
            .collect();
        Ok(Self {
            shapes,
            background: Background { base, waves },
        })
    }

    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.shapes.iter().map(|s| s.color).collect()
    }
}

impl Background {
    fn value(&self, channel: usize, u: f64, v: f64) -> f64 {
        // Each wave's first entry picks the channel weighting.
        let mut x = self.base[channel];
        for w in &self.waves {
            let gain = 1.0 + 0.5 * (w[0] + channel as f64).sin();
            x += w[4] * gain * (w[1] * PI * u + w[2] * PI * v + w[3]).sin();
        }
        x.clamp(0.0, 1.0)
    }
}

/// Vertices of a shape at the given pose, pixel units.
fn vertices(style: &ShapeStyle, s: &ShapeState) -> Vec<(f64, f64)> {
    let (count, offset) = match style.kind {
        ShapeKind::Disc => (4, 0.0),
        ShapeKind::Square => (4, PI / 4.0),
        ShapeKind::Triangle => (3, -PI / 2.0),
    };
    let r = style.radius * s.scale;
    (0..count)
        .map(|k| {
            let a = s.angle + offset + 2.0 * PI * k as f64 / count as f64;
            (s.x + r * a.cos(), s.y + r * a.sin())
        })
        .collect()
}

/// Signed distance in pixels, negative inside.
fn signed_distance(style: &ShapeStyle, s: &ShapeState, p: (f64, f64)) -> f64 {
    if style.kind == ShapeKind::Disc {
        return ((p.0 - s.x).powi(2) + (p.1 - s.y).powi(2)).sqrt() - style.radius * s.scale;
    }
    let v = vertices(style, s);
    let mut dist = f64::INFINITY;
    let mut inside = true;
    for k in 0..v.len() {
        let (a, b) = (v[k], v[(k + 1) % v.len()]);
        let (ex, ey) = (b.0 - a.0, b.1 - a.1);
        let (px, py) = (p.0 - a.0, p.1 - a.1);
        let t = ((px * ex + py * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        dist = dist.min(((px - t * ex).powi(2) + (py - t * ey).powi(2)).sqrt());
        // Vertices run clockwise on screen (y down), so interior points are on the positive side.
        if ex * py - ey * px < 0.0 {
            inside = false;
        }
    }
    if inside {
        -dist
    } else {
        dist
    }
}

/// Maps a pixel position through a shape's motion from pose `to` back to pose `from`.
fn carry(to: &ShapeState, from: &ShapeState, p: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = ((p.0 - to.x) / to.scale, (p.1 - to.y) / to.scale);
    let a = from.angle - to.angle;
    let (c, s) = (a.cos(), a.sin());
    (from.x + from.scale * (c * dx - s * dy), from.y + from.scale * (s * dx + c * dy))
}

/// One identity moving through one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteScene {
    pub identity: SpriteIdentity,
    pub height: usize,
    pub width: usize,
    /// `states[t][k]`: pose of shape `k` in frame `t`.
    pub states: Vec<Vec<ShapeState>>,
}

impl SpriteScene {
    /// Random trajectories for a given identity.
    pub fn animate(identity: SpriteIdentity, rng: &mut ChaCha8Rng, cfg: &SpriteConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let noise = Normal::new(0.0, cfg.heading_noise.max(1e-300)).expect("positive std-dev");
        let mut tracks = Vec::with_capacity(identity.shapes.len());
        for style in &identity.shapes {
            let m = cfg.margin(style.radius);
            let (lo_x, hi_x, lo_y, hi_y) = (m, w - 1.0 - m, m, h - 1.0 - m);
            let mut x = rng.random_range(lo_x..=hi_x);
            let mut y = rng.random_range(lo_y..=hi_y);
            let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
            let mut heading = rng.random_range(0.0..2.0 * PI);
            let wobble = (rng.random_range(0.2..0.5), rng.random_range(0.2..0.6), rng.random_range(0.0..2.0 * PI));
            let spin = if cfg.max_spin > 0.0 { rng.random_range(-cfg.max_spin..=cfg.max_spin) } else { 0.0 };
            let angle0 = rng.random_range(0.0..2.0 * PI);
            let (scale_freq, scale_phase) = (rng.random_range(0.2..0.5), rng.random_range(0.0..2.0 * PI));
            let mut track = Vec::with_capacity(cfg.clip_length);
            for t in 0..cfg.clip_length {
                let tf = t as f64;
                track.push(ShapeState {
                    x,
                    y,
                    angle: angle0 + spin * tf,
                    scale: 1.0 + cfg.scale_amplitude * (scale_freq * tf + scale_phase).sin(),
                });
                if speed > 0.0 {
                    heading += wobble.0 * (wobble.1 * tf + wobble.2).sin() * wobble.1 + noise.sample(rng);
                    let (mut nx, mut ny) = (x + speed * heading.cos(), y + speed * heading.sin());
                    // Reflect at the walls so the whole shape stays on the canvas.
                    if nx < lo_x || nx > hi_x {
                        heading = PI - heading;
                        nx = nx.clamp(lo_x, hi_x);
                    }
                    if ny < lo_y || ny > hi_y {
                        heading = -heading;
                        ny = ny.clamp(lo_y, hi_y);
                    }
                    (x, y) = (nx, ny);
                }
            }
            tracks.push(track);
        }
        let states = (0..cfg.clip_length).map(|t| tracks.iter().map(|tr| tr[t]).collect()).collect();
        Ok(Self {
            identity,
            height: cfg.height,
            width: cfg.width,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check_index(&self, t: usize) -> Result<()> {
        ensure!(t < self.len(), "frame {t} out of range for a {}-frame clip", self.len());
        Ok(())
    }

    pub fn render(&self, t: usize) -> Result<Frame> {
        self.check_index(t)?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for i in 0..h {
            for j in 0..w {
                let (u, v) = (normalized_coord(j, w), normalized_coord(i, h));
                let mut px = [0.0; 3];
                for (c, slot) in px.iter_mut().enumerate() {
                    *slot = self.identity.background.value(c, u, v);
                }
                for (style, state) in self.identity.shapes.iter().zip(&self.states[t]) {
                    let d = signed_distance(style, state, (j as f64, i as f64));
                    let alpha = (0.5 - d).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - alpha) + style.color[c] * alpha;
                        }
                    }
                }
                for c in 0..3 {
                    data[c * plane + i * w + j] = px[c];
                }
            }
        }
        Frame::new(Tensor::from_vec(&[3, h, w], data))
    }

    pub fn render_all(&self) -> Result<VideoClip> {
        VideoClip::new((0..self.len()).map(|t| self.render(t)).collect::<Result<_>>()?)
    }

    /// Centre then vertices of every shape, normalized coordinates.
    pub fn keypoints(&self, t: usize) -> Result<KeypointSet> {
        self.check_index(t)?;
        let (sx, sy) = (2.0 / (self.width - 1) as f64, 2.0 / (self.height - 1) as f64);
        let mut pts = Vec::new();
        for (style, s) in self.identity.shapes.iter().zip(&self.states[t]) {
            pts.push((s.x * sx - 1.0, s.y * sy - 1.0));
            for (x, y) in vertices(style, s) {
                pts.push((x * sx - 1.0, y * sy - 1.0));
            }
        }
        KeypointSet::new(pts)
    }

    /// Sampling field that warps frame `from` into frame `to`: background pixels
    /// get zero offset, pixels inside a shape in `to` follow that shape back.
    pub fn flow(&self, from: usize, to: usize) -> Result<DeformationField> {
        self.check_index(from)?;
        self.check_index(to)?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let (sx, sy) = (2.0 / (w - 1) as f64, 2.0 / (h - 1) as f64);
        let mut out = Tensor::zeros(&[2, h, w]);
        for i in 0..h {
            for j in 0..w {
                let p = (j as f64, i as f64);
                // Topmost shape covering the pixel wins.
                let hit = self
                    .identity
                    .shapes
                    .iter()
                    .zip(&self.states[to])
                    .enumerate()
                    .rev()
                    .find(|(_, (style, s))| signed_distance(style, s, p) < 0.5);
                if let Some((k, (_, s_to))) = hit {
                    let q = carry(s_to, &self.states[from][k], p);
                    out.data_mut()[i * w + j] = (q.0 - p.0) * sx;
                    out.data_mut()[plane + i * w + j] = (q.1 - p.1) * sy;
                }
            }
        }
        DeformationField::new(out)
    }
}

/// Deterministic scene for a seed: identity and motion both drawn from it.
pub fn generate_scene(seed: u64, cfg: &SpriteConfig) -> Result<SpriteScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = SpriteIdentity::random(&mut rng, cfg)?;
    SpriteScene::animate(identity, &mut rng, cfg)
}

/// An ordered list of equally sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        ensure!(!frames.is_empty(), "a clip needs at least one frame");
        let (h, w) = (frames[0].height(), frames[0].width());
        for (i, f) in frames.iter().enumerate() {
            ensure!(
                (f.height(), f.width()) == (h, w),
                "frame {i} is {}x{}, expected {h}x{w}",
                f.height(),
                f.width()
            );
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let buf: Vec<u8> = frame.to_hwc().into_iter().map(quantize).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::io(path, e))
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hwc: Vec<f64> = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Frame::from_hwc(h, w, &hwc).map_err(|e| Error::io(path, e))
}

/// Writes `frame_%05d.png` files into `dir`, creating it if needed.
pub fn save_frames(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        save_frame(f, &dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

/// Reads every image in `dir` in lexicographic order.
pub fn load_frames(dir: &Path) -> Result<VideoClip> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::io(dir, "no frames found"));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = load_frame(p)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if (f.height(), f.width()) != (first.height(), first.width()) {
                return Err(Error::io(
                    p,
                    format!(
                        "frame is {}x{}, earlier frames are {}x{}",
                        f.height(),
                        f.width(),
                        first.height(),
                        first.width()
                    ),
                ));
            }
        }
        frames.push(f);
    }
    VideoClip::new(frames)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub name: String,
    pub clip: VideoClip,
    /// Ground truth, present for generated data.
    pub keypoints: Option<Vec<KeypointSet>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRecord {
    pub name: String,
    pub split: Split,
    pub colors: Vec<[f64; 3]>,
    pub clips: Vec<ClipRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub clips_per_identity: usize,
    pub sprite: SpriteConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_identities: 20,
            test_identities: 5,
            clips_per_identity: 2,
            sprite: SpriteConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    pub height: usize,
    pub width: usize,
    pub identities: Vec<IdentityRecord>,
}

/// Names and splits stored next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub identities: Vec<ManifestIdentity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub name: String,
    pub split: Split,
    pub colors: Vec<[f64; 3]>,
    pub clips: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ClipDataset {
    /// Disjoint train/test identities, every clip keyed off `seed`.
    pub fn generate(seed: u64, cfg: &DatasetConfig) -> Result<Self> {
        cfg.sprite.validate()?;
        ensure!(cfg.clips_per_identity >= 1, "need at least one clip per identity");
        let total = cfg.train_identities + cfg.test_identities;
        let mut identities = Vec::with_capacity(total);
        for i in 0..total {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
            let identity = SpriteIdentity::random(&mut rng, &cfg.sprite)?;
            let clips = (0..cfg.clips_per_identity)
                .map(|c| {
                    let scene = SpriteScene::animate(identity.clone(), &mut rng, &cfg.sprite)?;
                    Ok(ClipRecord {
                        name: format!("clip_{c:03}"),
                        clip: scene.render_all()?,
                        keypoints: Some((0..scene.len()).map(|t| scene.keypoints(t)).collect::<Result<_>>()?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            identities.push(IdentityRecord {
                name: format!("id_{i:04}"),
                split: if i < cfg.train_identities { Split::Train } else { Split::Test },
                colors: identity.colors(),
                clips,
            });
        }
        Ok(Self {
            height: cfg.sprite.height,
            width: cfg.sprite.width,
            identities,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IdentityRecord> {
        self.identities.iter().filter(move |i| i.split == split)
    }

    pub fn clips(&self, split: Split) -> impl Iterator<Item = (&IdentityRecord, &ClipRecord)> {
        self.split(split).flat_map(|id| id.clips.iter().map(move |c| (id, c)))
    }

    pub fn identity_names(&self, split: Split) -> BTreeSet<String> {
        self.split(split).map(|i| i.name.clone()).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            height: self.height,
            width: self.width,
            identities: self
                .identities
                .iter()
                .map(|i| ManifestIdentity {
                    name: i.name.clone(),
                    split: i.split,
                    colors: i.colors.clone(),
                    clips: i.clips.iter().map(|c| c.name.clone()).collect(),
                })
                .collect(),
        }
    }

    /// `<root>/<split>/<identity>/<clip>/frame_%05d.png` plus the manifest.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for id in &self.identities {
            for c in &id.clips {
                save_frames(&c.clip, &root.join(id.split.name()).join(&id.name).join(&c.name))?;
            }
        }
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Format {
            what: "manifest",
            message: e.to_string(),
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "manifest",
            message: e.to_string(),
        })?;
        let identities = manifest
            .identities
            .into_iter()
            .map(|m| {
                let clips = m
                    .clips
                    .iter()
                    .map(|c| {
                        let dir = root.join(m.split.name()).join(&m.name).join(c);
                        let clip = load_frames(&dir)?;
                        if (clip.height(), clip.width()) != (manifest.height, manifest.width) {
                            return Err(Error::io(&dir, "clip size disagrees with the manifest"));
                        }
                        Ok(ClipRecord {
                            name: c.clone(),
                            clip,
                            keypoints: None,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(IdentityRecord {
                    name: m.name,
                    split: m.split,
                    colors: m.colors,
                    clips,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: manifest.height,
            width: manifest.width,
            identities,
        })
    }
}

/// One training example drawn from a single clip.
#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub source: Frame,
    pub references: Vec<Frame>,
    pub driving: Frame,
    /// Frame indices: source, references…, driving.
    pub indices: Vec<usize>,
}

/// Source, `n` references and a driving frame at distinct positions of `clip`.
pub fn sample_from_clip(clip: &VideoClip, rng: &mut impl Rng, n: usize) -> Result<TrainingItem> {
    ensure!(
        clip.len() >= n + 2,
        "clip of {} frames cannot supply {} references plus source and driving",
        clip.len(),
        n
    );
    let idx = index::sample(rng, clip.len(), n + 2).into_vec();
    let f = |i: usize| clip.frames()[i].clone();
    Ok(TrainingItem {
        source: f(idx[0]),
        references: idx[1..=n].iter().map(|&i| f(i)).collect(),
        driving: f(idx[n + 1]),
        indices: idx,
    })
}

/// Uniform clip from the training split, then [`sample_from_clip`].
pub fn sample_training_item(dataset: &ClipDataset, rng: &mut impl Rng, n: usize) -> Result<TrainingItem> {
    let clips: Vec<&ClipRecord> = dataset.clips(Split::Train).map(|(_, c)| c).collect();
    ensure!(!clips.is_empty(), "dataset has no training clips");
    let c = clips[rng.random_range(0..clips.len())];
    sample_from_clip(&c.clip, rng, n)
}

/// Pairs of test clips from different identities, for cross-identity animation.
pub fn animation_pairs(dataset: &ClipDataset, rng: &mut impl Rng, count: usize) -> Result<Vec<(usize, usize)>> {
    let ids: Vec<usize> = (0..dataset.identities.len())
        .filter(|&i| dataset.identities[i].split == Split::Test)
        .collect();
    ensure!(ids.len() >= 2, "need two test identities for animation pairs");
    Ok((0..count)
        .map(|_| {
            let a = ids[rng.random_range(0..ids.len())];
            let mut b = ids[rng.random_range(0..ids.len() - 1)];
            if b == a {
                b = ids[ids.len() - 1];
            }
            (a, b)
        })
        .collect())
}

/// Keypoints at the colour centroids of known sprite colours.
#[derive(Clone, Debug)]
pub struct ColorCentroidOracle {
    pub colors: Vec<[f64; 3]>,
    /// Squared-distance scale of the colour match.
    pub tolerance: f64,
}

impl ColorCentroidOracle {
    pub fn new(colors: Vec<[f64; 3]>) -> Self {
        Self { colors, tolerance: 0.02 }
    }
}

impl KeypointOracle for ColorCentroidOracle {
    fn keypoints(&self, frame: &Frame) -> Result<KeypointSet> {
        ensure!(!self.colors.is_empty(), "oracle has no colours");
        let (h, w) = (frame.height(), frame.width());
        let t = frame.tensor();
        let pts = self
            .colors
            .iter()
            .map(|col| {
                let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
                for i in 0..h {
                    for j in 0..w {
                        let d2: f64 = (0..3).map(|c| (t.at3(c, i, j) - col[c]).powi(2)).sum();
                        let wt = (-d2 / self.tolerance).exp();
                        sw += wt;
                        sx += wt * normalized_coord(j, w);
                        sy += wt * normalized_coord(i, h);
                    }
                }
                if sw < 1e-9 {
                    (0.0, 0.0)
                } else {
                    (sx / sw, sy / sw)
                }
            })
            .collect();
        KeypointSet::new(pts)
    }

    fn describe(&self) -> String {
        format!("sprite colour centroids ({} colours)", self.colors.len())
    }
}
