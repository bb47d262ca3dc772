//! Procedural identity world: seeded identities, blob-face rendering with
//! analytic landmarks, clip synthesis, pair filtering and dataset files.
//!
//! Every frame is a deterministic function of (identity latent, pose):
//! five gaussian blobs whose canonical positions and amplitudes are fixed
//! affine functions of the latent, moved by a rotation/translation/scale
//! pose. Blob centers are the ground-truth landmarks, so the motion metrics
//! downstream never depend on a detector.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const LANDMARKS: usize = 5;
pub const ID_DIM: usize = 8;

/// Hard pose limits; `render_frame` rejects anything outside.
pub const MAX_ANGLE: f64 = 0.5;
pub const MAX_SHIFT_FRAC: f64 = 0.2;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);

// World geometry, in units of min(H, W) / 16 relative to the frame center.
const CANONICAL: [(f64, f64); LANDMARKS] = [
    (-2.0, -1.4), // left eye
    (2.0, -1.4),  // right eye
    (0.0, 0.2),   // nose
    (-1.4, 1.8),  // left mouth corner
    (1.4, 1.8),   // right mouth corner
];
const BLOB_RADIUS: [f64; LANDMARKS] = [1.7, 1.7, 1.5, 1.6, 1.6];
const BASE_AMPLITUDE: f64 = 0.5;
// Identity coupling strengths: position rows and amplitude rows of the fixed
// affine maps below. Bounded so landmarks stay in frame at the pose limits.
const POS_ROW_NORM: f64 = 0.40;
const AMP_ROW_NORM: f64 = 0.50;
const FACE_PAD_UNITS: f64 = 2.2;
const WORLD_SEED: u64 = 0x6661_6365_776F_726C; // world constants stream

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Demographic {
    Man,
    Woman,
    ElderlyMan,
    ElderlyWoman,
    Boy,
    Girl,
    Baby,
}

impl Demographic {
    pub const ALL: [Demographic; 7] = [
        Demographic::Man,
        Demographic::Woman,
        Demographic::ElderlyMan,
        Demographic::ElderlyWoman,
        Demographic::Boy,
        Demographic::Girl,
        Demographic::Baby,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).unwrap()
    }

    /// The subject word used in prompt templates.
    pub fn subject_word(self) -> &'static str {
        match self {
            Demographic::Man => "man",
            Demographic::Woman => "woman",
            Demographic::ElderlyMan => "grandfather",
            Demographic::ElderlyWoman => "grandmother",
            Demographic::Boy => "boy",
            Demographic::Girl => "girl",
            Demographic::Baby => "baby",
        }
    }
}

/// Identity latent plus a demographic tag used only for prompt templating.
#[derive(Debug, Clone)]
pub struct Identity {
    pub z: Tensor,
    pub tag: Demographic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub angle: f64,
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

impl Pose {
    pub const NEUTRAL: Pose = Pose {
        angle: 0.0,
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
    };
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    /// H×W pixels in [0, 1].
    pub pixels: Tensor,
    /// Blob centers, exact affine transform of the canonical template.
    pub landmarks: [(f64, f64); LANDMARKS],
    pub face_region: Rect,
}

/// Fixed affine maps from the identity latent to landmark offsets and blob
/// amplitudes. Shared by every identity; drawn once from a constant stream.
struct WorldMaps {
    pos_rows: [[f64; ID_DIM]; LANDMARKS * 2],
    amp_rows: [[f64; ID_DIM]; LANDMARKS],
}

fn world_maps() -> &'static WorldMaps {
    use std::sync::OnceLock;
    static MAPS: OnceLock<WorldMaps> = OnceLock::new();
    MAPS.get_or_init(|| {
        let mut rng = RngState::new(WORLD_SEED);
        let mut draw_row = |norm: f64| {
            let mut row = [0.0f64; ID_DIM];
            let mut sq = 0.0;
            for r in row.iter_mut() {
                *r = rng.normal();
                sq += *r * *r;
            }
            let inv = norm / sq.sqrt();
            row.iter_mut().for_each(|r| *r *= inv);
            row
        };
        let mut pos_rows = [[0.0; ID_DIM]; LANDMARKS * 2];
        for r in pos_rows.iter_mut() {
            *r = draw_row(POS_ROW_NORM);
        }
        let mut amp_rows = [[0.0; ID_DIM]; LANDMARKS];
        for r in amp_rows.iter_mut() {
            *r = draw_row(AMP_ROW_NORM);
        }
        WorldMaps { pos_rows, amp_rows }
    })
}

fn dot_id(row: &[f64; ID_DIM], z: &Tensor) -> f64 {
    row.iter().zip(z.data()).map(|(a, &b)| a * b as f64).sum()
}

/// Seeded identity draw, rejection-resampled into the norm band [0.5, 2.0].
pub fn make_identity(rng: &mut RngState) -> Identity {
    let tag = Demographic::ALL[rng.below(Demographic::ALL.len() as u64) as usize];
    loop {
        let mut data = [0f32; ID_DIM];
        for v in data.iter_mut() {
            *v = (rng.normal() * 0.5) as f32;
        }
        let norm = data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if (0.5..=2.0).contains(&norm) {
            let z = Tensor::from_vec(&[ID_DIM], data.to_vec()).unwrap();
            return Identity { z, tag };
        }
    }
}

fn check_pose(pose: &Pose, h: usize, w: usize) -> Result<()> {
    if pose.angle.abs() > MAX_ANGLE
        || pose.dx.abs() > MAX_SHIFT_FRAC * w as f64
        || pose.dy.abs() > MAX_SHIFT_FRAC * h as f64
        || pose.scale < SCALE_RANGE.0
        || pose.scale > SCALE_RANGE.1
    {
        return Err(Error::Contract(format!(
            "pose out of range: angle={} dx={} dy={} scale={} for {h}x{w}",
            pose.angle, pose.dx, pose.dy, pose.scale
        )));
    }
    Ok(())
}

/// Landmark positions for (identity, pose) without rendering; the analytic
/// ground truth the rendered frame must match.
pub fn landmark_positions(
    id: &Identity,
    pose: &Pose,
    h: usize,
    w: usize,
) -> [(f64, f64); LANDMARKS] {
    let maps = world_maps();
    let unit = (h.min(w)) as f64 / 16.0;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = pose.angle.sin_cos();
    let mut out = [(0.0, 0.0); LANDMARKS];
    for (i, o) in out.iter_mut().enumerate() {
        let px = (CANONICAL[i].0 + dot_id(&maps.pos_rows[2 * i], &id.z)) * unit;
        let py = (CANONICAL[i].1 + dot_id(&maps.pos_rows[2 * i + 1], &id.z)) * unit;
        let rx = pose.scale * (cos * px - sin * py);
        let ry = pose.scale * (sin * px + cos * py);
        *o = (cx + rx + pose.dx, cy + ry + pose.dy);
    }
    out
}

fn blob_amplitudes(id: &Identity) -> [f64; LANDMARKS] {
    let maps = world_maps();
    let mut out = [0.0; LANDMARKS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = BASE_AMPLITUDE + dot_id(&maps.amp_rows[i], &id.z);
    }
    out
}

/// Renders one frame: five gaussian blobs at the landmark positions.
pub fn render_frame(id: &Identity, pose: &Pose, h: usize, w: usize) -> Result<RenderedFrame> {
    check_pose(pose, h, w)?;
    let landmarks = landmark_positions(id, pose, h, w);
    let amps = blob_amplitudes(id);
    let unit = (h.min(w)) as f64 / 16.0;

    let mut xmin = f64::INFINITY;
    let mut ymin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for &(x, y) in &landmarks {
        if !(0.0..=(w as f64 - 1.0)).contains(&x) || !(0.0..=(h as f64 - 1.0)).contains(&y) {
            return Err(Error::Contract(format!(
                "landmark ({x:.2}, {y:.2}) outside {h}x{w} frame; pose too extreme for this world"
            )));
        }
        xmin = xmin.min(x);
        ymin = ymin.min(y);
        xmax = xmax.max(x);
        ymax = ymax.max(y);
    }
    let pad = FACE_PAD_UNITS * unit * pose.scale;
    let face_region = Rect {
        x0: (xmin - pad).max(0.0),
        y0: (ymin - pad).max(0.0),
        x1: (xmax + pad).min(w as f64 - 1.0),
        y1: (ymax + pad).min(h as f64 - 1.0),
    };

    let mut pixels = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0f64;
            for i in 0..LANDMARKS {
                let dx = x as f64 - landmarks[i].0;
                let dy = y as f64 - landmarks[i].1;
                let r = BLOB_RADIUS[i] * unit * pose.scale;
                v += amps[i] * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
            }
            pixels.data_mut()[y * w + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(RenderedFrame {
        pixels,
        landmarks,
        face_region,
    })
}

/// Frame-wise rendering of a pose trajectory.
pub fn synth_clip(
    id: &Identity,
    trajectory: &[Pose],
    h: usize,
    w: usize,
) -> Result<Vec<RenderedFrame>> {
    trajectory.iter().map(|p| render_frame(id, p, h, w)).collect()
}

/// Pose sampling ranges used by dataset generation. These are narrower than
/// the hard render limits so that cross-pose similarity straddles the filter
/// threshold instead of collapsing to one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRanges {
    pub max_angle: f64,
    pub max_shift_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            max_angle: 0.1,
            max_shift_frac: 0.025,
            scale_min: 0.95,
            scale_max: 1.08,
        }
    }
}

pub fn sample_pose(rng: &mut RngState, ranges: &PoseRanges, h: usize, w: usize) -> Pose {
    Pose {
        angle: rng.uniform_in(-ranges.max_angle, ranges.max_angle),
        dx: rng.uniform_in(-1.0, 1.0) * ranges.max_shift_frac * w as f64,
        dy: rng.uniform_in(-1.0, 1.0) * ranges.max_shift_frac * h as f64,
        scale: rng.uniform_in(ranges.scale_min, ranges.scale_max),
    }
}

/// Smooth random-walk trajectory for clips; every pose stays inside `ranges`.
pub fn sample_trajectory(
    rng: &mut RngState,
    ranges: &PoseRanges,
    frames: usize,
    h: usize,
    w: usize,
) -> Vec<Pose> {
    let start_ranges = PoseRanges {
        max_angle: ranges.max_angle * 0.5,
        max_shift_frac: ranges.max_shift_frac * 0.5,
        ..*ranges
    };
    let mut pose = sample_pose(rng, &start_ranges, h, w);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(pose);
        pose.angle = (pose.angle + rng.uniform_in(-0.06, 0.06))
            .clamp(-ranges.max_angle, ranges.max_angle);
        pose.dx = (pose.dx + rng.uniform_in(-0.025, 0.025) * w as f64).clamp(
            -(ranges.max_shift_frac * w as f64),
            ranges.max_shift_frac * w as f64,
        );
        pose.dy = (pose.dy + rng.uniform_in(-0.025, 0.025) * h as f64).clamp(
            -(ranges.max_shift_frac * h as f64),
            ranges.max_shift_frac * h as f64,
        );
        pose.scale =
            (pose.scale + rng.uniform_in(-0.02, 0.02)).clamp(ranges.scale_min, ranges.scale_max);
    }
    out
}

// ---------------------------------------------------------------------------
// Recognition nuisance subspace
// ---------------------------------------------------------------------------

/// Orthonormal basis of the prototype face and its first-order pose
/// responses. The recognition projection is built orthogonal to this
/// subspace, so embeddings measure deviation from the prototype instead of
/// the prototype itself, and are first-order insensitive to pose at the
/// probe points. Deterministic: built from the canonical template only.
pub fn nuisance_basis(h: usize, w: usize) -> Vec<Vec<f64>> {
    let proto = Identity {
        z: Tensor::zeros(&[ID_DIM]),
        tag: Demographic::Man,
    };
    let render = |p: &Pose| {
        render_frame(&proto, p, h, w)
            .expect("probe poses in range")
            .pixels
    };

    let mut raw: Vec<Vec<f64>> = Vec::new();

    // prototype averaged over a small pose grid
    let mut mean = vec![0f64; h * w];
    let mut count = 0.0;
    for ai in -1i32..=1 {
        for dxi in -1i32..=1 {
            for dyi in -1i32..=1 {
                let pose = Pose {
                    angle: ai as f64 * 0.1,
                    dx: dxi as f64 * 0.03 * w as f64,
                    dy: dyi as f64 * 0.03 * h as f64,
                    scale: 1.0,
                };
                for (m, &p) in mean.iter_mut().zip(render(&pose).data()) {
                    *m += p as f64;
                }
                count += 1.0;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    raw.push(mean);

    // central-difference pose derivatives at several probe poses
    let probes = [
        Pose::NEUTRAL,
        Pose { dx: 0.025 * w as f64, dy: 0.025 * h as f64, angle: 0.0, scale: 1.0 },
        Pose { dx: -0.025 * w as f64, dy: -0.025 * h as f64, angle: 0.08, scale: 1.0 },
        Pose { dx: 0.025 * w as f64, dy: -0.025 * h as f64, angle: -0.08, scale: 1.04 },
        Pose { dx: -0.025 * w as f64, dy: 0.025 * h as f64, angle: 0.04, scale: 0.97 },
        Pose { dx: 0.0, dy: 0.0, angle: 0.1, scale: 1.0 },
        Pose { dx: 0.0, dy: 0.0, angle: -0.1, scale: 1.05 },
    ];
    let eps = 0.05;
    for at in probes {
        for k in 0..4 {
            let mut up = at;
            let mut dn = at;
            match k {
                0 => {
                    up.dx += eps;
                    dn.dx -= eps;
                }
                1 => {
                    up.dy += eps;
                    dn.dy -= eps;
                }
                2 => {
                    up.angle += eps;
                    dn.angle -= eps;
                }
                _ => {
                    up.scale += eps;
                    dn.scale -= eps;
                }
            }
            let a = render(&up);
            let b = render(&dn);
            raw.push(
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x as f64 - y as f64) / (2.0 * eps))
                    .collect(),
            );
        }
    }

    // Gram-Schmidt, dropping near-dependent directions
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in raw {
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

/// Tiny fixed vocabulary: id 0 is padding, ids 1.. are words.
pub const VOCAB: [&str; 24] = [
    "<pad>", "a", "photo", "video", "of", "the", "man", "woman", "grandfather", "grandmother",
    "boy", "girl", "baby", "smiling", "nodding", "turning", "slowly", "looking", "left", "right",
    "up", "down", "portrait", "closeup",
];

const TEMPLATES: [&[&str]; 4] = [
    &["a", "photo", "of", "SUBJ", "smiling"],
    &["a", "portrait", "of", "the", "SUBJ"],
    &["a", "video", "of", "SUBJ", "turning", "slowly"],
    &["closeup", "of", "SUBJ", "looking", "left"],
];

fn word_id(w: &str) -> u16 {
    VOCAB.iter().position(|&v| v == w).expect("word in vocab") as u16
}

/// Token ids padded to `n_txt`, plus the index of the single subject token.
pub fn prompt_tokens(tag: Demographic, template: usize, n_txt: usize) -> (Vec<u16>, usize) {
    let t = TEMPLATES[template % TEMPLATES.len()];
    let mut ids = Vec::with_capacity(n_txt);
    let mut subject = 0;
    for (i, w) in t.iter().enumerate() {
        if i >= n_txt {
            break;
        }
        if *w == "SUBJ" {
            subject = i;
            ids.push(word_id(tag.subject_word()));
        } else {
            ids.push(word_id(w));
        }
    }
    while ids.len() < n_txt {
        ids.push(0);
    }
    (ids, subject)
}

pub fn template_count() -> usize {
    TEMPLATES.len()
}

// ---------------------------------------------------------------------------
// Pairs and filtering
// ---------------------------------------------------------------------------

/// A candidate reference/target pair with its similarity verdict.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub identity: Identity,
    pub template: usize,
    pub ref_pose: Pose,
    pub trajectory: Vec<Pose>,
    pub ref_frame: RenderedFrame,
    pub target_frames: Vec<RenderedFrame>,
    pub cos_sim: f32,
    pub kept: bool,
    /// Why a record was dropped when the reason is not the threshold.
    pub note: Option<String>,
}

/// Scores candidates with the recognition embedding of the reference vs the
/// target's first frame; keeps records strictly above `threshold`.
/// Degenerate embeddings mark the record dropped with a note instead of
/// failing the whole batch. Input order is preserved.
pub fn filter_pairs<E>(
    mut pairs: Vec<PairRecord>,
    recognize: E,
    threshold: f32,
) -> Result<Vec<PairRecord>>
where
    E: Fn(&Tensor) -> Result<Tensor>,
{
    if !(-1.0..1.0).contains(&threshold) {
        return Err(Error::Contract(format!(
            "filter threshold {threshold} outside (-1, 1)"
        )));
    }
    for p in pairs.iter_mut() {
        let score = recognize(&p.ref_frame.pixels).and_then(|a| {
            let b = recognize(&p.target_frames[0].pixels)?;
            crate::ops::cosine_similarity(&a, &b)
        });
        match score {
            Ok(c) => {
                p.cos_sim = c;
                p.kept = c > threshold;
            }
            Err(e) => {
                p.cos_sim = f32::NAN;
                p.kept = false;
                p.note = Some(format!("dropped: {e}"));
            }
        }
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Image,
    Video,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Image => "image",
            Stage::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "image" => Ok(Stage::Image),
            "video" => Ok(Stage::Video),
            other => Err(Error::Data(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n_ids: usize,
    pub per_id: usize,
    pub stage: Stage,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pose: PoseRanges,
    pub threshold: f32,
    /// Separate streams so pose resampling never moves the identity set.
    pub id_seed: RngState,
    pub pose_seed: RngState,
}

#[derive(Debug)]
pub struct Dataset {
    pub stage: Stage,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub records: Vec<PairRecord>,
    pub kept: usize,
    pub dropped: usize,
}

/// Generates candidate pairs, filters them, and returns the full record list
/// (kept and dropped). Image stage emits one self-reference target and
/// cross-pose targets per identity; video stage emits reference + clip pairs.
/// An optional `prefilter` stands in for upstream quality gates.
pub fn make_dataset(
    spec: &DatasetSpec,
    recognize: impl Fn(&Tensor) -> Result<Tensor>,
    prefilter: Option<&dyn Fn(&PairRecord) -> Option<String>>,
) -> Result<Dataset> {
    use rayon::prelude::*;

    let mut id_rng = spec.id_seed;
    let identities: Vec<Identity> =
        (0..spec.n_ids).map(|_| make_identity(&mut id_rng)).collect();
    let (h, w) = (spec.height, spec.width);
    let frames = match spec.stage {
        Stage::Image => 1,
        Stage::Video => spec.frames,
    };

    let jobs: Vec<(usize, usize)> = (0..spec.n_ids)
        .flat_map(|i| (0..spec.per_id).map(move |j| (i, j)))
        .collect();

    let mut pairs: Vec<PairRecord> = jobs
        .par_iter()
        .map(|&(i, j)| -> Result<PairRecord> {
            let id = &identities[i];
            let mut rng = spec
                .pose_seed
                .stream_indexed("pair", (i * spec.per_id + j) as u64);
            let template = rng.below(template_count() as u64) as usize;
            let ref_pose = sample_pose(&mut rng, &spec.pose, h, w);
            let trajectory = match spec.stage {
                Stage::Image => {
                    if j == 0 {
                        vec![ref_pose] // self-reference pair
                    } else {
                        vec![sample_pose(&mut rng, &spec.pose, h, w)]
                    }
                }
                Stage::Video => sample_trajectory(&mut rng, &spec.pose, frames, h, w),
            };
            let ref_frame = render_frame(id, &ref_pose, h, w)?;
            let target_frames = synth_clip(id, &trajectory, h, w)?;
            Ok(PairRecord {
                identity: id.clone(),
                template,
                ref_pose,
                trajectory,
                ref_frame,
                target_frames,
                cos_sim: 0.0,
                kept: false,
                note: None,
            })
        })
        .collect::<Result<_>>()?;

    if let Some(pre) = prefilter {
        for p in pairs.iter_mut() {
            if let Some(reason) = pre(p) {
                p.note = Some(format!("prefiltered: {reason}"));
            }
        }
    }
    let mut records = filter_pairs(pairs, recognize, spec.threshold)?;
    for r in records.iter_mut() {
        if r.note.as_deref().is_some_and(|n| n.starts_with("prefiltered")) {
            r.kept = false;
        }
    }

    let kept = records.iter().filter(|r| r.kept).count();
    let dropped = records.len() - kept;
    if kept == 0 {
        return Err(Error::Data(format!(
            "empty dataset: all {} candidate pairs dropped at threshold {}",
            records.len(),
            spec.threshold
        )));
    }
    Ok(Dataset {
        stage: spec.stage,
        height: h,
        width: w,
        frames,
        records,
        kept,
        dropped,
    })
}

// ---------------------------------------------------------------------------
// Disk format: manifest text + frame blob ("MMDS")
// ---------------------------------------------------------------------------

pub const BLOB_MAGIC: &[u8; 4] = b"MMDS";
pub const BLOB_VERSION: u32 = 1;

fn fmt_pose(p: &Pose) -> String {
    format!("{}:{}:{}:{}", p.angle, p.dx, p.dy, p.scale)
}

fn parse_pose(s: &str) -> Result<Pose> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 {
        return Err(Error::Data(format!("bad pose `{s}`")));
    }
    let mut vals = [0f64; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .parse()
            .map_err(|e| Error::Data(format!("bad pose number `{p}`: {e}")))?;
    }
    Ok(Pose {
        angle: vals[0],
        dx: vals[1],
        dy: vals[2],
        scale: vals[3],
    })
}

/// Writes `<dir>/<stem>.manifest` and `<dir>/<stem>.mmds`. Frame blobs are
/// stored only for kept records; offsets are frame indices into the blob.
pub fn write_dataset(dataset: &Dataset, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    blob.extend_from_slice(BLOB_MAGIC);
    blob.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    blob.extend_from_slice(&(dataset.height as u32).to_le_bytes());
    blob.extend_from_slice(&(dataset.width as u32).to_le_bytes());
    blob.extend_from_slice(&(dataset.frames as u32).to_le_bytes());

    let mut manifest = String::new();
    writeln!(
        manifest,
        "# facedit dataset stage={} h={} w={} frames={} kept={} dropped={}",
        dataset.stage.name(),
        dataset.height,
        dataset.width,
        dataset.frames,
        dataset.kept,
        dataset.dropped
    )
    .unwrap();

    let mut frame_index: u64 = 0;
    let mut push_frame = |blob: &mut Vec<u8>, t: &Tensor| -> u64 {
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let at = frame_index;
        frame_index += 1;
        at
    };

    for (i, r) in dataset.records.iter().enumerate() {
        let (ref_off, tgt_off) = if r.kept {
            let ro = push_frame(&mut blob, &r.ref_frame.pixels);
            let to = push_frame(&mut blob, &r.target_frames[0].pixels);
            for f in &r.target_frames[1..] {
                push_frame(&mut blob, &f.pixels);
            }
            (ro as i64, to as i64)
        } else {
            (-1, -1)
        };
        let z = r
            .identity
            .z
            .data()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let traj = r
            .trajectory
            .iter()
            .map(fmt_pose)
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            manifest,
            "id={} stage={} tag={} template={} z={} ref_pose={} traj={} cos={} kept={} ref_off={} tgt_off={} note={}",
            i,
            dataset.stage.name(),
            r.identity.tag.index(),
            r.template,
            z,
            fmt_pose(&r.ref_pose),
            traj,
            r.cos_sim,
            r.kept,
            ref_off,
            tgt_off,
            r.note.as_deref().unwrap_or("-").replace(' ', "_"),
        )
        .unwrap();
    }

    std::fs::File::create(dir.join(format!("{stem}.mmds")))?.write_all(&blob)?;
    std::fs::File::create(dir.join(format!("{stem}.manifest")))?.write_all(manifest.as_bytes())?;
    Ok(())
}

/// One parsed manifest line plus decoded frames for kept records.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub identity: Identity,
    pub template: usize,
    pub ref_pose: Pose,
    pub trajectory: Vec<Pose>,
    pub cos_sim: f32,
    pub kept: bool,
    pub ref_pixels: Option<Tensor>,
    pub target_pixels: Vec<Tensor>,
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub stage: Stage,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub records: Vec<LoadedRecord>,
}

fn kv<'a>(fields: &'a [(&'a str, &'a str)], key: &str, line_no: usize) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Data(format!("manifest line {line_no}: missing `{key}`")))
}

pub fn read_dataset(dir: &Path, stem: &str) -> Result<LoadedDataset> {
    let mut raw = Vec::new();
    std::fs::File::open(dir.join(format!("{stem}.mmds")))?.read_to_end(&mut raw)?;
    if raw.len() < 20 || &raw[0..4] != BLOB_MAGIC {
        return Err(Error::Data(format!("{stem}.mmds: bad magic")));
    }
    let rd_u32 = |at: usize| u32::from_le_bytes(raw[at..at + 4].try_into().unwrap());
    if rd_u32(4) != BLOB_VERSION {
        return Err(Error::Data(format!("{stem}.mmds: unsupported version")));
    }
    let height = rd_u32(8) as usize;
    let width = rd_u32(12) as usize;
    let frames = rd_u32(16) as usize;
    let frame_len = height * width;
    let payload = &raw[20..];
    if payload.len() % (4 * frame_len) != 0 {
        return Err(Error::Data(format!("{stem}.mmds: truncated payload")));
    }
    let frame_at = |idx: usize| -> Result<Tensor> {
        let start = idx * frame_len * 4;
        let end = start + frame_len * 4;
        if end > payload.len() {
            return Err(Error::Data(format!("{stem}.mmds: frame {idx} out of range")));
        }
        let mut data = Vec::with_capacity(frame_len);
        for c in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(c.try_into().unwrap()));
        }
        Tensor::from_vec(&[height, width], data)
    };

    let text = std::fs::read_to_string(dir.join(format!("{stem}.manifest")))?;
    let mut stage = None;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<(&str, &str)> = line
            .split_whitespace()
            .filter_map(|tok| tok.split_once('='))
            .collect();
        let st = Stage::parse(kv(&fields, "stage", line_no)?)?;
        stage.get_or_insert(st);
        let tag_idx: usize = kv(&fields, "tag", line_no)?
            .parse()
            .map_err(|e| Error::Data(format!("line {line_no}: bad tag: {e}")))?;
        let z_vals: Vec<f32> = kv(&fields, "z", line_no)?
            .split(',')
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("line {line_no}: bad z: {e}")))?;
        if z_vals.len() != ID_DIM {
            return Err(Error::Data(format!(
                "line {line_no}: z has {} dims",
                z_vals.len()
            )));
        }
        let template: usize = kv(&fields, "template", line_no)?
            .parse()
            .map_err(|e| Error::Data(format!("line {line_no}: bad template: {e}")))?;
        let ref_pose = parse_pose(kv(&fields, "ref_pose", line_no)?)?;
        let trajectory: Vec<Pose> = kv(&fields, "traj", line_no)?
            .split(';')
            .map(parse_pose)
            .collect::<Result<_>>()?;
        let cos_sim: f32 = kv(&fields, "cos", line_no)?
            .parse()
            .map_err(|e| Error::Data(format!("line {line_no}: bad cos: {e}")))?;
        let kept = kv(&fields, "kept", line_no)? == "true";
        let ref_off: i64 = kv(&fields, "ref_off", line_no)?
            .parse()
            .map_err(|e| Error::Data(format!("line {line_no}: bad ref_off: {e}")))?;
        let tgt_off: i64 = kv(&fields, "tgt_off", line_no)?
            .parse()
            .map_err(|e| Error::Data(format!("line {line_no}: bad tgt_off: {e}")))?;

        let identity = Identity {
            z: Tensor::from_vec(&[ID_DIM], z_vals)?,
            tag: Demographic::ALL[tag_idx.min(Demographic::ALL.len() - 1)],
        };
        let (ref_pixels, target_pixels) = if kept {
            let rp = frame_at(ref_off as usize)?;
            let mut tps = Vec::with_capacity(trajectory.len());
            for k in 0..trajectory.len() {
                tps.push(frame_at(tgt_off as usize + k)?);
            }
            (Some(rp), tps)
        } else {
            (None, Vec::new())
        };
        records.push(LoadedRecord {
            identity,
            template,
            ref_pose,
            trajectory,
            cos_sim,
            kept,
            ref_pixels,
            target_pixels,
        });
    }
    Ok(LoadedDataset {
        stage: stage.ok_or_else(|| Error::Data("manifest has no records".into()))?,
        height,
        width,
        frames,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id_from_seed(seed: u64) -> Identity {
        make_identity(&mut RngState::new(seed))
    }

    #[test]
    fn identity_norm_band_and_determinism() {
        let a = id_from_seed(4);
        let b = id_from_seed(4);
        assert_eq!(a.z, b.z);
        let mut rng = RngState::new(1);
        for _ in 0..1000 {
            let id = make_identity(&mut rng);
            let n = id.z.norm();
            assert!((0.5..=2.0).contains(&n), "norm {n}");
        }
    }

    #[test]
    fn identity_latents_are_isotropic() {
        let mut rng = RngState::new(5);
        let ids: Vec<Identity> = (0..100).map(|_| make_identity(&mut rng)).collect();
        let mut sum = 0.0f64;
        let mut count = 0;
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                sum += crate::ops::cosine_similarity(&ids[i].z, &ids[j].z).unwrap() as f64;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!(mean.abs() < 0.1, "mean pairwise cosine {mean}");
    }

    #[test]
    fn render_is_deterministic() {
        let id = id_from_seed(2);
        let a = render_frame(&id, &Pose::NEUTRAL, 16, 16).unwrap();
        let b = render_frame(&id, &Pose::NEUTRAL, 16, 16).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.landmarks, b.landmarks);
    }

    #[test]
    fn translation_shifts_landmarks_exactly() {
        let id = id_from_seed(3);
        let base = render_frame(&id, &Pose::NEUTRAL, 16, 16).unwrap();
        let moved = render_frame(
            &id,
            &Pose {
                dx: 2.0,
                dy: -1.0,
                ..Pose::NEUTRAL
            },
            16,
            16,
        )
        .unwrap();
        for (a, b) in base.landmarks.iter().zip(&moved.landmarks) {
            assert_eq!(b.0, a.0 + 2.0);
            assert_eq!(b.1, a.1 - 1.0);
        }
    }

    #[test]
    fn landmarks_match_affine_oracle() {
        let id = id_from_seed(9);
        let pose = Pose {
            angle: 0.3,
            dx: 1.5,
            dy: -0.7,
            scale: 1.1,
        };
        let frame = render_frame(&id, &pose, 16, 16).unwrap();
        // independent affine recompute
        let neutral = landmark_positions(&id, &Pose::NEUTRAL, 16, 16);
        let (cx, cy) = (8.0, 8.0);
        let (s, c) = (pose.angle.sin(), pose.angle.cos());
        for (i, &(x, y)) in frame.landmarks.iter().enumerate() {
            let px = neutral[i].0 - cx;
            let py = neutral[i].1 - cy;
            let ex = cx + pose.scale * (c * px - s * py) + pose.dx;
            let ey = cy + pose.scale * (s * px + c * py) + pose.dy;
            assert!((x - ex).abs() < 1e-6 && (y - ey).abs() < 1e-6);
        }
        for &(x, y) in &frame.landmarks {
            assert!(frame.face_region.contains(x, y));
        }
        assert!(frame.face_region.x0 >= 0.0 && frame.face_region.x1 <= 15.0);
    }

    #[test]
    fn identities_are_pixel_separable() {
        let mut rng = RngState::new(7);
        let mut distinct = 0;
        let total = 100;
        for _ in 0..total {
            let a = make_identity(&mut rng);
            let b = make_identity(&mut rng);
            let fa = render_frame(&a, &Pose::NEUTRAL, 16, 16).unwrap();
            let fb = render_frame(&b, &Pose::NEUTRAL, 16, 16).unwrap();
            let l2: f64 = fa
                .pixels
                .data()
                .iter()
                .zip(fb.pixels.data())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum();
            if l2 > 0.0 {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "{distinct}/{total} pairs distinct");
    }

    #[test]
    fn clip_constant_trajectory_is_static() {
        let id = id_from_seed(11);
        let traj = vec![Pose::NEUTRAL; 4];
        let clip = synth_clip(&id, &traj, 16, 16).unwrap();
        assert_eq!(clip.len(), 4);
        for f in &clip[1..] {
            assert_eq!(f.pixels, clip[0].pixels);
        }
    }

    #[test]
    fn clip_landmark_deltas_follow_pose_deltas() {
        let id = id_from_seed(12);
        let traj = vec![
            Pose::NEUTRAL,
            Pose {
                dx: 1.0,
                ..Pose::NEUTRAL
            },
        ];
        let clip = synth_clip(&id, &traj, 16, 16).unwrap();
        for (a, b) in clip[0].landmarks.iter().zip(&clip[1].landmarks) {
            assert!((b.0 - a.0 - 1.0).abs() < 1e-9);
            assert!((b.1 - a.1).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_out_of_range_is_rejected() {
        let id = id_from_seed(1);
        let err = render_frame(
            &id,
            &Pose {
                angle: 0.9,
                ..Pose::NEUTRAL
            },
            16,
            16,
        );
        assert!(err.is_err());
    }

    #[test]
    fn filter_self_pair_is_kept_with_cos_one() {
        let id = id_from_seed(21);
        let f = render_frame(&id, &Pose::NEUTRAL, 16, 16).unwrap();
        let pair = PairRecord {
            identity: id,
            template: 0,
            ref_pose: Pose::NEUTRAL,
            trajectory: vec![Pose::NEUTRAL],
            ref_frame: f.clone(),
            target_frames: vec![f],
            cos_sim: 0.0,
            kept: false,
            note: None,
        };
        // identity recognition map: the raw pixels themselves
        let out = filter_pairs(vec![pair], |t| Ok(t.clone()), 0.65).unwrap();
        assert!(out[0].kept);
        assert!((out[0].cos_sim - 1.0).abs() < 1e-6);
        // near-unity threshold keeps only near-identical pairs
        let id2 = id_from_seed(22);
        let g = render_frame(&id2, &Pose::NEUTRAL, 16, 16).unwrap();
        let cross = PairRecord {
            identity: id_from_seed(21),
            template: 0,
            ref_pose: Pose::NEUTRAL,
            trajectory: vec![Pose::NEUTRAL],
            ref_frame: render_frame(&id_from_seed(21), &Pose::NEUTRAL, 16, 16).unwrap(),
            target_frames: vec![g],
            cos_sim: 0.0,
            kept: false,
            note: None,
        };
        let out = filter_pairs(vec![cross], |t| Ok(t.clone()), 0.999999).unwrap();
        assert!(!out[0].kept);
    }

    #[test]
    fn filter_marks_degenerate_embeddings() {
        let id = id_from_seed(30);
        let f = render_frame(&id, &Pose::NEUTRAL, 16, 16).unwrap();
        let pair = PairRecord {
            identity: id,
            template: 0,
            ref_pose: Pose::NEUTRAL,
            trajectory: vec![Pose::NEUTRAL],
            ref_frame: f.clone(),
            target_frames: vec![f],
            cos_sim: 0.0,
            kept: false,
            note: None,
        };
        let out = filter_pairs(vec![pair], |_| Ok(Tensor::zeros(&[4])), 0.65).unwrap();
        assert!(!out[0].kept);
        assert!(out[0].note.as_deref().unwrap().contains("dropped"));
    }

    #[test]
    fn prompt_has_single_subject_token() {
        for tag in Demographic::ALL {
            for t in 0..template_count() {
                let (ids, subj) = prompt_tokens(tag, t, 8);
                assert_eq!(ids.len(), 8);
                assert_eq!(VOCAB[ids[subj] as usize], tag.subject_word(), "template {t}");
            }
        }
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let spec = DatasetSpec {
            n_ids: 4,
            per_id: 3,
            stage: Stage::Image,
            frames: 1,
            height: 16,
            width: 16,
            pose: PoseRanges::default(),
            threshold: 0.2,
            id_seed: RngState::new(100).stream("ids"),
            pose_seed: RngState::new(100).stream("poses"),
        };
        let ds = make_dataset(&spec, |t| Ok(t.clone()), None).unwrap();
        assert!(ds.records.len() <= 12);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), "train").unwrap();
        let loaded = read_dataset(dir.path(), "train").unwrap();
        assert_eq!(loaded.records.len(), ds.records.len());
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.kept, b.kept);
            assert_eq!(a.identity.z, b.identity.z);
            assert_eq!(a.cos_sim, b.cos_sim);
            if a.kept {
                assert_eq!(b.ref_pixels.as_ref().unwrap(), &a.ref_frame.pixels);
                assert_eq!(b.target_pixels[0], a.target_frames[0].pixels);
            }
        }
    }

    #[test]
    fn pose_stream_does_not_move_identities() {
        let base = DatasetSpec {
            n_ids: 3,
            per_id: 2,
            stage: Stage::Image,
            frames: 1,
            height: 16,
            width: 16,
            pose: PoseRanges::default(),
            threshold: 0.0,
            id_seed: RngState::new(7).stream("ids"),
            pose_seed: RngState::new(7).stream("poses"),
        };
        let a = make_dataset(&base, |t| Ok(t.clone()), None).unwrap();
        let mut other = base.clone();
        other.pose_seed = RngState::new(8).stream("poses");
        let b = make_dataset(&other, |t| Ok(t.clone()), None).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.identity.z, rb.identity.z);
        }
        assert_ne!(a.records[1].ref_pose, b.records[1].ref_pose);
    }
}
