//! Flat key=value configuration.
//!
//! One text format serves config files, CLI flags (`--key value`) and the
//! run manifest: every field is addressable by its key. `#` starts a comment.

use crate::dataforge::PoseRanges;
use crate::error::{Error, Result};

/// Environment variable that overrides `seed` (used by CI).
pub const SEED_ENV_VAR: &str = "FACEDIT_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // model dims
    pub dim: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub can_dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub n_txt: usize,
    pub perceiver_layers: usize,
    // schedule
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    // training
    pub lr: f64,
    pub weight_decay: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub batch: usize,
    pub lambda_id: f64,
    pub face_mask_prob: f64,
    // data
    pub n_ids: usize,
    pub per_id: usize,
    pub filter_threshold: f32,
    pub pose_angle: f64,
    pub pose_shift_frac: f64,
    pub pose_scale_min: f64,
    pub pose_scale_max: f64,
    // evaluation thresholds
    pub theta_id: f64,
    pub theta_motion: f64,
    pub eval_samples: usize,
    // seed
    pub seed: u64,
    // ablation flags
    pub disable_can: bool,
    pub disable_id_branch: bool,
    pub disable_face_branch: bool,
    pub direct_can_prediction: bool,
    pub skip_pretrain: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            time_dim: 32,
            can_dim: 16,
            heads: 1,
            patch: 4,
            height: 16,
            width: 16,
            frames: 4,
            n_txt: 8,
            perceiver_layers: 2,
            t_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            lr: 1e-3,
            weight_decay: 0.0,
            steps_stage1: 2000,
            steps_stage2: 500,
            batch: 2,
            lambda_id: 0.1,
            face_mask_prob: 0.5,
            n_ids: 24,
            per_id: 6,
            filter_threshold: 0.65,
            pose_angle: 0.1,
            pose_shift_frac: 0.025,
            pose_scale_min: 0.95,
            pose_scale_max: 1.08,
            theta_id: 0.5,
            theta_motion: 0.02,
            eval_samples: 50,
            seed: 42,
            disable_can: false,
            disable_id_branch: false,
            disable_face_branch: false,
            direct_can_prediction: false,
            skip_pretrain: false,
        }
    }
}

macro_rules! config_fields {
    ($self:ident, $macro:ident) => {
        $macro!($self, dim, usize);
        $macro!($self, layers, usize);
        $macro!($self, time_dim, usize);
        $macro!($self, can_dim, usize);
        $macro!($self, heads, usize);
        $macro!($self, patch, usize);
        $macro!($self, height, usize);
        $macro!($self, width, usize);
        $macro!($self, frames, usize);
        $macro!($self, n_txt, usize);
        $macro!($self, perceiver_layers, usize);
        $macro!($self, t_steps, usize);
        $macro!($self, beta_min, f64);
        $macro!($self, beta_max, f64);
        $macro!($self, lr, f64);
        $macro!($self, weight_decay, f64);
        $macro!($self, steps_stage1, usize);
        $macro!($self, steps_stage2, usize);
        $macro!($self, batch, usize);
        $macro!($self, lambda_id, f64);
        $macro!($self, face_mask_prob, f64);
        $macro!($self, n_ids, usize);
        $macro!($self, per_id, usize);
        $macro!($self, filter_threshold, f32);
        $macro!($self, pose_angle, f64);
        $macro!($self, pose_shift_frac, f64);
        $macro!($self, pose_scale_min, f64);
        $macro!($self, pose_scale_max, f64);
        $macro!($self, theta_id, f64);
        $macro!($self, theta_motion, f64);
        $macro!($self, eval_samples, usize);
        $macro!($self, seed, u64);
        $macro!($self, disable_can, bool);
        $macro!($self, disable_id_branch, bool);
        $macro!($self, disable_face_branch, bool);
        $macro!($self, direct_can_prediction, bool);
        $macro!($self, skip_pretrain, bool);
    };
}

impl Config {
    /// Sets one field by key; values parse with the field's native type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! try_set {
            ($self:ident, $field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    $self.$field = value.parse::<$ty>().map_err(|e| {
                        Error::Config(format!("bad value `{value}` for `{key}`: {e}"))
                    })?;
                    return Ok(());
                }
            };
        }
        config_fields!(self, try_set);
        Err(Error::Config(format!("unknown config key `{key}`")))
    }

    /// Canonical text form: every field, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($self:ident, $field:ident, $ty:ty) => {
                out.push_str(&format!("{}={}\n", stringify!($field), $self.$field));
            };
        }
        config_fields!(self, emit);
        out
    }

    /// Parses a config text; unknown keys error, missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{raw}`", ln + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Applies the CI seed override if the environment sets one.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            self.seed = v
                .parse()
                .map_err(|e| Error::Config(format!("bad {SEED_ENV_VAR}={v}: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("time_dim", self.time_dim),
            ("can_dim", self.can_dim),
            ("patch", self.patch),
            ("height", self.height),
            ("width", self.width),
            ("frames", self.frames),
            ("n_txt", self.n_txt),
            ("perceiver_layers", self.perceiver_layers),
            ("t_steps", self.t_steps),
            ("batch", self.batch),
            ("n_ids", self.n_ids),
            ("per_id", self.per_id),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.heads != 1 {
            return Err(Error::Config(
                "only single-head attention is supported (heads=1)".into(),
            ));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if !(0.0 < self.beta_min && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta range ({}, {}) must satisfy 0 < min <= max < 1",
                self.beta_min, self.beta_max
            )));
        }
        if self.lambda_id < 0.0 {
            return Err(Error::Config("lambda_id must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.face_mask_prob) {
            return Err(Error::Config("face_mask_prob must be in [0, 1]".into()));
        }
        if !(-1.0..1.0).contains(&self.filter_threshold) {
            return Err(Error::Config("filter_threshold must be in (-1, 1)".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical text; checkpoints refuse to load under a
    /// different configuration.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }

    pub fn pose_ranges(&self) -> PoseRanges {
        PoseRanges {
            max_angle: self.pose_angle,
            max_shift_frac: self.pose_shift_frac,
            scale_min: self.pose_scale_min,
            scale_max: self.pose_scale_max,
        }
    }

    /// Video tokens per frame after patching.
    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// The small configuration used by the gradient suite.
    pub fn gradcheck() -> Config {
        Config {
            dim: 16,
            layers: 2,
            time_dim: 8,
            can_dim: 4,
            patch: 4,
            height: 8,
            width: 8,
            frames: 2,
            n_txt: 4,
            perceiver_layers: 1,
            t_steps: 10,
            ..Config::default()
        }
    }
}
