//! Named parameter store.
//!
//! All learned and frozen tensors of the model live in one flat map keyed by
//! dotted names. Only the adapter surface trains: the facial query and
//! structural perceiver, the fusion MLP, the facial modulation predictors,
//! the identity-conditioned modulation MLPs with their shared input
//! projection, the decoupled cross-attention weights, and the face position
//! table. Everything else stands in for a pretrained backbone and stays
//! frozen, bit for bit.

use std::collections::BTreeMap;

use crate::config::Config;
use crate::dataforge;
use crate::error::{Error, Result};
use crate::rng::{seeded_normal, RngState};
use crate::tensor::Tensor;

pub const FACE_TOKENS: usize = 32;
pub const ID_TOKENS: usize = 2;

#[derive(Debug, Clone)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

fn normal_scaled(rng: &mut RngState, shape: &[usize], std: f64) -> Tensor {
    let mut t = seeded_normal(rng, shape);
    for v in t.data_mut() {
        *v = (*v as f64 * std) as f32;
    }
    t
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl ParamSet {
    /// Initializes every tensor from the config's init stream. Each tensor
    /// draws from its own named sub-stream, so adding or reordering
    /// parameters never shifts another tensor's values.
    pub fn init(cfg: &Config) -> ParamSet {
        let mut map = BTreeMap::new();
        let root = RngState::new(cfg.seed).stream("init");
        let d = cfg.dim;
        let dt = cfg.time_dim;
        let c1 = cfg.can_dim;
        let pd = cfg.patch * cfg.patch;
        let img = cfg.height * cfg.width;
        let hidden = 2 * d;

        let mut put = |name: String, shape: &[usize], std: f64| {
            let mut rng = root.stream(&name);
            let t = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                normal_scaled(&mut rng, shape, std)
            };
            map.insert(name, t);
        };

        // embedder: frozen feature/recognition projections, trainable branch
        put("embedder.feat_proj".into(), &[pd, d], fan_in_std(pd));
        put("embedder.face_query".into(), &[FACE_TOKENS, d], 0.5);
        for branch in ["perceiver_id", "perceiver_face"] {
            for l in 0..cfg.perceiver_layers {
                let base = format!("embedder.{branch}.l{l}");
                for w in ["wq", "wk", "wv", "wo"] {
                    put(format!("{base}.{w}"), &[d, d], fan_in_std(d));
                }
                put(format!("{base}.ffn_w1"), &[d, hidden], fan_in_std(d));
                put(format!("{base}.ffn_b1"), &[hidden], 0.0);
                put(format!("{base}.ffn_w2"), &[hidden, d], fan_in_std(hidden));
                put(format!("{base}.ffn_b2"), &[d], 0.0);
            }
        }
        put("embedder.fuse.w1".into(), &[2 * d, 2 * d], fan_in_std(2 * d));
        put("embedder.fuse.b1".into(), &[2 * d], 0.0);
        put("embedder.fuse.w2".into(), &[2 * d, d], fan_in_std(2 * d));
        put("embedder.fuse.b2".into(), &[d], 0.0);

        // backbone embeddings
        put(
            "text.embed".into(),
            &[dataforge::VOCAB.len(), d],
            0.5,
        );
        put("dit.time.w1".into(), &[dt, dt], fan_in_std(dt));
        put("dit.time.b1".into(), &[dt], 0.0);
        put("dit.time.w2".into(), &[dt, dt], fan_in_std(dt));
        put("dit.time.b2".into(), &[dt], 0.0);
        put("dit.layer_embed".into(), &[cfg.layers, dt], 0.5);
        put("dit.pos_txt".into(), &[cfg.n_txt, d], 0.1);
        put(
            "dit.pos_vid".into(),
            &[cfg.frames * cfg.tokens_per_frame(), d],
            0.1,
        );
        put("dit.pos_face".into(), &[FACE_TOKENS, d], 0.1);
        put("dit.patch_embed".into(), &[pd, d], fan_in_std(pd));
        put("dit.final_proj".into(), &[d, pd], fan_in_std(d));

        // blocks
        for l in 0..cfg.layers {
            let base = format!("dit.block{l}");
            for w in ["wq", "wk", "wv", "wo"] {
                put(format!("{base}.attn.{w}"), &[d, d], fan_in_std(d));
            }
            put(format!("{base}.ffn.w1"), &[d, hidden], fan_in_std(d));
            put(format!("{base}.ffn.b1"), &[hidden], 0.0);
            put(format!("{base}.ffn.w2"), &[hidden, d], fan_in_std(hidden));
            put(format!("{base}.ffn.b2"), &[d], 0.0);
            for m in ["mod_txt", "mod_vid"] {
                put(format!("{base}.{m}.w1"), &[2 * dt, dt], fan_in_std(2 * dt));
                put(format!("{base}.{m}.b1"), &[dt], 0.0);
                put(
                    format!("{base}.{m}.w2"),
                    &[dt, 6 * d],
                    0.5 * fan_in_std(dt),
                );
                put(format!("{base}.{m}.b2"), &[6 * d], 0.0);
            }
            if is_adapter_layer(l) {
                // newly introduced predictors start at exact zero output
                put(format!("{base}.mod_face.w1"), &[2 * dt, dt], fan_in_std(2 * dt));
                put(format!("{base}.mod_face.b1"), &[dt], 0.0);
                put(format!("{base}.mod_face.w2"), &[dt, 6 * d], 0.0);
                put(format!("{base}.mod_face.b2"), &[6 * d], 0.0);
                let can_in = 2 * c1 + dt + d;
                put(format!("{base}.can.w1"), &[can_in, 2 * dt], fan_in_std(can_in));
                put(format!("{base}.can.b1"), &[2 * dt], 0.0);
                put(format!("{base}.can.w2"), &[2 * dt, 12 * d], 0.0);
                put(format!("{base}.can.b2"), &[12 * d], 0.0);
                put(format!("{base}.cross.wk"), &[d, d], fan_in_std(d));
                put(format!("{base}.cross.wv"), &[d, d], fan_in_std(d));
                put(format!("{base}.cross.wout"), &[d, d], 0.0);
            }
        }
        put("dit.can_proj".into(), &[d, c1], fan_in_std(d));

        // fixed toy decoder: frame mean followed by a pixel-mixing map
        put("decoder.map".into(), &[img, img], fan_in_std(img));

        map.insert(
            "embedder.id_proj".into(),
            recognition_projection(cfg, &root),
        );

        ParamSet { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    /// Panicking accessor for names the model constructs itself.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "parameter `{name}`: cannot replace {:?} with {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Data(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        self.map.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .keys()
            .filter(|n| is_trainable(n))
            .cloned()
            .collect()
    }
}

/// The recognition projection: a seeded random map whose columns are
/// orthogonalized against the prototype face and its first-order pose
/// responses, so the embedding carries identity deviation rather than the
/// shared face structure or small pose changes.
fn recognition_projection(cfg: &Config, root: &RngState) -> Tensor {
    let img = cfg.height * cfg.width;
    let out_dim = 2 * cfg.dim;
    let mut rng = root.stream("embedder.id_proj");
    let mut proj = normal_scaled(&mut rng, &[img, out_dim], fan_in_std(img));
    let basis = dataforge::nuisance_basis(cfg.height, cfg.width);
    for b in &basis {
        for c in 0..out_dim {
            let mut dot = 0.0f64;
            for r in 0..img {
                dot += proj.data()[r * out_dim + c] as f64 * b[r];
            }
            for r in 0..img {
                let v = proj.data()[r * out_dim + c] as f64 - dot * b[r];
                proj.data_mut()[r * out_dim + c] = v as f32;
            }
        }
    }
    proj
}

/// Adapters live on even-indexed layers only.
pub fn is_adapter_layer(l: usize) -> bool {
    l % 2 == 0
}

/// Which parameters the optimizer may touch. Everything else is backbone.
pub fn is_trainable(name: &str) -> bool {
    name == "embedder.face_query"
        || name.starts_with("embedder.perceiver_face.")
        || name.starts_with("embedder.fuse.")
        || name == "dit.pos_face"
        || name == "dit.can_proj"
        || name.contains(".mod_face.")
        || name.contains(".can.")
        || name.contains(".cross.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_stream_isolated() {
        let cfg = Config::default();
        let a = ParamSet::init(&cfg);
        let b = ParamSet::init(&cfg);
        assert_eq!(a.len(), b.len());
        for (name, t) in a.iter() {
            assert_eq!(t, b.tensor(name), "{name}");
        }
    }

    #[test]
    fn zero_initialized_surfaces() {
        let cfg = Config::default();
        let p = ParamSet::init(&cfg);
        for l in (0..cfg.layers).filter(|&l| is_adapter_layer(l)) {
            for name in [
                format!("dit.block{l}.mod_face.w2"),
                format!("dit.block{l}.mod_face.b2"),
                format!("dit.block{l}.can.w2"),
                format!("dit.block{l}.can.b2"),
                format!("dit.block{l}.cross.wout"),
            ] {
                assert!(
                    p.tensor(&name).data().iter().all(|&v| v == 0.0),
                    "{name} must start at zero"
                );
            }
        }
    }

    #[test]
    fn adapter_layers_are_exactly_even() {
        let cfg = Config::default();
        let p = ParamSet::init(&cfg);
        for l in 0..cfg.layers {
            let has = p.get(&format!("dit.block{l}.can.w1")).is_ok();
            assert_eq!(has, l % 2 == 0, "layer {l}");
        }
    }

    #[test]
    fn trainable_set_is_the_adapter_surface() {
        let cfg = Config::default();
        let p = ParamSet::init(&cfg);
        let trainable = p.trainable_names();
        assert!(trainable.iter().any(|n| n == "embedder.face_query"));
        assert!(trainable.iter().any(|n| n == "dit.can_proj"));
        assert!(trainable.iter().all(|n| {
            !n.starts_with("dit.block1.attn")
                && !n.contains("mod_vid")
                && !n.contains("mod_txt")
                && n != "dit.patch_embed"
                && n != "decoder.map"
                && !n.starts_with("embedder.perceiver_id")
        }));
        // face query count and id token width are fixed by the architecture
        assert_eq!(p.tensor("embedder.face_query").shape(), &[32, cfg.dim]);
        assert_eq!(
            p.tensor("embedder.id_proj").shape(),
            &[cfg.height * cfg.width, 2 * cfg.dim]
        );
    }

    #[test]
    fn set_checks_shapes() {
        let cfg = Config::gradcheck();
        let mut p = ParamSet::init(&cfg);
        assert!(p.set("dit.can_proj", Tensor::zeros(&[3, 3])).is_err());
        let shape = p.tensor("dit.can_proj").shape().to_vec();
        assert!(p.set("dit.can_proj", Tensor::zeros(&shape)).is_ok());
    }
}
