use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::NodeId;
use crate::Graph;
use crate::rng::Prng;
use crate::{Real, Tensor};

/// Network dimensions. The embedding widths (192 for the spatial embeddings,
/// 512 for the temporal context) are fixed design values; interior widths
/// are the smallest that train reliably at phantom scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// SH coefficients per voxel (m).
    pub sh_coeffs: usize,
    /// First spatial conv channels.
    pub spatial_hidden: usize,
    /// Second spatial conv channels (flattened MLP input).
    pub spatial_out: usize,
    /// z / v embedding width.
    pub embed_dim: usize,
    /// GRU hidden width = temporal context width.
    pub context_dim: usize,
    /// Sinusoidal step-embedding width (pairs of sin/cos).
    pub step_embed_dim: usize,
    /// Global condition width after fusing context and step embedding.
    pub global_dim: usize,
    /// Denoiser outer channel count.
    pub denoiser_base: usize,
    /// Denoiser bottleneck channel count.
    pub denoiser_mid: usize,
    /// Group-norm groups inside denoiser blocks.
    pub norm_groups: usize,
    /// Smooth-L1 transition point for the training loss.
    pub smooth_l1_delta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sh_coeffs: 28,
            spatial_hidden: 32,
            spatial_out: 64,
            embed_dim: 192,
            context_dim: 512,
            step_embed_dim: 64,
            global_dim: 256,
            denoiser_base: 64,
            denoiser_mid: 128,
            norm_groups: 8,
            smooth_l1_delta: 1.0,
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            sh_coeffs: 2,
            spatial_hidden: 3,
            spatial_out: 4,
            embed_dim: 5,
            context_dim: 6,
            step_embed_dim: 4,
            global_dim: 7,
            denoiser_base: 4,
            denoiser_mid: 6,
            norm_groups: 2,
            smooth_l1_delta: 1.0,
        }
    }

    /// FiLM conditioning width: global condition concatenated with the
    /// local spatial embedding.
    pub fn cond_dim(&self) -> usize {
        self.global_dim + self.embed_dim
    }

    pub fn feature_len(&self) -> usize {
        27 * self.sh_coeffs
    }
}

/// Named parameter tensors in fixed insertion order. Iteration order is the
/// definition order, which both initialization and the optimizer rely on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(!self.lookup.contains_key(name), "duplicate parameter {name}");
        self.lookup.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn position(&self, name: &str) -> Result<usize, ModelError> {
        self.lookup.get(name).copied().ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn at(&self, index: usize) -> (&str, &Tensor) {
        (&self.names[index], &self.tensors[index])
    }

    pub fn at_mut(&mut self, index: usize) -> (&str, &mut Tensor) {
        (&self.names[index], &mut self.tensors[index])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Binds every parameter into a graph as leaves, in definition order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                g.leaf(&t)
            })
            .collect();
        BoundParams { ids }
    }
}

/// Node ids of bound parameters, aligned with `ParamStore` order.
pub struct BoundParams {
    pub ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, store: &ParamStore, name: &str) -> Result<NodeId, ModelError> {
        Ok(self.ids[store.position(name)?])
    }
}

/// Complete model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub store: ParamStore,
}

fn uniform_tensor(rng: &mut Prng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<Real> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

impl ModelParameters {
    /// Seeded initialization: weights uniform in +-sqrt(1/fan_in), biases
    /// zero, group-norm gains 1, FiLM heads zeroed with gain bias 1 so the
    /// modulation starts as identity.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = Prng::new(seed).split(0x9a7a);
        let mut store = ParamStore::new();
        let c = &config;

        let linear = |store: &mut ParamStore, rng: &mut Prng, name: &str, out: usize, inp: usize| {
            let bound = (1.0 / inp as f64).sqrt();
            store.insert(&format!("{name}.w"), uniform_tensor(rng, vec![out, inp], bound));
            store.insert(&format!("{name}.b"), Tensor::zeros(vec![out]));
        };

        for branch in ["a", "b"] {
            let fan1 = c.sh_coeffs * 27;
            let bound1 = (1.0 / fan1 as f64).sqrt();
            store.insert(
                &format!("spatial.{branch}.conv1.w"),
                uniform_tensor(&mut rng, vec![c.spatial_hidden, c.sh_coeffs, 3, 3, 3], bound1),
            );
            store.insert(&format!("spatial.{branch}.conv1.b"), Tensor::zeros(vec![c.spatial_hidden]));
            let fan2 = c.spatial_hidden * 27;
            let bound2 = (1.0 / fan2 as f64).sqrt();
            store.insert(
                &format!("spatial.{branch}.conv2.w"),
                uniform_tensor(&mut rng, vec![c.spatial_out, c.spatial_hidden, 3, 3, 3], bound2),
            );
            store.insert(&format!("spatial.{branch}.conv2.b"), Tensor::zeros(vec![c.spatial_out]));
            linear(&mut store, &mut rng, &format!("spatial.{branch}.proj"), c.embed_dim, c.spatial_out);
        }

        for (layer, input) in [(0, c.embed_dim), (1, c.context_dim)] {
            let h = c.context_dim;
            let bound = (1.0 / h as f64).sqrt();
            store.insert(&format!("gru.l{layer}.w_ih"), uniform_tensor(&mut rng, vec![3 * h, input], bound));
            store.insert(&format!("gru.l{layer}.w_hh"), uniform_tensor(&mut rng, vec![3 * h, h], bound));
            store.insert(&format!("gru.l{layer}.b_ih"), Tensor::zeros(vec![3 * h]));
            store.insert(&format!("gru.l{layer}.b_hh"), Tensor::zeros(vec![3 * h]));
        }

        linear(&mut store, &mut rng, "step.proj", c.step_embed_dim, c.step_embed_dim);
        linear(&mut store, &mut rng, "fuse", c.global_dim, c.context_dim + c.step_embed_dim);

        let conv1d = |store: &mut ParamStore, rng: &mut Prng, name: &str, out: usize, inp: usize| {
            let bound = (1.0 / (inp * 3) as f64).sqrt();
            store.insert(&format!("{name}.w"), uniform_tensor(rng, vec![out, inp, 3], bound));
            store.insert(&format!("{name}.b"), Tensor::zeros(vec![out]));
        };
        let resblock = |store: &mut ParamStore, rng: &mut Prng, name: &str, ch: usize, cond: usize| {
            store.insert(&format!("{name}.gn1.w"), Tensor::filled(vec![ch], 1.0));
            store.insert(&format!("{name}.gn1.b"), Tensor::zeros(vec![ch]));
            conv1d(store, rng, &format!("{name}.conv1"), ch, ch);
            // Identity modulation at start: zero weights, gain bias 1.
            store.insert(&format!("{name}.film.w"), Tensor::zeros(vec![2 * ch, cond]));
            let mut film_b = vec![0.0; 2 * ch];
            film_b[..ch].fill(1.0);
            store.insert(&format!("{name}.film.b"), Tensor::vector(film_b));
            store.insert(&format!("{name}.gn2.w"), Tensor::filled(vec![ch], 1.0));
            store.insert(&format!("{name}.gn2.b"), Tensor::zeros(vec![ch]));
            conv1d(store, rng, &format!("{name}.conv2"), ch, ch);
        };

        let cond = c.cond_dim();
        conv1d(&mut store, &mut rng, "den.inp", c.denoiser_base, 1);
        resblock(&mut store, &mut rng, "den.enc1", c.denoiser_base, cond);
        conv1d(&mut store, &mut rng, "den.down", c.denoiser_mid, c.denoiser_base);
        resblock(&mut store, &mut rng, "den.enc2", c.denoiser_mid, cond);
        resblock(&mut store, &mut rng, "den.enc3", c.denoiser_mid, cond);
        resblock(&mut store, &mut rng, "den.dec1", c.denoiser_mid, cond);
        // Transposed conv back to the outer width: weight layout [in, out, k].
        let bound_up = (1.0 / (c.denoiser_mid * 3) as f64).sqrt();
        store.insert(
            "den.up.w",
            uniform_tensor(&mut rng, vec![c.denoiser_mid, c.denoiser_base, 3], bound_up),
        );
        store.insert("den.up.b", Tensor::zeros(vec![c.denoiser_base]));
        resblock(&mut store, &mut rng, "den.dec2", c.denoiser_base, cond);
        resblock(&mut store, &mut rng, "den.dec3", c.denoiser_base, cond);
        conv1d(&mut store, &mut rng, "den.out", 1, c.denoiser_base);

        ModelParameters { config, store }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = ModelParameters::init(ModelConfig::tiny(), 7);
        let b = ModelParameters::init(ModelConfig::tiny(), 7);
        for ((na, ta), (nb, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = ModelParameters::init(ModelConfig::tiny(), 8);
        let diff = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(diff, "different seeds must give different weights");
    }

    #[test]
    fn default_dims_match_contract() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.embed_dim, 192);
        assert_eq!(cfg.context_dim, 512);
        assert_eq!(cfg.sh_coeffs, 28);
        assert_eq!(cfg.cond_dim(), 256 + 192);
        let p = ModelParameters::init(cfg, 0);
        assert_eq!(p.store.get("spatial.a.proj.w").unwrap().shape(), &[192, 64]);
        assert_eq!(p.store.get("gru.l0.w_ih").unwrap().shape(), &[1536, 192]);
        assert_eq!(p.store.get("gru.l1.w_ih").unwrap().shape(), &[1536, 512]);
        assert_eq!(p.store.get("fuse.w").unwrap().shape(), &[256, 576]);
        assert_eq!(p.store.get("den.up.w").unwrap().shape(), &[128, 64, 3]);
    }

    #[test]
    fn film_initialized_to_identity() {
        let p = ModelParameters::init(ModelConfig::tiny(), 3);
        let w = p.store.get("den.enc1.film.w").unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0));
        let b = p.store.get("den.enc1.film.b").unwrap();
        let ch = ModelConfig::tiny().denoiser_base;
        assert!(b.data()[..ch].iter().all(|&x| x == 1.0));
        assert!(b.data()[ch..].iter().all(|&x| x == 0.0));
    }
}
