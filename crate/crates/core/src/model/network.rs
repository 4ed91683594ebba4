use super::params::{BoundParams, ModelConfig, ModelParameters, ParamStore};
use super::ModelError;
use crate::autodiff::NodeId;
use crate::diffusion::{k_grid, sample_orientation, DiffusionError, SamplerConfig};
use crate::rng::Prng;
use crate::sh::NeighborhoodFeature;
use crate::{Graph, Real};

/// Hidden states of the two stacked GRU layers, carried across streamline
/// steps during tracking.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalState {
    pub h: [Vec<Real>; 2],
}

impl TemporalState {
    pub fn zeros(config: &ModelConfig) -> Self {
        TemporalState { h: [vec![0.0; config.context_dim], vec![0.0; config.context_dim]] }
    }
}

/// Binds a temporal state into the graph as constant leaves.
pub fn temporal_state_leaves(g: &mut Graph, state: &TemporalState) -> (NodeId, NodeId) {
    let h0 = g.constant_vec(state.h[0].clone());
    let h1 = g.constant_vec(state.h[1].clone());
    (h0, h1)
}

fn node(bound: &BoundParams, store: &ParamStore, name: &str) -> Result<NodeId, ModelError> {
    bound.node(store, name)
}

/// Both spatial branches over one neighborhood feature block (channel-major
/// `[m, 3, 3, 3]`): two 3D convs (same padding then valid, collapsing the
/// spatial extent) and a linear projection. Branch a feeds the temporal
/// encoder (z); branch b is the local conditioning embedding (v). The
/// branches share no weights, so each is optimized only through its own
/// output.
pub fn spatial_encode(
    g: &mut Graph,
    params: &ModelParameters,
    bound: &BoundParams,
    feature: &[Real],
) -> Result<(NodeId, NodeId), ModelError> {
    let c = &params.config;
    if feature.len() != c.feature_len() {
        return Err(ModelError::FeatureSize {
            got: feature.len(),
            want: c.feature_len(),
            m: c.sh_coeffs,
        });
    }
    let x = g.constant(vec![c.sh_coeffs, 3, 3, 3], feature.to_vec())?;
    let store = &params.store;
    let branch = |g: &mut Graph, tag: &str| -> Result<NodeId, ModelError> {
        let w1 = node(bound, store, &format!("spatial.{tag}.conv1.w"))?;
        let b1 = node(bound, store, &format!("spatial.{tag}.conv1.b"))?;
        let w2 = node(bound, store, &format!("spatial.{tag}.conv2.w"))?;
        let b2 = node(bound, store, &format!("spatial.{tag}.conv2.b"))?;
        let pw = node(bound, store, &format!("spatial.{tag}.proj.w"))?;
        let pb = node(bound, store, &format!("spatial.{tag}.proj.b"))?;
        let c1 = g.conv3d(x, w1, b1, [1, 1, 1])?;
        let r1 = g.relu(c1);
        let c2 = g.conv3d(r1, w2, b2, [0, 0, 0])?;
        let r2 = g.relu(c2);
        let flat = g.reshape(r2, vec![params.config.spatial_out])?;
        Ok(g.linear(pw, pb, flat)?)
    };
    let z = branch(g, "a")?;
    let v = branch(g, "b")?;
    Ok((z, v))
}

/// One GRU cell with fused gate weights, gates ordered (z, r, n):
/// `h' = (1 - z) * n + z * h`.
pub fn gru_cell(
    g: &mut Graph,
    w_ih: NodeId,
    w_hh: NodeId,
    b_ih: NodeId,
    b_hh: NodeId,
    x: NodeId,
    h: NodeId,
    hidden: usize,
) -> Result<NodeId, ModelError> {
    let gi = g.linear(w_ih, b_ih, x)?;
    let gh = g.linear(w_hh, b_hh, h)?;
    let iz = g.slice(gi, 0, hidden)?;
    let ir = g.slice(gi, hidden, hidden)?;
    let in_ = g.slice(gi, 2 * hidden, hidden)?;
    let hz = g.slice(gh, 0, hidden)?;
    let hr = g.slice(gh, hidden, hidden)?;
    let hn = g.slice(gh, 2 * hidden, hidden)?;
    let zs = g.add(iz, hz)?;
    let z = g.sigmoid(zs);
    let rs = g.add(ir, hr)?;
    let r = g.sigmoid(rs);
    let rhn = g.mul(r, hn)?;
    let ns = g.add(in_, rhn)?;
    let n = g.tanh(ns);
    let one_minus_z = g.affine(z, -1.0, 1.0);
    let a = g.mul(one_minus_z, n)?;
    let b = g.mul(z, h)?;
    Ok(g.add(a, b)?)
}

/// Advances the two-layer GRU stack one step; returns the context vector
/// (the second layer's new hidden state) and both new states.
pub fn temporal_encode(
    g: &mut Graph,
    params: &ModelParameters,
    bound: &BoundParams,
    z: NodeId,
    state: (NodeId, NodeId),
) -> Result<(NodeId, (NodeId, NodeId)), ModelError> {
    let store = &params.store;
    let hidden = params.config.context_dim;
    let layer = |g: &mut Graph, l: usize, x: NodeId, h: NodeId| -> Result<NodeId, ModelError> {
        gru_cell(
            g,
            node(bound, store, &format!("gru.l{l}.w_ih"))?,
            node(bound, store, &format!("gru.l{l}.w_hh"))?,
            node(bound, store, &format!("gru.l{l}.b_ih"))?,
            node(bound, store, &format!("gru.l{l}.b_hh"))?,
            x,
            h,
            hidden,
        )
    };
    let h0 = layer(g, 0, z, state.0)?;
    let h1 = layer(g, 1, h0, state.1)?;
    Ok((h1, (h0, h1)))
}

/// Raw sinusoidal embedding of the diffusion step before projection:
/// interleaved (sin, cos) pairs over geometrically spaced frequencies from
/// 1 to 1000. At k = 0 every sin component is 0 and every cos is 1, and the
/// lowest frequency keeps the map injective on [0, 1].
pub fn embed_step_base(k: Real, dim: usize) -> Vec<Real> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let t = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = 1000f64.powf(t); // 1 .. 1000 geometric
        out.push((k * freq).sin());
        out.push((k * freq).cos());
    }
    out
}

/// Global condition for one diffusion step: the temporal context
/// concatenated with the projected step embedding, fused by a linear map.
pub fn global_condition(
    g: &mut Graph,
    params: &ModelParameters,
    bound: &BoundParams,
    c: NodeId,
    k: Real,
) -> Result<NodeId, ModelError> {
    let store = &params.store;
    let base = g.constant_vec(embed_step_base(k, params.config.step_embed_dim));
    let pw = node(bound, store, "step.proj.w")?;
    let pb = node(bound, store, "step.proj.b")?;
    let proj = g.linear(pw, pb, base)?;
    let cat = g.concat(&[c, proj])?;
    let fw = node(bound, store, "fuse.w")?;
    let fb = node(bound, store, "fuse.b")?;
    Ok(g.linear(fw, fb, cat)?)
}

const GN_EPS: Real = 1e-5;

fn resblock(
    g: &mut Graph,
    params: &ModelParameters,
    bound: &BoundParams,
    name: &str,
    x: NodeId,
    cond: NodeId,
    ch: usize,
) -> Result<NodeId, ModelError> {
    let store = &params.store;
    let groups = params.config.norm_groups.min(ch);
    let fw = node(bound, store, &format!("{name}.film.w"))?;
    let fb = node(bound, store, &format!("{name}.film.b"))?;
    let film_out = g.linear(fw, fb, cond)?;
    let gamma = g.slice(film_out, 0, ch)?;
    let beta = g.slice(film_out, ch, ch)?;

    let gn1w = node(bound, store, &format!("{name}.gn1.w"))?;
    let gn1b = node(bound, store, &format!("{name}.gn1.b"))?;
    let h = g.group_norm(x, gn1w, gn1b, groups, GN_EPS)?;
    let h = g.relu(h);
    let c1w = node(bound, store, &format!("{name}.conv1.w"))?;
    let c1b = node(bound, store, &format!("{name}.conv1.b"))?;
    let h = g.conv1d(h, c1w, c1b, 1)?;
    let h = g.film(h, gamma, beta)?;
    let gn2w = node(bound, store, &format!("{name}.gn2.w"))?;
    let gn2b = node(bound, store, &format!("{name}.gn2.b"))?;
    let h = g.group_norm(h, gn2w, gn2b, groups, GN_EPS)?;
    let h = g.relu(h);
    let c2w = node(bound, store, &format!("{name}.conv2.w"))?;
    let c2b = node(bound, store, &format!("{name}.conv2.b"))?;
    let h = g.conv1d(h, c2w, c2b, 1)?;
    Ok(g.add(x, h)?)
}

/// The conditioned denoiser: the noisy orientation as a single-channel
/// length-3 sequence through a symmetric conv encoder-decoder whose residual
/// blocks are FiLM-modulated by `concat(G, L)`; emits the predicted
/// attenuation 3-vector.
pub fn denoise(
    g: &mut Graph,
    params: &ModelParameters,
    bound: &BoundParams,
    yk: NodeId,
    global_cond: NodeId,
    local_cond: NodeId,
) -> Result<NodeId, ModelError> {
    let store = &params.store;
    let base = params.config.denoiser_base;
    let mid = params.config.denoiser_mid;
    let cond = g.concat(&[global_cond, local_cond])?;

    let x = g.reshape(yk, vec![1, 3])?;
    let iw = node(bound, store, "den.inp.w")?;
    let ib = node(bound, store, "den.inp.b")?;
    let x = g.conv1d(x, iw, ib, 1)?;
    let x = resblock(g, params, bound, "den.enc1", x, cond, base)?;
    let dw = node(bound, store, "den.down.w")?;
    let db = node(bound, store, "den.down.b")?;
    let x = g.conv1d(x, dw, db, 1)?;
    let x = resblock(g, params, bound, "den.enc2", x, cond, mid)?;
    let x = resblock(g, params, bound, "den.enc3", x, cond, mid)?;
    let x = resblock(g, params, bound, "den.dec1", x, cond, mid)?;
    let uw = node(bound, store, "den.up.w")?;
    let ub = node(bound, store, "den.up.b")?;
    let x = g.conv_transpose1d(x, uw, ub, 1)?;
    let x = resblock(g, params, bound, "den.dec2", x, cond, base)?;
    let x = resblock(g, params, bound, "den.dec3", x, cond, base)?;
    let ow = node(bound, store, "den.out.w")?;
    let ob = node(bound, store, "den.out.b")?;
    let x = g.conv1d(x, ow, ob, 1)?;
    Ok(g.reshape(x, vec![3])?)
}

/// Frozen-parameter predictor used by the tracker: advances the temporal
/// state on each feature and samples an orientation through the reverse
/// diffusion chain.
pub struct OrientationPredictor<'m> {
    params: &'m ModelParameters,
    sampler: SamplerConfig,
}

impl<'m> OrientationPredictor<'m> {
    pub fn new(params: &'m ModelParameters, sampler: SamplerConfig) -> Self {
        OrientationPredictor { params, sampler }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn initial_state(&self) -> TemporalState {
        TemporalState::zeros(&self.params.config)
    }

    /// One tracking prediction: spatial-encode the feature, advance the
    /// temporal state, precompute the per-k conditions, then run the
    /// reverse sampler querying the denoiser at each grid step.
    pub fn predict(
        &self,
        feature: &NeighborhoodFeature<Real>,
        state: &mut TemporalState,
        rng: &mut Prng,
    ) -> Result<[Real; 3], PredictError> {
        let params = self.params;
        let mut g = Graph::new();
        let bound = params.store.bind(&mut g, false);
        let chan_major = feature.to_channel_major();
        let (z, v) = spatial_encode(&mut g, params, &bound, &chan_major)?;
        let (h0, h1) = temporal_state_leaves(&mut g, state);
        let (c, (h0n, h1n)) = temporal_encode(&mut g, params, &bound, z, (h0, h1))?;

        // One condition vector per grid k, reused across the reverse chain.
        let ks = k_grid::<Real>(self.sampler.num_steps);
        let mut conds: Vec<(u64, Vec<Real>)> = Vec::with_capacity(ks.len());
        for &k in &ks {
            let gc = global_condition(&mut g, params, &bound, c, k)?;
            let cond = g.concat(&[gc, v])?;
            conds.push((k.to_bits(), g.value(cond).to_vec()));
        }
        state.h[0] = g.value(h0n).to_vec();
        state.h[1] = g.value(h1n).to_vec();
        let v_dim = params.config.embed_dim;
        let g_dim = params.config.global_dim;

        let denoiser = |yk: [Real; 3], k: Real| -> [Real; 3] {
            let cond = &conds
                .iter()
                .find(|(bits, _)| *bits == k.to_bits())
                .expect("k drawn from the shared grid")
                .1;
            let mut g = Graph::new();
            let bound = params.store.bind(&mut g, false);
            let gcond = g.constant_vec(cond[..g_dim].to_vec());
            let lcond = g.constant_vec(cond[g_dim..g_dim + v_dim].to_vec());
            let y = g.constant_vec(yk.to_vec());
            let h = denoise(&mut g, params, &bound, y, gcond, lcond)
                .expect("denoiser shapes are consistent by construction");
            let out = g.value(h);
            [out[0], out[1], out[2]]
        };
        Ok(sample_orientation(&denoiser, self.sampler, rng)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

impl From<crate::autodiff::AdError> for PredictError {
    fn from(e: crate::autodiff::AdError) -> Self {
        PredictError::Model(ModelError::Graph(e))
    }
}

/// Evaluates the full forward for a fixed input, for checkpoint round-trip
/// checks: returns h_pred for a zero temporal state and a constant feature.
pub fn reference_forward(params: &ModelParameters, k: Real) -> Result<[Real; 3], ModelError> {
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, false);
    let feature: Vec<Real> =
        (0..params.config.feature_len()).map(|i| ((i % 7) as Real - 3.0) * 0.25).collect();
    let (z, v) = spatial_encode(&mut g, params, &bound, &feature)?;
    let state = TemporalState::zeros(&params.config);
    let (h0, h1) = temporal_state_leaves(&mut g, &state);
    let (c, _) = temporal_encode(&mut g, params, &bound, z, (h0, h1))?;
    let gc = global_condition(&mut g, params, &bound, c, k)?;
    let yk = g.constant_vec(vec![0.1, -0.2, 0.3]);
    let h = denoise(&mut g, params, &bound, yk, gc, v)?;
    let out = g.value(h);
    Ok([out[0], out[1], out[2]])
}
