//! The denoiser and the Gaussian recognition network.
//!
//! Both models are all-ELU MLPs over summed embeddings. Token embeddings are
//! position-indexed (row `pos * (v+1) + token`) so the pooled sequence
//! embedding knows which coordinate carried which value; the denoiser adds a
//! per-position query embedding before the readout so each output row is a
//! distinct categorical head. Cross-position conditioning is what lets
//! few-step sampling beat a product of marginals.
//!
//! Parameter namespaces: `den.*` for the denoiser, `rec.*` for the
//! recognizer. An MDLM-style baseline is the same denoiser without the
//! latent pathway (`den.z.*` absent).

use crate::graph::{Graph, NodeId};
use crate::masking::TokenSequence;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Log-std clamp range for the recognizer head.
pub const LOGSTD_CLAMP: (f64, f64) = (-7.0, 7.0);

/// Time is scaled by this factor before entering the sinusoid, matching the
/// convention of discrete-step embeddings at a nominal 1000 steps.
pub const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Vocabulary size (number of real classes; the mask symbol is extra).
    pub v: usize,
    /// Sequence length.
    pub n_positions: usize,
    /// Latent dimensionality.
    pub d_latent: usize,
    /// Hidden width of every MLP; the sinusoidal feature width is `2 * width`.
    pub width: usize,
}

/// The geometric frequency ladder `omega_k = 10000^(-k/width)`.
fn frequency_ladder(width: usize) -> Vec<f64> {
    (0..width).map(|k| 10000f64.powf(-(k as f64) / width as f64)).collect()
}

/// Sinusoidal time features: `width` geometric frequencies
/// `omega_k = 10000^(-k/width)`, emitting `[sin(omega_k * t * 1000),
/// cos(omega_k * t * 1000)]` interleaved.
pub fn time_features(t: f64, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * width);
    push_time_features(&mut out, t, &frequency_ladder(width));
    out
}

fn push_time_features(out: &mut Vec<f64>, t: f64, omegas: &[f64]) {
    let tau = t * TIME_SCALE;
    for &omega in omegas {
        out.push((omega * tau).sin());
        out.push((omega * tau).cos());
    }
}

fn time_feature_leaf(g: &mut Graph, ts: &[f64], width: usize) -> NodeId {
    // The ladder depends only on the width, so build it once per batch
    // rather than once per row.
    let omegas = frequency_ladder(width);
    let mut data = Vec::with_capacity(ts.len() * 2 * width);
    for &t in ts {
        push_time_features(&mut data, t, &omegas);
    }
    g.leaf(Tensor::from_vec(ts.len(), 2 * width, data))
}

/// Two-layer time MLP over sinusoidal features: `[2w] -> [w] -> [w]`.
pub fn time_embed(g: &mut Graph, store: &ParamStore, prefix: &str, ts: &[f64], width: usize) -> NodeId {
    let feats = time_feature_leaf(g, ts, width);
    let w0 = g.param(store, &format!("{prefix}.time.l0.w"));
    let b0 = g.param(store, &format!("{prefix}.time.l0.b"));
    let w1 = g.param(store, &format!("{prefix}.time.l1.w"));
    let b1 = g.param(store, &format!("{prefix}.time.l1.b"));
    let h = g.linear(feats, w0, b0);
    let h = g.elu(h);
    g.linear(h, w1, b1)
}

/// Position-indexed row of the token table.
fn token_row(dims: &ModelDims, pos: usize, token: u32) -> usize {
    debug_assert!((token as usize) <= dims.v, "token outside vocab+mask range");
    pos * (dims.v + 1) + token as usize
}

/// Pooled sequence embedding: sum over positions of position-indexed token rows.
fn pooled_token_embedding(
    g: &mut Graph,
    store: &ParamStore,
    table_name: &str,
    dims: &ModelDims,
    batch: &[TokenSequence],
) -> NodeId {
    let mut indices = Vec::with_capacity(batch.len() * dims.n_positions);
    for seq in batch {
        debug_assert_eq!(seq.len(), dims.n_positions);
        for (j, &tok) in seq.iter().enumerate() {
            indices.push(token_row(dims, j, tok));
        }
    }
    let table = g.param(store, table_name);
    let rows = g.embed_rows(table, &indices);
    g.sum_groups(rows, dims.n_positions)
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// Mean network `mu_theta`: predicts a categorical over the `v` real classes
/// for every position. `has_latent = false` is the MDLM-style baseline.
#[derive(Clone, Copy, Debug)]
pub struct Denoiser {
    pub dims: ModelDims,
    pub has_latent: bool,
}

impl Denoiser {
    /// Initialize `den.*` parameters in the store.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let ModelDims { v, n_positions, d_latent, width } = self.dims;
        store.init_embedding("den.tok_emb", n_positions * (v + 1), width, rng);
        store.init_embedding("den.pos_emb", n_positions, width, rng);
        store.init_linear("den.time.l0", 2 * width, width, rng);
        store.init_linear("den.time.l1", width, width, rng);
        if self.has_latent {
            store.init_linear("den.z.l0", d_latent, width, rng);
        }
        for l in 0..4 {
            store.init_linear(&format!("den.out.l{l}"), width, width, rng);
        }
        store.init_linear("den.out.l4", width, v, rng);
    }

    /// Log-probability rows `log mu` of shape `[batch * n_positions, v]`.
    /// Row `b * n_positions + j` is the categorical for position `j` of batch
    /// element `b`; rows exponentiate to unit mass over the real classes, so
    /// the implied mask-class probability is exactly zero.
    pub fn log_mu(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xt: &[TokenSequence],
        z: Option<NodeId>,
        ts: &[f64],
    ) -> NodeId {
        assert_eq!(xt.len(), ts.len(), "one time per batch element");
        let dims = &self.dims;
        let emb_t = time_embed(g, store, "den", ts, dims.width);
        let e_sum = pooled_token_embedding(g, store, "den.tok_emb", dims, xt);
        let mut base = g.add(e_sum, emb_t);
        match (self.has_latent, z) {
            (true, Some(z)) => {
                let w0 = g.param(store, "den.z.l0.w");
                let b0 = g.param(store, "den.z.l0.b");
                let emb_z = g.linear(z, w0, b0);
                base = g.add(base, emb_z);
            }
            (true, None) => panic!("latent denoiser needs z"),
            (false, Some(_)) => panic!("baseline denoiser takes no z"),
            (false, None) => {}
        }
        let rep = g.repeat_rows(base, dims.n_positions);
        let pos = g.param(store, "den.pos_emb");
        let mut h = g.add_cycle(rep, pos);
        for l in 0..4 {
            let w = g.param(store, &format!("den.out.l{l}.w"));
            let b = g.param(store, &format!("den.out.l{l}.b"));
            h = g.linear(h, w, b);
            h = g.elu(h);
        }
        let w = g.param(store, "den.out.l4.w");
        let b = g.param(store, "den.out.l4.b");
        let logits = g.linear(h, w, b);
        g.log_softmax_rows(logits, None)
    }

    /// Probability rows `[n_positions, v]` for one sequence, outside any
    /// gradient context. Used by the samplers and oracles.
    pub fn mu_probs(
        &self,
        store: &ParamStore,
        xt: &TokenSequence,
        z: Option<&[f64]>,
        t: f64,
    ) -> Tensor {
        let mut g = Graph::new();
        let zn = z.map(|zv| {
            assert_eq!(zv.len(), self.dims.d_latent);
            g.leaf(Tensor::from_vec(1, zv.len(), zv.to_vec()))
        });
        let log_mu = self.log_mu(&mut g, store, std::slice::from_ref(xt), zn, &[t]);
        g.value(log_mu).map(f64::exp)
    }
}

// ---------------------------------------------------------------------------
// Recognizer
// ---------------------------------------------------------------------------

/// Diagonal-Gaussian posterior produced by [`Recognizer::posterior`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    /// `[batch, d]` mean.
    pub mean: NodeId,
    /// `[batch, d]` log standard deviation, clamped to [`LOGSTD_CLAMP`].
    pub logstd: NodeId,
}

/// Recognition network `r_phi(z | x0, xt, t)`: a Siamese trunk over the two
/// sequence embeddings, averaged, followed by a Gaussian head.
#[derive(Clone, Copy, Debug)]
pub struct Recognizer {
    pub dims: ModelDims,
}

impl Recognizer {
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let ModelDims { v, n_positions, d_latent, width } = self.dims;
        store.init_embedding("rec.tok_emb", n_positions * (v + 1), width, rng);
        store.init_linear("rec.time.l0", 2 * width, width, rng);
        store.init_linear("rec.time.l1", width, width, rng);
        for l in 0..5 {
            store.init_linear(&format!("rec.trunk.l{l}"), width, width, rng);
        }
        store.init_linear("rec.head.l0", width, width, rng);
        store.init_linear("rec.head.l1", width, 2 * d_latent, rng);
    }

    fn trunk(&self, g: &mut Graph, layers: &[(NodeId, NodeId)], input: NodeId) -> NodeId {
        let mut h = input;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = g.linear(h, w, b);
            if i + 1 < layers.len() {
                h = g.elu(h);
            }
        }
        h
    }

    /// Posterior `(mean, std)` values for one `(x0, xt, t)` triple, outside
    /// any gradient context. Used by the likelihood estimators.
    pub fn posterior_values(
        &self,
        store: &ParamStore,
        x0: &TokenSequence,
        xt: &TokenSequence,
        t: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let post = self.posterior(
            &mut g,
            store,
            std::slice::from_ref(x0),
            std::slice::from_ref(xt),
            &[t],
        );
        let mean = g.value(post.mean).values().to_vec();
        let std = g.value(post.logstd).values().iter().map(|s| s.exp()).collect();
        (mean, std)
    }

    /// Posterior parameters for a batch of `(x0, xt, t)` triples.
    pub fn posterior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x0: &[TokenSequence],
        xt: &[TokenSequence],
        ts: &[f64],
    ) -> GaussianPosterior {
        assert_eq!(x0.len(), xt.len());
        assert_eq!(x0.len(), ts.len());
        let dims = &self.dims;
        let emb_t = time_embed(g, store, "rec", ts, dims.width);
        let e0 = pooled_token_embedding(g, store, "rec.tok_emb", dims, x0);
        let et = pooled_token_embedding(g, store, "rec.tok_emb", dims, xt);
        let in0 = g.add(e0, emb_t);
        let int = g.add(et, emb_t);

        // Shared trunk weights: pull each parameter once, reuse in both branches.
        let layers: Vec<(NodeId, NodeId)> = (0..5)
            .map(|l| {
                let w = g.param(store, &format!("rec.trunk.l{l}.w"));
                let b = g.param(store, &format!("rec.trunk.l{l}.b"));
                (w, b)
            })
            .collect();
        let out0 = self.trunk(g, &layers, in0);
        let outt = self.trunk(g, &layers, int);
        let both = g.add(out0, outt);
        let avg = g.scale(both, 0.5);

        let w0 = g.param(store, "rec.head.l0.w");
        let b0 = g.param(store, "rec.head.l0.b");
        let w1 = g.param(store, "rec.head.l1.w");
        let b1 = g.param(store, "rec.head.l1.b");
        let h = g.linear(avg, w0, b0);
        let h = g.elu(h);
        let head = g.linear(h, w1, b1);

        let mean = g.slice_cols(head, 0, dims.d_latent);
        let logstd_raw = g.slice_cols(head, dims.d_latent, dims.d_latent);
        let logstd = g.clamp(logstd_raw, LOGSTD_CLAMP.0, LOGSTD_CLAMP.1);
        GaussianPosterior { mean, logstd }
    }
}

/// Reparameterized draw `z = mean + exp(logstd) * eps` for a supplied noise
/// tensor `eps` of shape `[batch, d]`.
pub fn sample_latent(g: &mut Graph, posterior: &GaussianPosterior, eps: Tensor) -> NodeId {
    let std = g.exp(posterior.logstd);
    let eps_leaf = g.leaf(eps);
    let scaled = g.mul(std, eps_leaf);
    g.add(posterior.mean, scaled)
}

/// Draw `batch * d` standard normals for reparameterization.
pub fn draw_eps(rng: &mut Rng, batch: usize, d: usize) -> Tensor {
    Tensor::from_fn(batch, d, |_, _| rng.next_normal())
}

/// Model surgery: make the latent pathway inert in place. The z-MLP becomes
/// the zero map (its output is exactly the zero vector for every z) and the
/// recognizer head's final layer becomes zero, pinning the posterior to
/// exactly (mean 0, std 1): the Gaussian KL is exactly zero and
/// reparameterized draws are pure prior noise.
pub fn disable_latent_pathway(store: &mut ParamStore) {
    for name in ["den.z.l0.w", "den.z.l0.b", "rec.head.l1.w", "rec.head.l1.b"] {
        if store.contains(name) {
            store.get_mut(name).values_mut().fill(0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Shape inference from a parameter store (for checkpoint loading)
// ---------------------------------------------------------------------------

/// Reconstruct model dimensions and flavor from checkpointed parameters.
pub fn infer_dims(store: &ParamStore) -> (ModelDims, bool, bool) {
    let pos = store.get("den.pos_emb");
    let n_positions = pos.rows();
    let width = pos.cols();
    let tok = store.get("den.tok_emb");
    let v = tok.rows() / n_positions - 1;
    let has_latent = store.contains("den.z.l0.w");
    let has_recognizer = store.contains("rec.head.l1.w");
    let d_latent = if has_latent {
        store.get("den.z.l0.w").rows()
    } else if has_recognizer {
        store.get("rec.head.l1.w").cols() / 2
    } else {
        0
    };
    (ModelDims { v, n_positions, d_latent, width }, has_latent, has_recognizer)
}
