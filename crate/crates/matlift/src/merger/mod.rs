//! Per-channel neural mergers.
//!
//! Each material channel owns an MLP (3 hidden layers of 128 units, ReLU)
//! that maps a Gaussian's encoded position plus its per-view material
//! estimates and seen-mask to one logit per view. A masked softmax turns the
//! logits into convex weights; the merged value is the weighted sum of the
//! per-view estimates, so it can never leave the hull of the observations.
//!
//! The no-softmax ablation replaces that head with a direct linear value
//! output, removing the constraint.

pub(crate) mod checkpoint;

pub use checkpoint::{load_params, save_params};
pub(crate) use checkpoint::{read_params_from as checkpoint_read_params, write_params_to as checkpoint_write_params};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;

pub const HIDDEN_WIDTH: usize = 128;
pub const HIDDEN_LAYERS: usize = 3;
pub const DEFAULT_PE_LEVELS: usize = 6;
/// Upper bound on merger input width; scenes with more views subsample.
pub const DEFAULT_MAX_VIEWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaterialChannel {
    Basecolor,
    Roughness,
    Metallic,
}

impl MaterialChannel {
    pub const ALL: [MaterialChannel; 3] = [
        MaterialChannel::Basecolor,
        MaterialChannel::Roughness,
        MaterialChannel::Metallic,
    ];

    /// Scalar components merged under one weight vector.
    pub fn dims(&self) -> usize {
        match self {
            MaterialChannel::Basecolor => 3,
            _ => 1,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            MaterialChannel::Basecolor => 0,
            MaterialChannel::Roughness => 1,
            MaterialChannel::Metallic => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaterialChannel::Basecolor => "basecolor",
            MaterialChannel::Roughness => "roughness",
            MaterialChannel::Metallic => "metallic",
        }
    }
}

/// Output head of the merger MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergerHead {
    /// Softmax view weights; merged value is a convex combination.
    Softmax,
    /// Unconstrained linear value output (the no-softmax ablation).
    DirectValue,
}

#[derive(Debug, Clone)]
pub struct Dense<R> {
    /// out x in
    pub w: Array2<R>,
    pub b: Array1<R>,
}

impl<R: Real> Dense<R> {
    fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            w: Array2::zeros((out, inp)),
            b: Array1::zeros(out),
        }
    }
}

/// One material channel's merger network.
#[derive(Debug, Clone)]
pub struct ChannelMerger<R> {
    pub channel: MaterialChannel,
    pub views: usize,
    pub pe_levels: usize,
    pub head: MergerHead,
    pub layers: Vec<Dense<R>>,
}

/// The three per-channel mergers trained jointly.
#[derive(Debug, Clone)]
pub struct MergerParams<R> {
    pub basecolor: ChannelMerger<R>,
    pub roughness: ChannelMerger<R>,
    pub metallic: ChannelMerger<R>,
}

impl<R: Real> MergerParams<R> {
    pub fn channel(&self, c: MaterialChannel) -> &ChannelMerger<R> {
        match c {
            MaterialChannel::Basecolor => &self.basecolor,
            MaterialChannel::Roughness => &self.roughness,
            MaterialChannel::Metallic => &self.metallic,
        }
    }

    pub fn channel_mut(&mut self, c: MaterialChannel) -> &mut ChannelMerger<R> {
        match c {
            MaterialChannel::Basecolor => &mut self.basecolor,
            MaterialChannel::Roughness => &mut self.roughness,
            MaterialChannel::Metallic => &mut self.metallic,
        }
    }
}

/// Weights and merged value for a single Gaussian.
#[derive(Debug, Clone)]
pub struct MergerOutput<R> {
    /// Softmax view weights (zeros for unseen views); empty for the
    /// direct-value head.
    pub weights: Vec<R>,
    /// Merged channel value(s): 3 for basecolor, 1 otherwise.
    pub merged: Vec<R>,
}

/// NeRF-style frequency encoding: (sin(2^k π p_i), cos(2^k π p_i)) pairs for
/// k = 0..levels-1, i = x,y,z. Output length 6 * levels.
pub fn positional_encode(p: [f64; 3], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * levels);
    for k in 0..levels {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for pi in p {
            out.push((f * pi).sin());
            out.push((f * pi).cos());
        }
    }
    out
}

/// Maps a point into the scene's [-1,1]³ normalized box.
pub fn normalize_position(p: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let extent = hi[i] - lo[i];
        out[i] = if extent > 1e-12 {
            2.0 * (p[i] - lo[i]) / extent - 1.0
        } else {
            0.0
        };
    }
    out
}

impl<R: Real> ChannelMerger<R> {
    pub fn input_dim(&self) -> usize {
        6 * self.pe_levels + 3 + self.views * self.channel.dims() + self.views
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            MergerHead::Softmax => self.views,
            MergerHead::DirectValue => self.channel.dims(),
        }
    }

    /// Feature layout: [positional encoding | raw normalized position |
    /// per-view values (view-major) | seen mask].
    pub fn build_input(&self, p_norm: [f64; 3], values: &[f64], seen: &[bool]) -> Vec<R> {
        debug_assert_eq!(values.len(), self.views * self.channel.dims());
        debug_assert_eq!(seen.len(), self.views);
        let mut x = Vec::with_capacity(self.input_dim());
        for v in positional_encode(p_norm, self.pe_levels) {
            x.push(R::of(v));
        }
        for v in p_norm {
            x.push(R::of(v));
        }
        for &v in values {
            x.push(R::of(v));
        }
        for &s in seen {
            x.push(if s { R::one() } else { R::zero() });
        }
        x
    }

    pub fn flat_tensors(&self) -> Vec<&[R]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.w.as_slice().expect("standard layout"));
            out.push(layer.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn flat_tensors_mut(&mut self) -> Vec<&mut [R]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let Dense { w, b } = layer;
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// He-initialized hidden layers from the seeded generator, zero-initialized
/// output layer: training starts at the uniform average over seen views.
pub fn init_channel<R: Real>(
    seed: u64,
    views: usize,
    channel: MaterialChannel,
    head: MergerHead,
    pe_levels: usize,
) -> ChannelMerger<R> {
    assert!(views >= 1, "merger needs at least one view");
    let mut merger = ChannelMerger {
        channel,
        views,
        pe_levels,
        head,
        layers: Vec::new(),
    };
    let input_dim = merger.input_dim();
    let dims = [input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH];
    for l in 0..HIDDEN_LAYERS {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((channel.index() as u64) << 8 | l as u64);
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| R::of(normal.sample(&mut rng)));
        merger.layers.push(Dense {
            w,
            b: Array1::zeros(fan_out),
        });
    }
    merger
        .layers
        .push(Dense::zeros(merger.output_dim(), HIDDEN_WIDTH));
    merger
}

/// Initializes all three channel mergers from one seed.
pub fn init_params<R: Real>(
    seed: u64,
    views: usize,
    head: MergerHead,
    pe_levels: usize,
) -> MergerParams<R> {
    MergerParams {
        basecolor: init_channel(seed, views, MaterialChannel::Basecolor, head, pe_levels),
        roughness: init_channel(seed, views, MaterialChannel::Roughness, head, pe_levels),
        metallic: init_channel(seed, views, MaterialChannel::Metallic, head, pe_levels),
    }
}

/// Activations cached by the batched forward pass for reuse in backward.
pub struct ForwardCache<R> {
    /// Post-ReLU activations of the hidden layers.
    pub hidden: Vec<Array2<R>>,
    /// Raw output-layer values (logits or direct values).
    pub logits: Array2<R>,
    /// Softmax weights, zero on unseen views (softmax head only).
    pub weights: Array2<R>,
}

/// Per-layer parameter gradients.
pub struct ChannelGrads<R> {
    pub layers: Vec<Dense<R>>,
}

impl<R: Real> ChannelGrads<R> {
    pub fn zeros_like(merger: &ChannelMerger<R>) -> Self {
        ChannelGrads {
            layers: merger
                .layers
                .iter()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn flat_tensors(&self) -> Vec<&[R]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.w.as_slice().expect("standard layout"));
            out.push(layer.b.as_slice().expect("standard layout"));
        }
        out
    }
}

fn relu_inplace<R: Real>(a: &mut Array2<R>) {
    a.mapv_inplace(|v| if v > R::zero() { v } else { R::zero() });
}

/// Batched forward pass.
///
/// `x`: N x input_dim feature rows (see [`ChannelMerger::build_input`]);
/// `values`: N x (V * dims) per-view estimates, view-major;
/// `seen`: N x V mask as 0/1.
///
/// Unseen logits are forced to -inf before the softmax, so unseen views get
/// exactly zero weight. Rows must have at least one seen view.
pub fn forward_batch<R: Real>(
    merger: &ChannelMerger<R>,
    x: &Array2<R>,
    values: &Array2<R>,
    seen: &Array2<R>,
) -> Result<(Array2<R>, ForwardCache<R>)> {
    let n = x.nrows();
    let v = merger.views;
    let dims = merger.channel.dims();
    if x.ncols() != merger.input_dim() {
        return Err(Error::validation(format!(
            "merger input width {} != expected {}",
            x.ncols(),
            merger.input_dim()
        )));
    }

    let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
    let mut a = x.dot(&merger.layers[0].w.t()) + &merger.layers[0].b;
    relu_inplace(&mut a);
    hidden.push(a);
    for l in 1..HIDDEN_LAYERS {
        let mut a = hidden[l - 1].dot(&merger.layers[l].w.t()) + &merger.layers[l].b;
        relu_inplace(&mut a);
        hidden.push(a);
    }
    let out_layer = &merger.layers[HIDDEN_LAYERS];
    let logits = hidden[HIDDEN_LAYERS - 1].dot(&out_layer.w.t()) + &out_layer.b;

    match merger.head {
        MergerHead::Softmax => {
            let mut weights = Array2::zeros((n, v));
            let mut merged = Array2::zeros((n, dims));
            for i in 0..n {
                let mut max = R::neg_infinity();
                for j in 0..v {
                    if seen[(i, j)] > R::zero() && logits[(i, j)] > max {
                        max = logits[(i, j)];
                    }
                }
                if max == R::neg_infinity() {
                    return Err(Error::validation(
                        "merger input row has no seen view; it should have been culled",
                    ));
                }
                let mut sum = R::zero();
                for j in 0..v {
                    if seen[(i, j)] > R::zero() {
                        let e = (logits[(i, j)] - max).exp();
                        weights[(i, j)] = e;
                        sum += e;
                    }
                }
                for j in 0..v {
                    let w = weights[(i, j)] / sum;
                    weights[(i, j)] = w;
                    if w > R::zero() {
                        for k in 0..dims {
                            merged[(i, k)] += w * values[(i, j * dims + k)];
                        }
                    }
                }
            }
            Ok((
                merged,
                ForwardCache {
                    hidden,
                    logits,
                    weights,
                },
            ))
        }
        MergerHead::DirectValue => {
            let merged = logits.clone();
            Ok((
                merged,
                ForwardCache {
                    hidden,
                    logits,
                    weights: Array2::zeros((0, 0)),
                },
            ))
        }
    }
}

/// Exact analytic gradients of the batched forward pass with respect to all
/// layer parameters. Gradients for unseen views' logits are zero by
/// construction (their softmax weight is zero).
pub fn backward_batch<R: Real>(
    merger: &ChannelMerger<R>,
    x: &Array2<R>,
    values: &Array2<R>,
    cache: &ForwardCache<R>,
    grad_merged: &Array2<R>,
) -> ChannelGrads<R> {
    let n = x.nrows();
    let v = merger.views;
    let dims = merger.channel.dims();

    // Gradient at the raw output layer.
    let dlogits = match merger.head {
        MergerHead::Softmax => {
            let w = &cache.weights;
            let mut dweights = Array2::<R>::zeros((n, v));
            for i in 0..n {
                for j in 0..v {
                    let mut acc = R::zero();
                    for k in 0..dims {
                        acc += grad_merged[(i, k)] * values[(i, j * dims + k)];
                    }
                    dweights[(i, j)] = acc;
                }
            }
            // Softmax Jacobian: dh_j = w_j (dw_j - sum_u dw_u w_u).
            let mut dlogits = Array2::<R>::zeros((n, v));
            for i in 0..n {
                let mut dot = R::zero();
                for j in 0..v {
                    dot += dweights[(i, j)] * w[(i, j)];
                }
                for j in 0..v {
                    dlogits[(i, j)] = w[(i, j)] * (dweights[(i, j)] - dot);
                }
            }
            dlogits
        }
        MergerHead::DirectValue => grad_merged.clone(),
    };

    let mut grads = ChannelGrads::zeros_like(merger);
    let last = HIDDEN_LAYERS;
    grads.layers[last].w = dlogits.t().dot(&cache.hidden[last - 1]);
    grads.layers[last].b = dlogits.sum_axis(Axis(0));

    let mut delta = dlogits.dot(&merger.layers[last].w);
    for l in (0..HIDDEN_LAYERS).rev() {
        // ReLU mask from the cached post-activation values.
        ndarray::Zip::from(&mut delta)
            .and(&cache.hidden[l])
            .for_each(|d, &a| {
                if a <= R::zero() {
                    *d = R::zero();
                }
            });
        let below: &Array2<R> = if l == 0 { x } else { &cache.hidden[l - 1] };
        grads.layers[l].w = delta.t().dot(below);
        grads.layers[l].b = delta.sum_axis(Axis(0));
        if l > 0 {
            delta = delta.dot(&merger.layers[l].w);
        }
    }
    grads
}

/// Single-Gaussian forward pass (a batch of one).
pub fn merger_forward<R: Real>(
    merger: &ChannelMerger<R>,
    p_norm: [f64; 3],
    values: &[f64],
    seen: &[bool],
) -> Result<MergerOutput<R>> {
    let x = Array2::from_shape_vec(
        (1, merger.input_dim()),
        merger.build_input(p_norm, values, seen),
    )
    .expect("shape matches");
    let vals = Array2::from_shape_vec(
        (1, values.len()),
        values.iter().map(|&v| R::of(v)).collect(),
    )
    .expect("shape matches");
    let mask = Array2::from_shape_vec(
        (1, seen.len()),
        seen.iter()
            .map(|&s| if s { R::one() } else { R::zero() })
            .collect(),
    )
    .expect("shape matches");
    let (merged, cache) = forward_batch(merger, &x, &vals, &mask)?;
    Ok(MergerOutput {
        weights: cache.weights.iter().copied().collect(),
        merged: merged.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn positional_encoding_origin() {
        let pe = positional_encode([0.0; 3], 4);
        assert_eq!(pe.len(), 24);
        for pair in pe.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn positional_encoding_boundary() {
        let pe = positional_encode([1.0, 0.0, 0.0], 1);
        assert_eq!(pe.len(), 6);
        assert!(pe[0].abs() < 1e-12); // sin(pi)
        assert!((pe[1] + 1.0).abs() < 1e-12); // cos(pi)
        assert_eq!(pe[2], 0.0);
        assert_eq!(pe[3], 1.0);
    }

    #[test]
    fn positional_encoding_length() {
        assert_eq!(positional_encode([0.3, -0.2, 0.9], 6).len(), 36);
    }

    #[test]
    fn init_is_deterministic() {
        let a: ChannelMerger<f64> =
            init_channel(42, 4, MaterialChannel::Basecolor, MergerHead::Softmax, 6);
        let b: ChannelMerger<f64> =
            init_channel(42, 4, MaterialChannel::Basecolor, MergerHead::Softmax, 6);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
        let c: ChannelMerger<f64> =
            init_channel(43, 4, MaterialChannel::Basecolor, MergerHead::Softmax, 6);
        assert_ne!(a.layers[0].w, c.layers[0].w);
    }

    #[test]
    fn fresh_params_give_uniform_weights_over_seen_views() {
        let merger: ChannelMerger<f64> =
            init_channel(7, 4, MaterialChannel::Roughness, MergerHead::Softmax, 6);
        let out = merger_forward(
            &merger,
            [0.1, -0.5, 0.7],
            &[0.2, 0.4, 0.6, 0.8],
            &[true, false, true, true],
        )
        .unwrap();
        assert!((out.weights[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(out.weights[1], 0.0);
        assert!((out.weights[2] - 1.0 / 3.0).abs() < 1e-12);
        // Merged equals the seen-view mean: the projected-average baseline.
        let mean = (0.2 + 0.6 + 0.8) / 3.0;
        assert!((out.merged[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn constant_inputs_merge_to_the_constant() {
        let mut merger: ChannelMerger<f64> =
            init_channel(3, 5, MaterialChannel::Roughness, MergerHead::Softmax, 6);
        // Randomize the output layer so weights are not uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        merger.layers[HIDDEN_LAYERS]
            .w
            .mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let out = merger_forward(&merger, [0.0; 3], &[0.37; 5], &[true; 5]).unwrap();
        assert!((out.merged[0] - 0.37).abs() < 1e-12);
        let sum: f64 = out.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    /// Softmax-merge arithmetic oracle: logits (10, 0, 0) over values
    /// (0.1, 0.5, 0.9) computed with scalar arithmetic.
    #[test]
    fn softmax_merge_matches_scalar_arithmetic() {
        let h: [f64; 3] = [10.0, 0.0, 0.0];
        let values = [0.1, 0.5, 0.9];
        let z: f64 = h.iter().map(|x| x.exp()).sum();
        let w: Vec<f64> = h.iter().map(|x| x.exp() / z).collect();
        let merged: f64 = w.iter().zip(&values).map(|(w, v)| w * v).sum();
        // Dominated by view 1 but strictly inside the hull.
        assert!(merged > 0.1 && merged < 0.9);
        assert!((merged - 0.1) < 1e-3);

        // Drive the merger to those logits via the output bias.
        let mut merger: ChannelMerger<f64> =
            init_channel(1, 3, MaterialChannel::Metallic, MergerHead::Softmax, 2);
        for l in merger.layers.iter_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        merger.layers[HIDDEN_LAYERS].b = Array1::from_vec(h.to_vec());
        let out = merger_forward(&merger, [0.0; 3], &values, &[true; 3]).unwrap();
        for (a, b) in out.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.merged[0] - merged).abs() < 1e-12);
    }

    #[test]
    fn all_unseen_is_a_contract_violation() {
        let merger: ChannelMerger<f64> =
            init_channel(1, 2, MaterialChannel::Roughness, MergerHead::Softmax, 2);
        assert!(merger_forward(&merger, [0.0; 3], &[0.5, 0.5], &[false, false]).is_err());
    }

    fn random_setup(
        seed: u64,
        n: usize,
        views: usize,
        channel: MaterialChannel,
        head: MergerHead,
    ) -> (ChannelMerger<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut merger: ChannelMerger<f64> = init_channel(seed, views, channel, head, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        // Non-zero output layer so softmax gradients are non-trivial.
        for l in merger.layers.iter_mut() {
            l.w.mapv_inplace(|w| {
                if w == 0.0 {
                    rng.random_range(-0.3..0.3)
                } else {
                    w * 0.2
                }
            });
            l.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let dims = channel.dims();
        let mut x = Array2::zeros((n, merger.input_dim()));
        let mut values = Array2::zeros((n, views * dims));
        let mut seen = Array2::zeros((n, views));
        for i in 0..n {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let vals: Vec<f64> = (0..views * dims).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut mask = vec![false; views];
            for m in mask.iter_mut() {
                *m = rng.random_range(0.0..1.0) < 0.7;
            }
            if !mask.iter().any(|&m| m) {
                mask[0] = true;
            }
            let row = merger.build_input(p, &vals, &mask);
            for (j, val) in row.into_iter().enumerate() {
                x[(i, j)] = val;
            }
            for (j, val) in vals.iter().enumerate() {
                values[(i, j)] = *val;
            }
            for (j, m) in mask.iter().enumerate() {
                seen[(i, j)] = if *m { 1.0 } else { 0.0 };
            }
        }
        (merger, x, values, seen)
    }

    fn loss_of(
        merger: &ChannelMerger<f64>,
        x: &Array2<f64>,
        values: &Array2<f64>,
        seen: &Array2<f64>,
        target: &Array2<f64>,
    ) -> f64 {
        let (merged, _) = forward_batch(merger, x, values, seen).unwrap();
        // 0.5 * sum of squares against the target keeps the upstream
        // gradient simple: merged - target.
        let diff = &merged - target;
        0.5 * diff.iter().map(|d| d * d).sum::<f64>()
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        for (channel, head) in [
            (MaterialChannel::Basecolor, MergerHead::Softmax),
            (MaterialChannel::Roughness, MergerHead::Softmax),
            (MaterialChannel::Metallic, MergerHead::Softmax),
            (MaterialChannel::Basecolor, MergerHead::DirectValue),
        ] {
            let (mut merger, x, values, seen) = random_setup(11, 6, 3, channel, head);
            let dims = channel.dims();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let target =
                Array2::from_shape_fn((6, dims), |_| rng.random_range(0.0..1.0) as f64);

            let (merged, cache) = forward_batch(&merger, &x, &values, &seen).unwrap();
            let grad_merged = &merged - &target;
            let grads = backward_batch(&merger, &x, &values, &cache, &grad_merged);

            let eps = 1e-4;
            for layer in 0..merger.layers.len() {
                // Probe a handful of entries per layer.
                let shape = merger.layers[layer].w.raw_dim();
                let probes = [
                    (0usize, 0usize),
                    (shape[0] / 2, shape[1] / 2),
                    (shape[0] - 1, shape[1] - 1),
                ];
                for &(r, c) in &probes {
                    let orig = merger.layers[layer].w[(r, c)];
                    merger.layers[layer].w[(r, c)] = orig + eps;
                    let lp = loss_of(&merger, &x, &values, &seen, &target);
                    merger.layers[layer].w[(r, c)] = orig - eps;
                    let lm = loss_of(&merger, &x, &values, &seen, &target);
                    merger.layers[layer].w[(r, c)] = orig;
                    let fd = (lp - lm) / (2.0 * eps);
                    let an = grads.layers[layer].w[(r, c)];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "layer {layer} w[{r},{c}] ({channel:?},{head:?}): fd {fd} vs analytic {an}"
                    );
                }
                let bi = merger.layers[layer].b.len() / 2;
                let orig = merger.layers[layer].b[bi];
                merger.layers[layer].b[bi] = orig + eps;
                let lp = loss_of(&merger, &x, &values, &seen, &target);
                merger.layers[layer].b[bi] = orig - eps;
                let lm = loss_of(&merger, &x, &values, &seen, &target);
                merger.layers[layer].b[bi] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.layers[layer].b[bi];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_means_zero_parameter_gradients() {
        let (merger, x, values, seen) = random_setup(21, 4, 3, MaterialChannel::Roughness, MergerHead::Softmax);
        let (_, cache) = forward_batch(&merger, &x, &values, &seen).unwrap();
        let grads = backward_batch(&merger, &x, &values, &cache, &Array2::zeros((4, 1)));
        for layer in &grads.layers {
            assert!(layer.w.iter().all(|&g| g == 0.0));
            assert!(layer.b.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn single_seen_view_fixes_weight_and_kills_logit_gradients() {
        let (merger, _, _, _) = random_setup(31, 1, 3, MaterialChannel::Metallic, MergerHead::Softmax);
        let values = [0.3, 0.3, 0.3];
        let seen = [false, true, false];
        let out = merger_forward(&merger, [0.2, 0.0, -0.3], &values, &seen).unwrap();
        assert_eq!(out.weights[1], 1.0);
        assert_eq!(out.weights[0], 0.0);

        let x = Array2::from_shape_vec(
            (1, merger.input_dim()),
            merger.build_input([0.2, 0.0, -0.3], &values, &seen),
        )
        .unwrap();
        let vals = Array2::from_shape_vec((1, 3), values.to_vec()).unwrap();
        let mask = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        let (_, cache) = forward_batch(&merger, &x, &vals, &mask).unwrap();
        let grads = backward_batch(&merger, &x, &vals, &cache, &Array2::from_elem((1, 1), 1.0));
        // Softmax over one element is constant: all output-layer grads vanish.
        assert!(grads.layers[HIDDEN_LAYERS].w.iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn merged_stays_in_hull_of_seen_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut merger: ChannelMerger<f64> =
            init_channel(77, 5, MaterialChannel::Roughness, MergerHead::Softmax, 4);
        for l in merger.layers.iter_mut() {
            l.w.mapv_inplace(|_| rng.random_range(-2.0..2.0));
            l.b.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        }
        for _ in 0..200 {
            let vals: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut seen = [false; 5];
            for s in seen.iter_mut() {
                *s = rng.random_range(0.0..1.0) < 0.6;
            }
            if !seen.iter().any(|&s| s) {
                seen[2] = true;
            }
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let out = merger_forward(&merger, p, &vals, &seen).unwrap();
            let lo = vals
                .iter()
                .zip(&seen)
                .filter(|(_, &s)| s)
                .map(|(v, _)| *v)
                .fold(f64::INFINITY, f64::min);
            let hi = vals
                .iter()
                .zip(&seen)
                .filter(|(_, &s)| s)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(out.merged[0] >= lo - 1e-12 && out.merged[0] <= hi + 1e-12);
            let sum: f64 = out.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(out.weights.iter().all(|&w| w >= 0.0));
        }
    }

    /// Permuting views (value slots, mask slots, and the matching parameter
    /// columns/rows) permutes the weights identically.
    #[test]
    fn view_permutation_wiring() {
        let views = 4;
        let channel = MaterialChannel::Basecolor;
        let (merger, _, _, _) = random_setup(55, 1, views, channel, MergerHead::Softmax);
        let dims = channel.dims();
        let p = [0.3, -0.6, 0.1];
        let values: Vec<f64> = (0..views * dims).map(|i| (i as f64 * 0.07).fract()).collect();
        let seen = vec![true; views];
        let out = merger_forward(&merger, p, &values, &seen).unwrap();

        // Cyclic permutation sigma(v) = (v + 1) % views applied to inputs...
        let perm: Vec<usize> = (0..views).map(|v| (v + 1) % views).collect();
        let mut pvalues = vec![0.0; values.len()];
        for v in 0..views {
            for k in 0..dims {
                pvalues[perm[v] * dims + k] = values[v * dims + k];
            }
        }
        // ...and to the parameters: value columns, mask columns of layer 0,
        // and output rows.
        let mut pmerger = merger.clone();
        let pe = 6 * merger.pe_levels + 3;
        for row in 0..HIDDEN_WIDTH {
            for v in 0..views {
                for k in 0..dims {
                    pmerger.layers[0].w[(row, pe + perm[v] * dims + k)] =
                        merger.layers[0].w[(row, pe + v * dims + k)];
                }
                pmerger.layers[0].w[(row, pe + views * dims + perm[v])] =
                    merger.layers[0].w[(row, pe + views * dims + v)];
            }
        }
        for v in 0..views {
            for col in 0..HIDDEN_WIDTH {
                pmerger.layers[HIDDEN_LAYERS].w[(perm[v], col)] =
                    merger.layers[HIDDEN_LAYERS].w[(v, col)];
            }
            pmerger.layers[HIDDEN_LAYERS].b[perm[v]] = merger.layers[HIDDEN_LAYERS].b[v];
        }

        let pout = merger_forward(&pmerger, p, &pvalues, &seen).unwrap();
        for v in 0..views {
            assert!(
                (pout.weights[perm[v]] - out.weights[v]).abs() < 1e-12,
                "view {v}"
            );
        }
        for k in 0..dims {
            assert!((pout.merged[k] - out.merged[k]).abs() < 1e-12);
        }
    }
}
