//! Forward information dissemination: a Monte-Carlo independent-cascade
//! simulator for ground truth, a differentiable surrogate of the
//! dissemination map, the noisy observation model, and the posterior
//! guidance gradient used by the fine-stage sampler.
//!
//! Polarity note: core label vectors follow the 0 = source / 0 = affected
//! convention, but the surrogate outputs **activation probabilities**
//! (1 = affected). Guidance therefore compares against the observation in
//! activation polarity, `1 - y`; the pipeline does that conversion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::graph::{Cascade, Graph, NodeVector, ObservationVector};
use crate::matrix::Matrix;
use crate::scalar::{lit, Scalar};
use crate::score_net::{ScoreNetParams, StepEncoding};
use crate::seeds;

/// Hard floor on any noise scale used by guidance; the gradient divides by
/// the squared scale.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Independent-cascade parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ICParams<T> {
    /// Activation probability, shared or per edge (indexed like
    /// `Graph::edges`). Probability 0 is allowed and disseminates nothing.
    pub edge_prob: EdgeProb<T>,
    /// Optional cap on propagation rounds; `None` runs to exhaustion.
    pub max_rounds: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EdgeProb<T> {
    Uniform(T),
    PerEdge(Vec<T>),
}

impl<T: Scalar> ICParams<T> {
    pub fn uniform(p: T) -> Result<Self> {
        if p < T::zero() || p > T::one() {
            return Err(Error::InvalidParam(format!("edge probability {p} outside [0,1]")));
        }
        Ok(Self { edge_prob: EdgeProb::Uniform(p), max_rounds: None })
    }

    pub fn with_max_rounds(mut self, rounds: usize) -> Self {
        self.max_rounds = Some(rounds);
        self
    }

    fn check(&self, graph: &Graph) -> Result<()> {
        match &self.edge_prob {
            EdgeProb::Uniform(p) => {
                if *p < T::zero() || *p > T::one() {
                    return Err(Error::InvalidParam("edge probability outside [0,1]".into()));
                }
            }
            EdgeProb::PerEdge(v) => {
                if v.len() != graph.edge_count() {
                    return Err(Error::DimMismatch(format!(
                        "per-edge table length {} vs {} edges",
                        v.len(),
                        graph.edge_count()
                    )));
                }
                if v.iter().any(|p| *p < T::zero() || *p > T::one()) {
                    return Err(Error::InvalidParam("edge probability outside [0,1]".into()));
                }
            }
        }
        Ok(())
    }

    fn prob(&self, edge_id: u32) -> T {
        match &self.edge_prob {
            EdgeProb::Uniform(p) => *p,
            EdgeProb::PerEdge(v) => v[edge_id as usize],
        }
    }
}

/// Uniform draw for the directed activation attempt `u -> v`, derived only
/// from `(seed, u, v)` so the same attempt sees the same draw regardless of
/// activation order or edge probability (coupled draws).
fn attempt_draw(seed: u64, u: u32, v: u32) -> f64 {
    let mut state = seed ^ ((u as u64) << 32 | v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let h = seeds::splitmix64(&mut state);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard independent-cascade simulation. Each newly activated node makes
/// one activation attempt per inactive neighbor; activations at round `r`
/// get time index `r` and the cascade lists them in `(round, node id)`
/// order. Deterministic given the seed.
pub fn simulate_ic<T: Scalar>(
    graph: &Graph,
    sources: &[u32],
    params: &ICParams<T>,
    seed: u64,
) -> Result<(ObservationVector<T>, Cascade)> {
    params.check(graph)?;
    if sources.is_empty() {
        return Err(Error::InvalidParam("independent cascade needs at least one source".into()));
    }
    let n = graph.node_count();
    let mut active = vec![false; n];
    let mut entries: Vec<(u32, u32)> = Vec::new();
    let mut frontier: Vec<u32> = sources.to_vec();
    frontier.sort_unstable();
    frontier.dedup();
    for &s in &frontier {
        if s as usize >= n {
            return Err(Error::InvalidParam(format!("source {s} outside graph")));
        }
        active[s as usize] = true;
        entries.push((s, 0));
    }

    let mut round = 0u32;
    while !frontier.is_empty() {
        if let Some(cap) = params.max_rounds {
            if round as usize >= cap {
                break;
            }
        }
        round += 1;
        let mut next: Vec<u32> = Vec::new();
        for &u in &frontier {
            for &(v, e) in graph.adjacency(u) {
                if active[v as usize] {
                    continue;
                }
                let p = params.prob(e).to_f64().unwrap();
                if attempt_draw(seed, u, v) < p {
                    active[v as usize] = true;
                    next.push(v);
                }
            }
        }
        next.sort_unstable();
        for &v in &next {
            entries.push((v, round));
        }
        frontier = next;
    }

    let observation: Vec<T> = active
        .iter()
        .map(|&a| if a { T::zero() } else { T::one() })
        .collect();
    let cascade = Cascade::new(entries)?;
    Ok((observation, cascade))
}

/// Differentiable dissemination surrogate: initial activation probability
/// `p0 = clamp(1 - sourceness, 0, 1)` followed by `depth` rounds of
/// `p' = 1 - (1 - p0) * prod_(u,e) (1 - w_e(r) * p_u)` with effective edge
/// weights `w_e(r) = sigmoid(slope * raw_e + bias_r)` in `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisseminationSurrogate<T> {
    pub depth: usize,
    pub raw_weights: Vec<T>,
    pub round_biases: Vec<T>,
    pub slope: T,
}

impl<T: Scalar> DisseminationSurrogate<T> {
    /// Fresh surrogate with neutral raw weights (effective weight 0.5).
    pub fn new(edge_count: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidParam("surrogate depth must be at least 1".into()));
        }
        Ok(Self {
            depth,
            raw_weights: vec![T::zero(); edge_count],
            round_biases: vec![T::zero(); depth],
            slope: T::one(),
        })
    }

    /// Surrogate with prescribed effective weights (slope 1, zero biases).
    pub fn from_effective_weights(weights: &[T], depth: usize) -> Result<Self> {
        let raw: Vec<T> = weights
            .iter()
            .map(|&w| {
                if w <= T::zero() || w >= T::one() {
                    Err(Error::InvalidParam("effective weight outside (0,1)".into()))
                } else {
                    Ok((w / (T::one() - w)).ln())
                }
            })
            .collect::<Result<_>>()?;
        let mut s = Self::new(raw.len(), depth)?;
        s.raw_weights = raw;
        Ok(s)
    }

    fn check(&self, graph: &Graph) -> Result<()> {
        if self.raw_weights.len() != graph.edge_count() {
            return Err(Error::DimMismatch(format!(
                "surrogate has {} edge weights, graph has {} edges",
                self.raw_weights.len(),
                graph.edge_count()
            )));
        }
        if self.round_biases.len() != self.depth {
            return Err(Error::DimMismatch("one bias per round required".into()));
        }
        Ok(())
    }

    /// Record the forward map onto `tape`. With `trainable`, the raw edge
    /// weights and round biases become differentiable inputs (returned in
    /// `[raw, bias_0, .., bias_{m-1}]` order).
    pub fn build_forward(
        &self,
        tape: &mut Tape<T>,
        sourceness: Var,
        graph: &Graph,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        self.check(graph)?;
        if tape.value(sourceness).rows() != graph.node_count()
            || tape.value(sourceness).cols() != 1
        {
            return Err(Error::DimMismatch("sourceness must be a node column".into()));
        }
        let mut params = Vec::new();
        let raw = if trainable {
            let v = tape.input(Matrix::column(&self.raw_weights));
            params.push(v);
            v
        } else {
            tape.constant(Matrix::column(&self.raw_weights))
        };
        let mut biases = Vec::with_capacity(self.depth);
        for &b in &self.round_biases {
            let bv = if trainable {
                let v = tape.input(Matrix::from_vec(1, 1, vec![b]));
                params.push(v);
                v
            } else {
                tape.constant(Matrix::from_vec(1, 1, vec![b]))
            };
            biases.push(bv);
        }

        let neg = tape.scale(sourceness, -T::one());
        let shifted = tape.add_scalar(neg, T::one());
        let p0 = tape.clamp_unit(shifted);
        let adj = graph.adjacency_lists();
        let scaled_raw = tape.scale(raw, self.slope);
        let mut p = p0;
        for bias in biases {
            let logits = tape.add_row(scaled_raw, bias);
            let eff = tape.sigmoid(logits);
            p = tape.dissemination_round(p, p0, eff, adj.clone());
        }
        Ok((p, params))
    }

    /// Forward pass: sourceness (0 = source) to activation probabilities.
    pub fn forward(&self, sourceness: &[T], graph: &Graph) -> Result<Vec<T>> {
        if sourceness.len() != graph.node_count() {
            return Err(Error::DimMismatch("sourceness length vs graph size".into()));
        }
        let mut tape = Tape::new();
        let s = tape.constant(Matrix::column(sourceness));
        let (out, _) = self.build_forward(&mut tape, s, graph, false)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Spec-level alias for the surrogate forward map.
pub fn surrogate_forward<T: Scalar>(
    model: &DisseminationSurrogate<T>,
    sourceness: &[T],
    graph: &Graph,
) -> Result<ObservationVector<T>> {
    model.forward(sourceness, graph)
}

/// Step-dependent noise scale: a small MLP over the step encoding with a
/// softplus head, floored at `sigma_min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseVarianceModel<T> {
    pub enc: StepEncoding,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
    pub sigma_min: T,
}

impl<T: Scalar> NoiseVarianceModel<T> {
    pub fn init<R: Rng + ?Sized>(enc_dim: usize, hidden: usize, sigma_min: T, rng: &mut R) -> Result<Self> {
        if sigma_min <= T::zero() {
            return Err(Error::InvalidParam("sigma floor must be positive".into()));
        }
        let enc = StepEncoding::new(enc_dim, 1e5)?;
        Ok(Self {
            enc,
            w1: Matrix::glorot(enc_dim, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::glorot(hidden, 1, rng),
            b2: Matrix::zeros(1, 1),
            sigma_min,
        })
    }

    fn mats_mut(&mut self) -> [&mut Matrix<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Record `sigma(t)` for a batch of steps; rows of the result line up
    /// with `ts`.
    fn build_sigma(&self, tape: &mut Tape<T>, ts: &[usize], trainable: bool) -> (Var, Vec<Var>) {
        let rows: Vec<T> = ts.iter().flat_map(|&t| self.enc.encode::<T>(t)).collect();
        let enc_mat = Matrix::from_vec(ts.len(), self.enc.dim(), rows);
        let e = tape.constant(enc_mat);
        let mut params = Vec::new();
        let mut bind = |tape: &mut Tape<T>, m: &Matrix<T>| -> Var {
            if trainable {
                let v = tape.input(m.clone());
                params.push(v);
                v
            } else {
                tape.constant(m.clone())
            }
        };
        let w1 = bind(tape, &self.w1);
        let b1 = bind(tape, &self.b1);
        let w2 = bind(tape, &self.w2);
        let b2 = bind(tape, &self.b2);
        let h = tape.matmul(e, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2);
        let o = tape.add_row(o, b2);
        let sp = tape.softplus(o);
        let sig = tape.clamp_min(sp, self.sigma_min);
        (sig, params)
    }

    /// Evaluate `sigma(t)`.
    pub fn sigma(&self, t: usize) -> T {
        let mut tape = Tape::new();
        let (sig, _) = self.build_sigma(&mut tape, &[t], false);
        tape.value(sig).get(0, 0)
    }
}

/// Noisy observation: `y_hat + sigma(t) * eps` with standard normal `eps`.
/// Deterministic given the seed.
pub fn noisy_observe<T: Scalar>(
    y_hat: &[T],
    t: usize,
    noise: &NoiseVarianceModel<T>,
    sched: &NoiseSchedule<T>,
    seed: u64,
) -> Result<ObservationVector<T>> {
    sched.beta(t)?;
    let sigma = noise.sigma(t);
    let mut rng = seeds::rng(seed);
    Ok(y_hat
        .iter()
        .map(|&y| y + sigma * T::standard_normal(&mut rng))
        .collect())
}

/// How the guidance gradient treats the score inside the clean-state
/// estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceMode {
    /// The supplied score value is held fixed; only the explicit affine
    /// estimate is differentiated (default).
    FrozenScore,
    /// Differentiate through the score network as well.
    FullBackprop,
}

/// Where the guidance noise scale comes from.
pub enum SigmaSource<'a, T> {
    Model(&'a NoiseVarianceModel<T>),
    Fixed(T),
}

/// Everything the fine-stage sampler needs to evaluate guidance.
pub struct GuidanceSpec<'a, T: Scalar> {
    pub surrogate: &'a DisseminationSurrogate<T>,
    /// Observation in activation polarity (1 = affected).
    pub y_activation: &'a [T],
    pub sigma: SigmaSource<'a, T>,
    pub mode: GuidanceMode,
}

impl<T: Scalar> GuidanceSpec<'_, T> {
    fn resolve_sigma(&self, t: usize) -> Result<T> {
        let sigma = match &self.sigma {
            SigmaSource::Model(m) => m.sigma(t),
            SigmaSource::Fixed(c) => *c,
        };
        let floor = lit::<T>(SIGMA_FLOOR);
        if sigma < floor {
            return Err(Error::SigmaBelowFloor {
                sigma: sigma.to_f64().unwrap(),
                floor: SIGMA_FLOOR,
            });
        }
        Ok(sigma)
    }

    /// Guidance term `-(1/sigma^2) grad_i ||y - y_hat(i0(i))||^2` and the
    /// residual norm, dispatching on the differentiation mode.
    pub fn gradient(
        &self,
        net: &ScoreNetParams<T>,
        graph: &Graph,
        i_t: &[T],
        score: &[T],
        sched: &NoiseSchedule<T>,
        t: usize,
    ) -> Result<(Vec<T>, T)> {
        let sigma = self.resolve_sigma(t)?;
        match self.mode {
            GuidanceMode::FrozenScore => guidance_core(
                self.surrogate,
                graph,
                self.y_activation,
                i_t,
                score,
                sched,
                t,
                sigma,
            ),
            GuidanceMode::FullBackprop => guidance_core_full(
                net,
                self.surrogate,
                graph,
                self.y_activation,
                i_t,
                sched,
                t,
                sigma,
            ),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn guidance_core<T: Scalar>(
    surrogate: &DisseminationSurrogate<T>,
    graph: &Graph,
    y_activation: &[T],
    i_t: &[T],
    score: &[T],
    sched: &NoiseSchedule<T>,
    t: usize,
    sigma: T,
) -> Result<(Vec<T>, T)> {
    let abar = sched.alpha_bar(t)?;
    let mut tape = Tape::new();
    let i = tape.input(Matrix::column(i_t));
    let s = tape.constant(Matrix::column(score));
    let scaled_score = tape.scale(s, T::one() - abar);
    let sum = tape.add(i, scaled_score);
    let i0 = tape.scale(sum, T::one() / abar.sqrt());
    finish_guidance(&mut tape, i, i0, surrogate, graph, y_activation, sigma)
}

#[allow(clippy::too_many_arguments)]
fn guidance_core_full<T: Scalar>(
    net: &ScoreNetParams<T>,
    surrogate: &DisseminationSurrogate<T>,
    graph: &Graph,
    y_activation: &[T],
    i_t: &[T],
    sched: &NoiseSchedule<T>,
    t: usize,
    sigma: T,
) -> Result<(Vec<T>, T)> {
    let abar = sched.alpha_bar(t)?;
    let mut tape = Tape::new();
    let i = tape.input(Matrix::column(i_t));
    let (score, _) = net.build_forward(&mut tape, i, t, graph, None, false)?;
    let scaled_score = tape.scale(score, T::one() - abar);
    let sum = tape.add(i, scaled_score);
    let i0 = tape.scale(sum, T::one() / abar.sqrt());
    finish_guidance(&mut tape, i, i0, surrogate, graph, y_activation, sigma)
}

fn finish_guidance<T: Scalar>(
    tape: &mut Tape<T>,
    i: Var,
    i0: Var,
    surrogate: &DisseminationSurrogate<T>,
    graph: &Graph,
    y_activation: &[T],
    sigma: T,
) -> Result<(Vec<T>, T)> {
    if y_activation.len() != graph.node_count() {
        return Err(Error::DimMismatch("observation length vs graph size".into()));
    }
    let (y_hat, _) = surrogate.build_forward(tape, i0, graph, false)?;
    let y = tape.constant(Matrix::column(y_activation));
    let diff = tape.sub(y, y_hat);
    let loss = tape.sum_sq(diff);
    let grads = tape.backward(loss);
    let residual = tape.value(loss).get(0, 0).sqrt();
    let gi = grads
        .wrt(i)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(y_activation.len(), 1));
    let scale = -T::one() / (sigma * sigma);
    Ok((gi.data().iter().map(|&g| g * scale).collect(), residual))
}

/// Posterior guidance gradient with the score held fixed (the default
/// differentiation mode). Returns the gradient only; the sampler-facing
/// [`GuidanceSpec::gradient`] also reports the residual.
pub fn guidance_gradient<T: Scalar>(
    model: &DisseminationSurrogate<T>,
    noise: &NoiseVarianceModel<T>,
    graph: &Graph,
    y_activation: &[T],
    i_t: &[T],
    score_at_i_t: &[T],
    sched: &NoiseSchedule<T>,
    t: usize,
) -> Result<NodeVector<T>> {
    let spec = GuidanceSpec {
        surrogate: model,
        y_activation,
        sigma: SigmaSource::Model(noise),
        mode: GuidanceMode::FrozenScore,
    };
    let sigma = spec.resolve_sigma(t)?;
    let (g, _) = guidance_core(model, graph, y_activation, i_t, score_at_i_t, sched, t, sigma)?;
    Ok(g)
}

/// Fit the surrogate to `(sourceness, activation frequency)` pairs by
/// full-batch gradient descent on the mean binary cross-entropy. Returns
/// the fitted model and the per-epoch loss curve.
pub fn fit_surrogate<T: Scalar>(
    graph: &Graph,
    pairs: &[(Vec<T>, Vec<T>)],
    depth: usize,
    epochs: usize,
    lr: T,
) -> Result<(DisseminationSurrogate<T>, Vec<T>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("surrogate fit needs at least one pair".into()));
    }
    for (s, yf) in pairs {
        if s.len() != graph.node_count() || yf.len() != graph.node_count() {
            return Err(Error::DimMismatch("training pair length vs graph size".into()));
        }
    }
    let mut model = DisseminationSurrogate::new(graph.edge_count(), depth)?;
    let eps = lit::<T>(1e-7);
    let batch = lit::<T>(pairs.len() as f64);
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = T::zero();
        let mut grad_raw = vec![T::zero(); model.raw_weights.len()];
        let mut grad_bias = vec![T::zero(); model.depth];
        for (src, target) in pairs {
            let mut tape = Tape::new();
            let s = tape.constant(Matrix::column(src));
            let (pred, params) = model.build_forward(&mut tape, s, graph, true)?;
            let loss = tape.bce_mean(pred, Matrix::column(target), eps);
            let grads = tape.backward(loss);
            total += tape.value(loss).get(0, 0);
            if let Some(g) = grads.wrt(params[0]) {
                for (acc, &gi) in grad_raw.iter_mut().zip(g.data()) {
                    *acc += gi;
                }
            }
            for (r, gb) in grad_bias.iter_mut().enumerate() {
                if let Some(g) = grads.wrt(params[1 + r]) {
                    *gb += g.get(0, 0);
                }
            }
        }
        curve.push(total / batch);
        for (w, g) in model.raw_weights.iter_mut().zip(&grad_raw) {
            *w = *w - lr * *g / batch;
        }
        for (b, g) in model.round_biases.iter_mut().zip(&grad_bias) {
            *b = *b - lr * *g / batch;
        }
    }
    Ok((model, curve))
}

/// Fit the noise-scale model by minimizing the Gaussian negative
/// log-likelihood of the residuals `y - surrogate(i0)`, with steps sampled
/// uniformly over the fine-stage range each epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit_noise_model<T: Scalar>(
    pairs: &[(Vec<T>, Vec<T>)],
    surrogate: &DisseminationSurrogate<T>,
    graph: &Graph,
    t_range: usize,
    epochs: usize,
    lr: T,
    sigma_min: T,
    seed: u64,
) -> Result<NoiseVarianceModel<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("noise fit needs at least one pair".into()));
    }
    if t_range == 0 {
        return Err(Error::InvalidParam("noise fit needs a nonempty step range".into()));
    }
    let mut rng = seeds::rng(seed);
    let mut model = NoiseVarianceModel::init(16, 16, sigma_min, &mut rng)?;

    // residuals do not depend on the model, precompute once
    let mut resid_sq = Vec::with_capacity(pairs.len());
    let dims = vec![lit::<T>(graph.node_count() as f64); pairs.len()];
    for (i0, y) in pairs {
        let pred = surrogate.forward(i0, graph)?;
        let sq: T = pred.iter().zip(y).map(|(&p, &t)| (t - p) * (t - p)).sum();
        resid_sq.push(sq);
    }

    for _ in 0..epochs {
        let ts: Vec<usize> = (0..pairs.len()).map(|_| rng.gen_range(1..=t_range)).collect();
        let mut tape = Tape::new();
        let (sig, params) = model.build_sigma(&mut tape, &ts, true);
        let loss = tape.gauss_nll(sig, resid_sq.clone(), dims.clone());
        let grads = tape.backward(loss);
        let updates: Vec<Option<Matrix<T>>> = params
            .iter()
            .map(|&p| grads.wrt(p).cloned())
            .collect();
        for (m, g) in model.mats_mut().into_iter().zip(updates) {
            if let Some(g) = g {
                let scaled = g.scale(lr / lit::<T>(pairs.len() as f64));
                *m = m.sub(&scaled);
            }
        }
    }
    Ok(model)
}
