//! Conditional score-function approximation network.
//!
//! Architecture: a learned lift of the scalar node state to the layer
//! width, optional addition of projected positional embeddings, `L`
//! residual multi-head graph-attention layers, then a per-node MLP head
//! over the concatenation of the positional row, every layer's features,
//! and a sinusoidal encoding of the diffusion step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{perturb_with_eps, LossWeighting, NoiseSchedule, ScoreFn};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::scalar::{lit, Scalar};

/// Sinusoidal diffusion-step encoding with paired cos/sin components,
/// `[cos(t * r^(2d/D)), sin(t * r^(2d/D))]` for `d = 1..D/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEncoding {
    dim: usize,
    base: f64,
}

impl StepEncoding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidParam(format!("step encoding dimension {dim} must be even")));
        }
        if base <= 0.0 {
            return Err(Error::InvalidParam("step encoding base must be positive".into()));
        }
        Ok(Self { dim, base })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode<T: Scalar>(&self, t: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dim);
        for d in 1..=self.dim / 2 {
            let freq = self.base.powf(2.0 * d as f64 / self.dim as f64);
            let angle = t as f64 * freq;
            out.push(lit::<T>(angle.cos()));
            out.push(lit::<T>(angle.sin()));
        }
        out
    }
}

/// Hyperparameters of the score network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    /// Number of residual attention layers.
    pub layers: usize,
    /// Attention heads per layer; must divide `width`.
    pub heads: usize,
    /// Feature width of every attention layer.
    pub width: usize,
    /// Step-encoding dimension (even).
    pub step_dim: usize,
    /// Step-encoding base constant.
    pub step_base: f64,
    /// Positional embedding width consumed by the net.
    pub pos_dim: usize,
    /// Whether positional conditioning is used.
    pub use_positional: bool,
    /// Hidden widths of the MLP head (affine layer count = len + 1).
    pub hidden: Vec<usize>,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            width: 64,
            step_dim: 64,
            step_base: 1e5,
            pos_dim: 32,
            use_positional: true,
            hidden: vec![64, 64, 64],
        }
    }
}

impl ScoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidParam(format!(
                "width {} must be a nonzero multiple of heads {}",
                self.width, self.heads
            )));
        }
        StepEncoding::new(self.step_dim, self.step_base)?;
        if self.use_positional && self.pos_dim == 0 {
            return Err(Error::InvalidParam("positional width must be nonzero".into()));
        }
        Ok(())
    }

    fn concat_width(&self) -> usize {
        let pos = if self.use_positional { self.pos_dim } else { 0 };
        pos + (self.layers + 1) * self.width + self.step_dim
    }
}

/// One residual attention layer: query/key/value projections (heads as
/// column blocks), output projection, and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
}

impl<T: Scalar> AttentionLayer<T> {
    fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            wq: Matrix::glorot(width, width, rng),
            wk: Matrix::glorot(width, width, rng),
            wv: Matrix::glorot(width, width, rng),
            wo: Matrix::glorot(width, width, rng),
            bo: Matrix::zeros(1, width),
        }
    }

    fn zeros(width: usize) -> Self {
        Self {
            wq: Matrix::zeros(width, width),
            wk: Matrix::zeros(width, width),
            wv: Matrix::zeros(width, width),
            wo: Matrix::zeros(width, width),
            bo: Matrix::zeros(1, width),
        }
    }

    /// Apply `GMT(H, G) + H` outside a training tape.
    pub fn apply(&self, h: &Matrix<T>, graph: &Graph, heads: usize) -> Result<Matrix<T>> {
        if h.cols() != self.wq.rows() {
            return Err(Error::DimMismatch(format!(
                "feature width {} vs layer width {}",
                h.cols(),
                self.wq.rows()
            )));
        }
        if h.rows() != graph.node_count() {
            return Err(Error::DimMismatch("feature rows vs graph size".into()));
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let out = self.build(&mut tape, hv, graph, heads, &mut None);
        Ok(tape.value(out).clone())
    }

    /// Record the layer onto `tape`. When `collect` is provided the
    /// parameters are pushed as differentiable inputs and appended to it.
    fn build(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        graph: &Graph,
        heads: usize,
        collect: &mut Option<&mut Vec<Var>>,
    ) -> Var {
        let mut bind = |tape: &mut Tape<T>, m: &Matrix<T>| -> Var {
            match collect {
                Some(vars) => {
                    let v = tape.input(m.clone());
                    vars.push(v);
                    v
                }
                None => tape.constant(m.clone()),
            }
        };
        let wq = bind(tape, &self.wq);
        let wk = bind(tape, &self.wk);
        let wv = bind(tape, &self.wv);
        let wo = bind(tape, &self.wo);
        let bo = bind(tape, &self.bo);
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let att = tape.attention(q, k, v, heads, graph.neighbor_lists());
        let proj = tape.matmul(att, wo);
        let proj = tape.add_row(proj, bo);
        tape.add(proj, h)
    }
}

/// Full parameter set of a score network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetParams<T> {
    pub config: ScoreNetConfig,
    pub w_in: Matrix<T>,
    pub b_in: Matrix<T>,
    pub w_pos: Option<Matrix<T>>,
    pub layers: Vec<AttentionLayer<T>>,
    pub mlp: Vec<(Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> ScoreNetParams<T> {
    pub fn init<R: Rng + ?Sized>(config: ScoreNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let w_in = Matrix::glorot(1, w, rng);
        let b_in = Matrix::zeros(1, w);
        let w_pos = config
            .use_positional
            .then(|| Matrix::glorot(config.pos_dim, w, rng));
        let layers = (0..config.layers).map(|_| AttentionLayer::init(w, rng)).collect();
        let mut dims = vec![config.concat_width()];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let mlp = dims
            .windows(2)
            .map(|d| (Matrix::glorot(d[0], d[1], rng), Matrix::zeros(1, d[1])))
            .collect();
        Ok(Self { config, w_in, b_in, w_pos, layers, mlp })
    }

    /// All-zero parameters (score is identically zero); mostly for tests.
    pub fn zeros(config: ScoreNetConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let w_in = Matrix::zeros(1, w);
        let b_in = Matrix::zeros(1, w);
        let w_pos = config.use_positional.then(|| Matrix::zeros(config.pos_dim, w));
        let layers = (0..config.layers).map(|_| AttentionLayer::zeros(w)).collect();
        let mut dims = vec![config.concat_width()];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let mlp = dims
            .windows(2)
            .map(|d| (Matrix::zeros(d[0], d[1]), Matrix::zeros(1, d[1])))
            .collect();
        Ok(Self { config, w_in, b_in, w_pos, layers, mlp })
    }

    /// Parameter matrices in canonical order.
    pub fn mats(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.w_in, &self.b_in];
        if let Some(p) = &self.w_pos {
            out.push(p);
        }
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.bo]);
        }
        for (w, b) in &self.mlp {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn mats_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = vec![&mut self.w_in, &mut self.b_in];
        if let Some(p) = &mut self.w_pos {
            out.push(p);
        }
        for l in &mut self.layers {
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.bo);
        }
        for (w, b) in &mut self.mlp {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.mats().iter().map(|m| m.data().len()).sum()
    }

    pub fn get_param(&self, flat: usize) -> T {
        let mut i = flat;
        for m in self.mats() {
            if i < m.data().len() {
                return m.data()[i];
            }
            i -= m.data().len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_param(&mut self, flat: usize, v: T) {
        let mut i = flat;
        for m in self.mats_mut() {
            if i < m.data().len() {
                m.data_mut()[i] = v;
                return;
            }
            i -= m.data().len();
        }
        panic!("flat parameter index out of range");
    }

    fn check_inputs(&self, n: usize, x_len: usize, positional: Option<&Matrix<T>>) -> Result<()> {
        if x_len != n {
            return Err(Error::DimMismatch(format!("state length {x_len} vs graph size {n}")));
        }
        match (self.config.use_positional, positional) {
            (true, None) => {
                return Err(Error::DimMismatch(
                    "network requires positional embeddings but none were given".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::DimMismatch(
                    "network does not take positional embeddings".into(),
                ))
            }
            (true, Some(p)) => {
                if p.rows() != n || p.cols() != self.config.pos_dim {
                    return Err(Error::DimMismatch(format!(
                        "positional shape {}x{} vs expected {}x{}",
                        p.rows(),
                        p.cols(),
                        n,
                        self.config.pos_dim
                    )));
                }
            }
            (false, None) => {}
        }
        Ok(())
    }

    /// Record the forward pass onto `tape` and return the `n x 1` score
    /// node. With `trainable` set, parameters become differentiable inputs
    /// and are returned in canonical order.
    pub fn build_forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        t: usize,
        graph: &Graph,
        positional: Option<Var>,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let n = graph.node_count();
        self.check_inputs(n, tape.value(x).rows(), positional.map(|p| tape.value(p)).as_deref())?;

        let mut params: Vec<Var> = Vec::new();
        let mut collect: Option<&mut Vec<Var>> = if trainable { Some(&mut params) } else { None };
        let bind = |tape: &mut Tape<T>, m: &Matrix<T>, collect: &mut Option<&mut Vec<Var>>| {
            match collect {
                Some(vars) => {
                    let v = tape.input(m.clone());
                    vars.push(v);
                    v
                }
                None => tape.constant(m.clone()),
            }
        };

        let w_in = bind(tape, &self.w_in, &mut collect);
        let b_in = bind(tape, &self.b_in, &mut collect);
        let lift = tape.matmul(x, w_in);
        let lift = tape.add_row(lift, b_in);
        let h0 = match (self.w_pos.as_ref(), positional) {
            (Some(wp), Some(pos)) => {
                let wp = bind(tape, wp, &mut collect);
                let proj = tape.matmul(pos, wp);
                tape.add(lift, proj)
            }
            _ => lift,
        };

        let mut hs = vec![h0];
        let mut h = h0;
        for layer in &self.layers {
            h = layer.build(tape, h, graph, self.config.heads, &mut collect);
            hs.push(h);
        }

        let enc = StepEncoding::new(self.config.step_dim, self.config.step_base)?;
        let enc_row: Vec<T> = enc.encode(t);
        let enc_tile = tape.constant(Matrix::tile_row(&enc_row, n));

        let mut parts: Vec<Var> = Vec::new();
        if let Some(pos) = positional {
            parts.push(pos);
        }
        parts.extend_from_slice(&hs);
        parts.push(enc_tile);
        let mut feat = tape.concat_cols(&parts);

        let last = self.mlp.len() - 1;
        for (i, (w, b)) in self.mlp.iter().enumerate() {
            let wv = bind(tape, w, &mut collect);
            let bv = bind(tape, b, &mut collect);
            feat = tape.matmul(feat, wv);
            feat = tape.add_row(feat, bv);
            if i != last {
                feat = tape.tanh(feat);
            }
        }
        Ok((feat, params))
    }

    /// Evaluate the score; pure and deterministic.
    pub fn forward(
        &self,
        x_t: &[T],
        t: usize,
        graph: &Graph,
        positional: Option<&Matrix<T>>,
    ) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::column(x_t));
        let pos = positional.map(|p| tape.constant(p.clone()));
        let (out, _) = self.build_forward(&mut tape, x, t, graph, pos, false)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// DSM loss of one item with an explicit `(t, eps)` draw; deterministic.
    pub fn dsm_item_loss(
        &self,
        x0: &[T],
        graph: &Graph,
        positional: Option<&Matrix<T>>,
        sched: &NoiseSchedule<T>,
        weighting: LossWeighting,
        t: usize,
        eps: &[T],
    ) -> Result<T> {
        let (x_t, target) = perturb_with_eps(x0, t, sched, eps)?;
        let s = self.forward(&x_t, t, graph, positional)?;
        let sq: T = s.iter().zip(&target).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(weighting.weight(sched, t)? * sq)
    }

    /// DSM loss of one item plus its parameter gradients (canonical order).
    pub fn dsm_item_loss_grad(
        &self,
        x0: &[T],
        graph: &Graph,
        positional: Option<&Matrix<T>>,
        sched: &NoiseSchedule<T>,
        weighting: LossWeighting,
        t: usize,
        eps: &[T],
    ) -> Result<(T, Vec<Matrix<T>>)> {
        let (x_t, target) = perturb_with_eps(x0, t, sched, eps)?;
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::column(&x_t));
        let pos = positional.map(|p| tape.constant(p.clone()));
        let (score, params) = self.build_forward(&mut tape, x, t, graph, pos, true)?;
        let tgt = tape.constant(Matrix::column(&target));
        let diff = tape.sub(score, tgt);
        let sq = tape.sum_sq(diff);
        let loss = tape.scale(sq, weighting.weight(sched, t)?);
        let grads = tape.backward(loss);
        let out = params
            .iter()
            .map(|&p| {
                grads
                    .wrt(p)
                    .cloned()
                    .unwrap_or_else(|| {
                        let v = tape.value(p);
                        Matrix::zeros(v.rows(), v.cols())
                    })
            })
            .collect();
        Ok((tape.value(loss).get(0, 0), out))
    }
}

/// [`ScoreFn`] adapter binding a network to its conditioning.
pub struct NetScore<'a, T: Scalar> {
    pub params: &'a ScoreNetParams<T>,
    pub graph: &'a Graph,
    pub positional: Option<&'a Matrix<T>>,
}

impl<T: Scalar> ScoreFn<T> for NetScore<'_, T> {
    fn score(&self, x_t: &[T], t: usize) -> Result<Vec<T>> {
        self.params.forward(x_t, t, self.graph, self.positional)
    }
}

/// Report of a finite-difference check of the DSM parameter gradient.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(flat parameter index, analytic, numeric)` per sampled parameter.
    pub samples: Vec<(usize, f64, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare tape gradients of the DSM loss against central finite
/// differences on a sample of parameters (small instances only).
pub fn score_gradient_check<T: Scalar>(
    params: &ScoreNetParams<T>,
    x0: &[T],
    graph: &Graph,
    positional: Option<&Matrix<T>>,
    sched: &NoiseSchedule<T>,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut rng = crate::seeds::rng(seed);
    let t = rng.gen_range(1..=sched.len());
    let eps: Vec<T> = (0..x0.len()).map(|_| T::standard_normal(&mut rng)).collect();
    let weighting = LossWeighting::OneMinusAlphaBar;

    let (_, grads) = params.dsm_item_loss_grad(x0, graph, positional, sched, weighting, t, &eps)?;
    let flat_grads: Vec<T> = grads.iter().flat_map(|m| m.data().iter().copied()).collect();

    let total = params.param_count();
    let mut samples = Vec::with_capacity(n_samples);
    let mut max_rel: f64 = 0.0;
    let h = lit::<T>(1e-4);
    let mut work = params.clone();
    for _ in 0..n_samples {
        let idx = rng.gen_range(0..total);
        let orig = work.get_param(idx);
        work.set_param(idx, orig + h);
        let plus = work.dsm_item_loss(x0, graph, positional, sched, weighting, t, &eps)?;
        work.set_param(idx, orig - h);
        let minus = work.dsm_item_loss(x0, graph, positional, sched, weighting, t, &eps)?;
        work.set_param(idx, orig);
        let numeric = ((plus - minus) / (lit::<T>(2.0) * h)).to_f64().unwrap();
        let analytic = flat_grads[idx].to_f64().unwrap();
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-6);
        max_rel = max_rel.max(rel);
        samples.push((idx, analytic, numeric));
    }
    Ok(GradCheckReport { samples, max_rel_err: max_rel })
}
