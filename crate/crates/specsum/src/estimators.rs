//! Matrix-free estimators for spectral sums of symmetric PSD operators:
//! power method, Hutchinson trace, and the Chebyshev/Taylor log-determinant
//! estimators.
//!
//! Every estimator is built as a computation graph over operator applications,
//! so when the operator itself is differentiable (its `apply` records graph
//! nodes down to parameter leaves), the estimate is a scalar graph that can be
//! differentiated. For plain dense matrices the graph is just a cheap way to
//! run the same code path.
//!
//! Randomness convention: an estimator called with a generator on stream `s`
//! reads stream `s` for the power-method start vector and stream `s + 1 + j`
//! for probe `j`, always from the head of the stream. Estimates are therefore
//! pure functions of `(operator, config, seed, stream)`, and callers that
//! hand out streams to concurrent work should space them by at least `p + 2`.

use std::cell::Cell;
use std::f64::consts::PI;

use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::linalg::{LinalgError, Matrix, Vector};
use crate::rng::{rademacher, SeedRng};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
    #[error("invalid rescale interval: a={a}, b={b}")]
    BadInterval { a: f64, b: f64 },
    #[error("function not finite at abscissa {0}")]
    NonFiniteFunction(f64),
    #[error("degenerate operator: power-method estimate {0}")]
    DegenerateOperator(f64),
    #[error("operator dimension {op} does not match vector length {vec}")]
    Dimension { op: usize, vec: usize },
}

/// The estimator parameter tuple: polynomial order `m`, probe count `p`,
/// power iterations `t`, bound multiplier `g`, and the stipulated spectral
/// lower bound `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub m: usize,
    pub p: usize,
    pub t: usize,
    pub g: f64,
    pub epsilon: f64,
    /// Treat the spectral bounds (μ, ν) as constants instead of
    /// backpropagating through the power-method estimate. Off by default.
    pub detach_bounds: bool,
}

impl EstimatorConfig {
    pub fn new(m: usize, p: usize, t: usize, g: f64, epsilon: f64) -> Result<Self, EstimatorError> {
        let cfg = Self {
            m,
            p,
            t,
            g,
            epsilon,
            detach_bounds: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.m < 1 || self.p < 1 || self.t < 1 {
            return Err(EstimatorError::InvalidConfig(format!(
                "m, p, t must all be >= 1 (got {}, {}, {})",
                self.m, self.p, self.t
            )));
        }
        if !(self.g >= 1.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "bound multiplier g must be >= 1 (got {})",
                self.g
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "spectral lower bound epsilon must be > 0 (got {})",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Symmetric PSD operator accessed only through matrix-vector products.
///
/// `apply` records the product as graph nodes; when those nodes reach
/// parameter leaves, the estimators built on top are differentiable.
/// Symmetry is the implementor's contract; [`spot_check_symmetry`] probes it.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    fn apply(&self, g: &mut Graph, v: NodeId) -> Result<NodeId, EstimatorError>;

    /// Optional batched form: apply the operator to each column of an
    /// `n×p` block at once. Column `j` of the result must be bit-identical
    /// to `apply` on column `j`. Returning `None` makes the estimators fall
    /// back to per-probe application.
    fn apply_block(
        &self,
        _g: &mut Graph,
        _block: NodeId,
    ) -> Result<Option<NodeId>, EstimatorError> {
        Ok(None)
    }
}

/// Dense symmetric matrix as an operator. The matrix is installed in each
/// graph once (as a constant node) and reused across applications.
pub struct DenseOperator {
    matrix: Matrix,
    node: Cell<Option<(u64, NodeId)>>,
}

impl DenseOperator {
    pub fn new(matrix: Matrix) -> Result<Self, EstimatorError> {
        if matrix.rows() != matrix.cols() {
            return Err(EstimatorError::Linalg(LinalgError::NotSquare {
                rows: matrix.rows(),
                cols: matrix.cols(),
            }));
        }
        let asym = matrix.asymmetry();
        if asym > 1e-8 {
            return Err(EstimatorError::Linalg(LinalgError::NotSymmetric(asym)));
        }
        Ok(Self {
            matrix,
            node: Cell::new(None),
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    fn node(&self, g: &mut Graph) -> NodeId {
        match self.node.get() {
            Some((gid, id)) if gid == g.graph_id() => id,
            _ => {
                let id = g.constant_mat(self.matrix.clone());
                self.node.set(Some((g.graph_id(), id)));
                id
            }
        }
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }

    fn apply(&self, g: &mut Graph, v: NodeId) -> Result<NodeId, EstimatorError> {
        let a = self.node(g);
        Ok(g.matmul(a, v)?)
    }

    fn apply_block(&self, g: &mut Graph, block: NodeId) -> Result<Option<NodeId>, EstimatorError> {
        let a = self.node(g);
        Ok(Some(g.matmul(a, block)?))
    }
}

/// Operator defined by a closure; probe-serial only. Handy for tests and for
/// wrapping ad-hoc differentiable maps.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, EstimatorError>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, EstimatorError>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, g: &mut Graph, v: NodeId) -> Result<NodeId, EstimatorError> {
        (self.f)(g, v)
    }
}

/// Probabilistic symmetry check: verifies `<u, Av> = <Au, v>` on `k` random
/// pairs to 1e-8 relative. Meant for operator construction sites in debug
/// paths; it is not enforced per estimator call, since that would double the
/// operator applications.
pub fn spot_check_symmetry(
    op: &dyn LinearOperator,
    rng: &mut SeedRng,
    k: usize,
) -> Result<(), EstimatorError> {
    let n = op.dim();
    for _ in 0..k {
        let mut g = Graph::new();
        let u = rng.normal_vector(n);
        let v = rng.normal_vector(n);
        let un = g.constant_vec(u.clone());
        let vn = g.constant_vec(v.clone());
        let av = op.apply(&mut g, vn)?;
        let au = op.apply(&mut g, un)?;
        let lhs = u.dot(g.vector_value(av));
        let rhs = g.vector_value(au).dot(&v);
        let scale = lhs.abs().max(rhs.abs()).max(1e-300);
        if (lhs - rhs).abs() / scale > 1e-8 {
            return Err(EstimatorError::InvalidConfig(format!(
                "operator symmetry violated: <u,Av>={lhs} vs <Au,v>={rhs}"
            )));
        }
    }
    Ok(())
}

/// Affine map `x ↦ scale·x + shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub scale: f64,
    pub shift: f64,
}

impl AffineMap {
    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.shift
    }
}

/// The rescaling pair (φ, φ⁻¹) with φ : [-1, 1] → [a, b] given by
/// φ(x) = ((b−a)/2)·x + (b+a)/2.
pub fn rescale_maps(a: f64, b: f64) -> Result<(AffineMap, AffineMap), EstimatorError> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(EstimatorError::BadInterval { a, b });
    }
    let phi = AffineMap {
        scale: (b - a) / 2.0,
        shift: (b + a) / 2.0,
    };
    let phi_inv = AffineMap {
        scale: 2.0 / (b - a),
        shift: -(b + a) / (b - a),
    };
    Ok((phi, phi_inv))
}

/// Chebyshev interpolation abscissae of the first kind,
/// x_j = cos(π (j + 1/2) / (m + 1)), j = 0..m.
pub fn chebyshev_points(m: usize) -> Vec<f64> {
    (0..=m)
        .map(|j| (PI * (j as f64 + 0.5) / (m as f64 + 1.0)).cos())
        .collect()
}

/// Weight matrix W with c = W·s̄ for s̄_j = S̄(x_j):
/// W[i][j] = (1 or 2)/(m+1) · T_i(x_j), using T_i(cos θ) = cos(iθ).
fn chebyshev_weight_matrix(m: usize) -> Matrix {
    let mp1 = m as f64 + 1.0;
    Matrix::from_fn(m + 1, m + 1, |i, j| {
        let angle = PI * (j as f64 + 0.5) / mp1;
        let factor = if i == 0 { 1.0 / mp1 } else { 2.0 / mp1 };
        factor * (i as f64 * angle).cos()
    })
}

/// Degree-m Chebyshev interpolant data for a scalar function on `(a, b)`.
#[derive(Debug, Clone)]
pub struct ChebyshevCoefficients {
    pub coeffs: Vec<f64>,
    pub interval: (f64, f64),
}

impl ChebyshevCoefficients {
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Evaluates the interpolant at `x` in the original coordinates,
    /// Σ c_i T_i(φ⁻¹(x)), via the three-term recurrence.
    pub fn evaluate(&self, x: f64) -> f64 {
        let (a, b) = self.interval;
        let y = (2.0 * x - (b + a)) / (b - a);
        let mut acc = self.coeffs[0];
        let mut t_prev = 1.0;
        let mut t_cur = y;
        for &c in &self.coeffs[1..] {
            acc += c * t_cur;
            let t_next = 2.0 * y * t_cur - t_prev;
            t_prev = t_cur;
            t_cur = t_next;
        }
        acc
    }
}

/// Coefficients of the degree-m Chebyshev interpolant of `S` on `(a, b)`,
/// computed through S̄ := S ∘ φ at the first-kind points. Exact for
/// polynomials of degree ≤ m.
pub fn chebyshev_coefficients(
    s: impl Fn(f64) -> f64,
    interval: (f64, f64),
    m: usize,
) -> Result<ChebyshevCoefficients, EstimatorError> {
    let (a, b) = interval;
    if m < 1 {
        return Err(EstimatorError::InvalidConfig("order m must be >= 1".into()));
    }
    let (phi, _) = rescale_maps(a, b)?;
    let points = chebyshev_points(m);
    let mut sbar = Vec::with_capacity(m + 1);
    for &x in &points {
        let v = s(phi.apply(x));
        if !v.is_finite() {
            return Err(EstimatorError::NonFiniteFunction(phi.apply(x)));
        }
        sbar.push(v);
    }
    let w = chebyshev_weight_matrix(m);
    let coeffs = crate::linalg::matvec(&w, &Vector::new(sbar).expect("finite values"))?;
    Ok(ChebyshevCoefficients {
        coeffs: coeffs.into_vec(),
        interval,
    })
}

/// Coefficients of the truncated Taylor series of ln(1−x) about 0:
/// c_0 = 0 and c_i = −1/i.
pub fn taylor_coefficients(m: usize) -> Vec<f64> {
    (0..=m)
        .map(|i| if i == 0 { 0.0 } else { -1.0 / i as f64 })
        .collect()
}

/// A scalar estimate together with the graph node computing it.
#[derive(Debug, Clone, Copy)]
pub struct ScalarEstimate {
    pub node: NodeId,
    pub value: f64,
}

/// Power-method estimate of the dominant eigenvalue: `t` normalized
/// iterations from a random unit start, then the Rayleigh quotient
/// `<v, Av> / <v, v>` (one further application). The quotient never exceeds
/// the true λ_max. A zero iterate (operator annihilates the start vector)
/// yields 0.
pub fn power_method(
    g: &mut Graph,
    op: &dyn LinearOperator,
    t: usize,
    rng: &SeedRng,
) -> Result<ScalarEstimate, EstimatorError> {
    if t < 1 {
        return Err(EstimatorError::InvalidConfig("t must be >= 1".into()));
    }
    let n = op.dim();
    let start = rng.stream(rng.stream_id()).unit_vector(n);
    let mut v = g.constant_vec(start);
    for _ in 0..t {
        let w = op.apply(g, v)?;
        let nrm2 = g.inner(w, w)?;
        if g.scalar_value(nrm2) == 0.0 {
            let node = g.scalar(0.0);
            return Ok(ScalarEstimate { node, value: 0.0 });
        }
        let nrm = g.sqrt(nrm2)?;
        let inv = g.recip(nrm)?;
        v = g.scale_n(inv, w)?;
    }
    let av = op.apply(g, v)?;
    let num = g.inner(v, av)?;
    let den = g.inner(v, v)?;
    let inv_den = g.recip(den)?;
    let node = g.mul(num, inv_den)?;
    let value = g.scalar_value(node);
    Ok(ScalarEstimate { node, value })
}

/// Hutchinson estimator (1/p) Σ_j <v_j, A v_j> with Rademacher probes.
pub fn hutchinson_trace(
    g: &mut Graph,
    op: &dyn LinearOperator,
    p: usize,
    rng: &SeedRng,
) -> Result<ScalarEstimate, EstimatorError> {
    if p < 1 {
        return Err(EstimatorError::InvalidConfig("p must be >= 1".into()));
    }
    let n = op.dim();
    let base = rng.stream_id();
    let node = if supports_block(op, n)? {
        let mut cols = Vec::with_capacity(p);
        for j in 0..p {
            let mut prng = rng.stream(base + 1 + j as u64);
            cols.push(rademacher(&mut prng, n));
        }
        let vmat = Matrix::from_fn(n, p, |i, j| cols[j][i]);
        let v = g.constant_mat(vmat);
        let av = op.apply_block(g, v)?.expect("block support checked");
        let dots = g.col_dot(v, av)?;
        let zero = g.scalar(0.0);
        let total = g.sum(dots);
        let total = g.add(zero, total)?;
        g.scale_c(1.0 / p as f64, total)
    } else {
        let mut total = g.scalar(0.0);
        for j in 0..p {
            let mut prng = rng.stream(base + 1 + j as u64);
            let v = g.constant_vec(rademacher(&mut prng, n));
            let av = op.apply(g, v)?;
            let dot = g.inner(v, av)?;
            total = g.add(total, dot)?;
        }
        g.scale_c(1.0 / p as f64, total)
    };
    let value = g.scalar_value(node);
    Ok(ScalarEstimate { node, value })
}

fn supports_block(op: &dyn LinearOperator, n: usize) -> Result<bool, EstimatorError> {
    // Probe support with a throwaway graph so the caller's graph stays clean.
    let mut probe = Graph::new();
    let z = probe.constant_mat(Matrix::zeros(n, 1));
    Ok(op.apply_block(&mut probe, z)?.is_some())
}

/// Coefficient that is either a host-side constant or a graph scalar (the
/// log-determinant estimator's coefficients depend on the spectral bounds,
/// which are themselves differentiable).
#[derive(Debug, Clone, Copy)]
enum Coefficient {
    Const(f64),
    Node(NodeId),
}

fn coeff_scale(g: &mut Graph, c: Coefficient, x: NodeId) -> Result<NodeId, EstimatorError> {
    Ok(match c {
        Coefficient::Const(v) => g.scale_c(v, x),
        Coefficient::Node(s) => g.scale_n(s, x)?,
    })
}

type ApplyFn<'a> = &'a mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId, EstimatorError>;

struct TraceResult {
    gamma: NodeId,
    /// Per-probe quotients <v_j, A'v_j> / n of the operator the recurrence
    /// actually ran on (the mapped operator for the log-det estimators).
    first_apply_quotients: Vec<f64>,
}

/// Chebyshev trace core: (1/p) Σ_j <v_j, Σ_i c_i T_i(A') v_j> via the
/// three-term recurrence w_i = 2 A' w_{i-1} − w_{i-2}. Exactly m operator
/// applications per probe. The batched path computes bit-identically to the
/// serial path, column by column, with the final reduction in ascending
/// probe order.
fn chebyshev_trace_core(
    g: &mut Graph,
    n: usize,
    coeffs: &[Coefficient],
    p: usize,
    rng: &SeedRng,
    apply: ApplyFn,
    apply_block: Option<ApplyFn>,
) -> Result<TraceResult, EstimatorError> {
    let m = coeffs.len() - 1;
    debug_assert!(m >= 1);
    let base = rng.stream_id();

    if let Some(block_apply) = apply_block {
        let mut cols = Vec::with_capacity(p);
        for j in 0..p {
            let mut prng = rng.stream(base + 1 + j as u64);
            cols.push(rademacher(&mut prng, n));
        }
        let vmat = Matrix::from_fn(n, p, |i, j| cols[j][i]);
        let v = g.constant_mat(vmat);
        let mut w_prev = v;
        let mut w_cur = block_apply(g, v)?;
        let quot_dots = g.col_dot(v, w_cur)?;
        let first_apply_quotients = g
            .vector_value(quot_dots)
            .as_slice()
            .iter()
            .map(|d| d / n as f64)
            .collect();
        let c0 = coeff_scale(g, coeffs[0], w_prev)?;
        let c1 = coeff_scale(g, coeffs[1], w_cur)?;
        let mut s = g.add(c0, c1)?;
        for &c in &coeffs[2..] {
            let aw = block_apply(g, w_cur)?;
            let two_aw = g.scale_c(2.0, aw);
            let w_next = g.sub(two_aw, w_prev)?;
            let term = coeff_scale(g, c, w_next)?;
            s = g.add(s, term)?;
            w_prev = w_cur;
            w_cur = w_next;
        }
        let dots = g.col_dot(v, s)?;
        let zero = g.scalar(0.0);
        let total = g.sum(dots);
        let total = g.add(zero, total)?;
        let gamma = g.scale_c(1.0 / p as f64, total);
        return Ok(TraceResult {
            gamma,
            first_apply_quotients,
        });
    }

    let mut total = g.scalar(0.0);
    let mut first_apply_quotients = Vec::with_capacity(p);
    for j in 0..p {
        let mut prng = rng.stream(base + 1 + j as u64);
        let v = g.constant_vec(rademacher(&mut prng, n));
        let mut w_prev = v;
        let mut w_cur = apply(g, v)?;
        let q = g.inner(v, w_cur)?;
        first_apply_quotients.push(g.scalar_value(q) / n as f64);
        let c0 = coeff_scale(g, coeffs[0], w_prev)?;
        let c1 = coeff_scale(g, coeffs[1], w_cur)?;
        let mut s = g.add(c0, c1)?;
        for &c in &coeffs[2..] {
            let aw = apply(g, w_cur)?;
            let two_aw = g.scale_c(2.0, aw);
            let w_next = g.sub(two_aw, w_prev)?;
            let term = coeff_scale(g, c, w_next)?;
            s = g.add(s, term)?;
            w_prev = w_cur;
            w_cur = w_next;
        }
        let r = g.inner(v, s)?;
        total = g.add(total, r)?;
    }
    let gamma = g.scale_c(1.0 / p as f64, total);
    Ok(TraceResult {
        gamma,
        first_apply_quotients,
    })
}

/// Stochastic Chebyshev trace of `Σ_i c_i T_i(A)` for an operator with
/// spectrum inside [-1, 1] (the caller's responsibility, usually via
/// rescaling). Unbiased for `tr Σ_i c_i T_i(A)` under Rademacher probes.
pub fn stochastic_chebyshev_trace(
    g: &mut Graph,
    op: &dyn LinearOperator,
    coeffs: &[f64],
    p: usize,
    rng: &SeedRng,
) -> Result<ScalarEstimate, EstimatorError> {
    if coeffs.len() < 2 {
        return Err(EstimatorError::InvalidConfig(
            "need at least order-1 coefficients".into(),
        ));
    }
    if p < 1 {
        return Err(EstimatorError::InvalidConfig("p must be >= 1".into()));
    }
    let n = op.dim();
    let consts: Vec<Coefficient> = coeffs.iter().map(|&c| Coefficient::Const(c)).collect();
    let use_block = supports_block(op, n)?;
    let mut apply = |g: &mut Graph, v: NodeId| op.apply(g, v);
    let mut block = |g: &mut Graph, b: NodeId| {
        Ok(op.apply_block(g, b)?.expect("block support checked"))
    };
    let result = chebyshev_trace_core(
        g,
        n,
        &consts,
        p,
        rng,
        &mut apply,
        if use_block { Some(&mut block) } else { None },
    )?;
    let value = g.scalar_value(result.gamma);
    Ok(ScalarEstimate {
        node: result.gamma,
        value,
    })
}

/// Log-determinant estimate plus the spectral diagnostics that come with it.
#[derive(Debug, Clone, Copy)]
pub struct LogDetEstimate {
    pub node: NodeId,
    pub value: f64,
    pub lambda_max_node: NodeId,
    pub lambda_max: f64,
    /// Probes whose Rayleigh quotient fell below the stipulated lower bound;
    /// reported, not corrected for.
    pub probes_below_bound: usize,
}

/// Chebyshev log-determinant estimator.
///
/// With λ̂_max from the power method, sets μ = ε, ν = g·λ̂_max,
/// a = μ/(μ+ν), b = ν/(μ+ν) and Ā = A/(μ+ν), interpolates ln∘φ on [a, b],
/// runs the stochastic Chebyshev trace on φ⁻¹(Ā), and returns
/// n·ln(μ+ν) + Γ. The whole computation — including the power iterations —
/// is recorded, so the result is differentiable whenever the operator is;
/// `detach_bounds` freezes (μ, ν) instead.
pub fn stochastic_logdet_chebyshev(
    g: &mut Graph,
    op: &dyn LinearOperator,
    cfg: &EstimatorConfig,
    rng: &SeedRng,
) -> Result<LogDetEstimate, EstimatorError> {
    cfg.validate()?;
    let n = op.dim();
    let power = power_method(g, op, cfg.t, rng)?;
    if power.value <= 0.0 {
        return Err(EstimatorError::DegenerateOperator(power.value));
    }
    let lambda_node = if cfg.detach_bounds {
        g.scalar(power.value)
    } else {
        power.node
    };

    let mu = g.scalar(cfg.epsilon);
    let nu = g.scale_c(cfg.g, lambda_node);
    let denom = g.add(mu, nu)?; // μ + ν
    let inv_denom = g.recip(denom)?;
    let a = g.mul(mu, inv_denom)?;
    let b = g.mul(nu, inv_denom)?;
    let b_minus_a = g.sub(b, a)?;
    let half_width = g.scale_c(0.5, b_minus_a); // (b−a)/2
    let b_plus_a = g.add(b, a)?;
    let mid = g.scale_c(0.5, b_plus_a); // (b+a)/2
    let ln_denom = g.log(denom)?;
    let scale_term = g.scale_c(n as f64, ln_denom); // n ln(μ+ν)

    let width_val = g.scalar_value(half_width);
    let mid_val = g.scalar_value(mid);
    if width_val.abs() <= 1e-12 * mid_val.abs() {
        // μ = ν: the interval degenerates to a point, the interpolant to the
        // constant ln((a+b)/2), and the trace to n·c_0 with zero variance.
        let c0 = g.log(mid)?;
        let gamma = g.scale_c(n as f64, c0);
        let node = g.add(scale_term, gamma)?;
        let value = g.scalar_value(node);
        return Ok(LogDetEstimate {
            node,
            value,
            lambda_max_node: power.node,
            lambda_max: power.value,
            probes_below_bound: 0,
        });
    }

    // Coefficient nodes: c = W · [ln φ(x_j)], with φ carrying the
    // graph-valued interval.
    let points = chebyshev_points(cfg.m);
    let mut log_nodes = Vec::with_capacity(cfg.m + 1);
    for &x in &points {
        let scaled = g.scale_c(x, half_width);
        let phi_x = g.add(scaled, mid)?;
        log_nodes.push(g.log(phi_x)?);
    }
    let lvec = g.pack(&log_nodes)?;
    let wnode = g.constant_mat(chebyshev_weight_matrix(cfg.m));
    let cvec = g.matmul(wnode, lvec)?;
    let mut coeffs = Vec::with_capacity(cfg.m + 1);
    for i in 0..=cfg.m {
        coeffs.push(Coefficient::Node(g.component(cvec, i)?));
    }

    // φ⁻¹(Ā) w = (1/width)·(A w)/(μ+ν) − (mid/width)·w
    let inv_width = g.recip(half_width)?;
    let shift = g.mul(mid, inv_width)?;
    let mut apply = |g: &mut Graph, w: NodeId| -> Result<NodeId, EstimatorError> {
        let aw = op.apply(g, w)?;
        let scaled = g.scale_n(inv_denom, aw)?;
        let scaled = g.scale_n(inv_width, scaled)?;
        let shifted = g.scale_n(shift, w)?;
        Ok(g.sub(scaled, shifted)?)
    };
    let mut block = |g: &mut Graph, w: NodeId| -> Result<NodeId, EstimatorError> {
        let aw = op.apply_block(g, w)?.expect("block support checked");
        let scaled = g.scale_n(inv_denom, aw)?;
        let scaled = g.scale_n(inv_width, scaled)?;
        let shifted = g.scale_n(shift, w)?;
        Ok(g.sub(scaled, shifted)?)
    };
    let use_block = supports_block(op, n)?;
    let trace = chebyshev_trace_core(
        g,
        n,
        &coeffs,
        cfg.p,
        rng,
        &mut apply,
        if use_block { Some(&mut block) } else { None },
    )?;

    // Probe quotients back in A's coordinates: q_A = (q_φ·width + mid)·(μ+ν).
    let denom_val = g.scalar_value(denom);
    let probes_below_bound = trace
        .first_apply_quotients
        .iter()
        .map(|q| (q * width_val + mid_val) * denom_val)
        .filter(|q| *q < cfg.epsilon * (1.0 - 1e-12))
        .count();
    if probes_below_bound > 0 {
        log::warn!(
            "{probes_below_bound} of {} probes have Rayleigh quotient below the stipulated lower bound {}",
            cfg.p,
            cfg.epsilon
        );
    }

    let node = g.add(scale_term, trace.gamma)?;
    let value = g.scalar_value(node);
    Ok(LogDetEstimate {
        node,
        value,
        lambda_max_node: power.node,
        lambda_max: power.value,
        probes_below_bound,
    })
}

/// Taylor log-determinant estimator.
///
/// With ν = g·λ̂_max and B = A/ν, uses ln det B = tr ln(I − (I − B)) and the
/// truncated series of ln(1−x) on Ā = I − B, realizing Ā-products as
/// v ↦ v − (A v)/ν. Returns n·ln ν + Γ.
pub fn stochastic_logdet_taylor(
    g: &mut Graph,
    op: &dyn LinearOperator,
    cfg: &EstimatorConfig,
    rng: &SeedRng,
) -> Result<LogDetEstimate, EstimatorError> {
    cfg.validate()?;
    let n = op.dim();
    let power = power_method(g, op, cfg.t, rng)?;
    if power.value <= 0.0 {
        return Err(EstimatorError::DegenerateOperator(power.value));
    }
    let lambda_node = if cfg.detach_bounds {
        g.scalar(power.value)
    } else {
        power.node
    };
    let nu = g.scale_c(cfg.g, lambda_node);
    let inv_nu = g.recip(nu)?;
    let ln_nu = g.log(nu)?;
    let scale_term = g.scale_c(n as f64, ln_nu);

    let coeffs = taylor_coefficients(cfg.m);
    let base = rng.stream_id();
    let nu_val = g.scalar_value(nu);
    let use_block = supports_block(op, n)?;

    // One-step recurrence w_i = Ā w_{i-1}; Γ = (1/p) Σ_j Σ_i c_i <v_j, w_i>.
    let mut probes_below_bound = 0usize;
    let gamma = if use_block {
        let mut cols = Vec::with_capacity(cfg.p);
        for j in 0..cfg.p {
            let mut prng = rng.stream(base + 1 + j as u64);
            cols.push(rademacher(&mut prng, n));
        }
        let vmat = Matrix::from_fn(n, cfg.p, |i, j| cols[j][i]);
        let v = g.constant_mat(vmat);
        let mut w = v;
        let mut s: Option<NodeId> = None;
        for (i, &c) in coeffs.iter().enumerate().skip(1) {
            let aw = op.apply_block(g, w)?.expect("block support checked");
            let scaled = g.scale_n(inv_nu, aw)?;
            w = g.sub(w, scaled)?;
            if i == 1 {
                let dots = g.col_dot(v, w)?;
                for &d in g.vector_value(dots).as_slice() {
                    // <v, Āv>/n = 1 − q_A/ν
                    let q_a = nu_val * (1.0 - d / n as f64);
                    if q_a < cfg.epsilon * (1.0 - 1e-12) {
                        probes_below_bound += 1;
                    }
                }
            }
            let term = g.scale_c(c, w);
            let dots = g.col_dot(v, term)?;
            let contrib = g.sum(dots);
            s = Some(match s {
                None => contrib,
                Some(prev) => g.add(prev, contrib)?,
            });
        }
        let total = s.expect("m >= 1");
        g.scale_c(1.0 / cfg.p as f64, total)
    } else {
        let mut total = g.scalar(0.0);
        for j in 0..cfg.p {
            let mut prng = rng.stream(base + 1 + j as u64);
            let v = g.constant_vec(rademacher(&mut prng, n));
            let mut w = v;
            let mut s: Option<NodeId> = None;
            for (i, &c) in coeffs.iter().enumerate().skip(1) {
                let aw = op.apply(g, w)?;
                let scaled = g.scale_n(inv_nu, aw)?;
                w = g.sub(w, scaled)?;
                if i == 1 {
                    let dot = g.inner(v, w)?;
                    let q_a = nu_val * (1.0 - g.scalar_value(dot) / n as f64);
                    if q_a < cfg.epsilon * (1.0 - 1e-12) {
                        probes_below_bound += 1;
                    }
                }
                let term = g.scale_c(c, w);
                let contrib = g.inner(v, term)?;
                s = Some(match s {
                    None => contrib,
                    Some(prev) => g.add(prev, contrib)?,
                });
            }
            total = g.add(total, s.expect("m >= 1"))?;
        }
        g.scale_c(1.0 / cfg.p as f64, total)
    };
    if probes_below_bound > 0 {
        log::warn!(
            "{probes_below_bound} of {} probes have Rayleigh quotient below the stipulated lower bound {}",
            cfg.p,
            cfg.epsilon
        );
    }

    let node = g.add(scale_term, gamma)?;
    let value = g.scalar_value(node);
    Ok(LogDetEstimate {
        node,
        value,
        lambda_max_node: power.node,
        lambda_max: power.value,
        probes_below_bound,
    })
}

/// Value-level log-determinant summary for callers that do not need the graph.
#[derive(Debug, Clone, Copy)]
pub struct LogDetValue {
    pub value: f64,
    pub lambda_max: f64,
    pub probes_below_bound: usize,
}

impl From<LogDetEstimate> for LogDetValue {
    fn from(e: LogDetEstimate) -> Self {
        Self {
            value: e.value,
            lambda_max: e.lambda_max,
            probes_below_bound: e.probes_below_bound,
        }
    }
}

/// Chebyshev log-determinant of a dense symmetric matrix; builds a throwaway
/// graph internally.
pub fn logdet_chebyshev_value(
    matrix: &Matrix,
    cfg: &EstimatorConfig,
    rng: &SeedRng,
) -> Result<LogDetValue, EstimatorError> {
    let op = DenseOperator::new(matrix.clone())?;
    let mut g = Graph::new();
    Ok(stochastic_logdet_chebyshev(&mut g, &op, cfg, rng)?.into())
}

/// Taylor log-determinant of a dense symmetric matrix.
pub fn logdet_taylor_value(
    matrix: &Matrix,
    cfg: &EstimatorConfig,
    rng: &SeedRng,
) -> Result<LogDetValue, EstimatorError> {
    let op = DenseOperator::new(matrix.clone())?;
    let mut g = Graph::new();
    Ok(stochastic_logdet_taylor(&mut g, &op, cfg, rng)?.into())
}
