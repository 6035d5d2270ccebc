//! Low-rank adaptation of a frozen base matrix.
//!
//! For a frozen `W0 ∈ ℝ^{d×k}` the adapter learns `B ∈ ℝ^{d×r}` and
//! `A ∈ ℝ^{r×k}`; the layer computes
//!
//! ```text
//! h = W0·x + (α/r)·B·(A·x)
//! ```
//!
//! `A` starts Gaussian and `B` starts at zero, so a fresh adapter reproduces
//! the base layer exactly. The `α/r` factor is applied at forward and merge
//! time only; stored `A` and `B` never carry it.

use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, matmul, Matrix, SeededRng};

/// Default standard deviation of the Gaussian initialization of `A`.
pub const DEFAULT_INIT_STDDEV: f64 = 0.02;

/// The trainable half of an adapter: `A`, `B`, rank and `α`.
///
/// Kept separate from the base so the same update can sit on a full-precision
/// or a quantized base.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankUpdate {
    a: Matrix,
    b: Matrix,
    rank: usize,
    alpha: f64,
}

/// Gradients of a loss with respect to `A` and `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

impl AdapterGradients {
    pub fn norm_sq(&self) -> f64 {
        self.grad_a.frobenius_sq() + self.grad_b.frobenius_sq()
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Ok(AdapterGradients {
            grad_a: self.grad_a.scale(factor)?,
            grad_b: self.grad_b.scale(factor)?,
        })
    }

    pub fn add(&self, other: &AdapterGradients) -> Result<Self> {
        Ok(AdapterGradients {
            grad_a: self.grad_a.add(&other.grad_a)?,
            grad_b: self.grad_b.add(&other.grad_b)?,
        })
    }
}

fn check_rank_alpha(rank: usize, alpha: f64, d: usize, k: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::param(format!(
            "rank {rank} outside 1..={} for a {d}x{k} base",
            d.min(k)
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

impl LowRankUpdate {
    /// Wraps explicit `A` (r×k) and `B` (d×r).
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let rank = a.rows();
        if b.cols() != rank {
            return Err(Error::shape("lora factors", b.shape(), a.shape()));
        }
        check_rank_alpha(rank, alpha, b.rows(), a.cols())?;
        Ok(LowRankUpdate { a, b, rank, alpha })
    }

    /// Gaussian `A`, zero `B`.
    pub fn init(rng: &mut SeededRng, d: usize, k: usize, rank: usize, alpha: f64, init_stddev: f64) -> Result<Self> {
        check_rank_alpha(rank, alpha, d, k)?;
        let a = gaussian_matrix(rng, rank, k, init_stddev)?;
        let b = Matrix::zeros(d, rank)?;
        Ok(LowRankUpdate { a, b, rank, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Output dimension `d`.
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `k`.
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// `α / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of trainable scalars, `r·(d + k)`.
    pub fn param_count(&self) -> usize {
        self.rank * (self.out_dim() + self.in_dim())
    }

    /// `(α/r)·B·(A·x)`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(Error::shape("lora apply", self.a.shape(), x.shape()));
        }
        let ax = matmul(&self.a, x)?;
        matmul(&self.b, &ax)?.scale(self.scaling())
    }

    /// `(α/r)·B·A` as a dense `d×k` matrix.
    pub fn delta_weight(&self) -> Result<Matrix> {
        matmul(&self.b, &self.a)?.scale(self.scaling())
    }

    /// Closed-form gradients given the layer input `x` and `∂L/∂h`:
    /// `∂L/∂B = s·G·(A·x)ᵀ`, `∂L/∂A = s·Bᵀ·G·xᵀ` with `s = α/r`.
    pub fn gradients(&self, x: &Matrix, upstream: &Matrix) -> Result<AdapterGradients> {
        if x.rows() != self.in_dim() {
            return Err(Error::shape("lora backward input", self.a.shape(), x.shape()));
        }
        if upstream.shape() != (self.out_dim(), x.cols()) {
            return Err(Error::shape(
                "lora backward upstream",
                (self.out_dim(), x.cols()),
                upstream.shape(),
            ));
        }
        let s = self.scaling();
        let ax = matmul(&self.a, x)?;
        let grad_b = matmul(upstream, &ax.transpose())?.scale(s)?;
        let bt_g = matmul(&self.b.transpose(), upstream)?;
        let grad_a = matmul(&bt_g, &x.transpose())?.scale(s)?;
        Ok(AdapterGradients { grad_a, grad_b })
    }

    /// Contribution of the adapter path to `∂L/∂x`: `s·Aᵀ·(Bᵀ·G)`.
    pub fn input_gradient(&self, upstream: &Matrix) -> Result<Matrix> {
        let bt_g = matmul(&self.b.transpose(), upstream)?;
        matmul(&self.a.transpose(), &bt_g)?.scale(self.scaling())
    }

    pub(crate) fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub(crate) fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }
}

/// A frozen base matrix with its low-rank update.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    base: Matrix,
    update: LowRankUpdate,
}

/// Attaches a freshly initialized update (Gaussian `A`, zero `B`) to `base`.
pub fn init_adapter(
    rng: &mut SeededRng,
    base: Matrix,
    rank: usize,
    alpha: f64,
    init_stddev: f64,
) -> Result<LoraAdapter> {
    let update = LowRankUpdate::init(rng, base.rows(), base.cols(), rank, alpha, init_stddev)?;
    Ok(LoraAdapter { base, update })
}

impl LoraAdapter {
    pub fn new(base: Matrix, update: LowRankUpdate) -> Result<Self> {
        if base.shape() != (update.out_dim(), update.in_dim()) {
            return Err(Error::shape(
                "lora adapter",
                base.shape(),
                (update.out_dim(), update.in_dim()),
            ));
        }
        Ok(LoraAdapter { base, update })
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn update(&self) -> &LowRankUpdate {
        &self.update
    }

    pub fn update_mut(&mut self) -> &mut LowRankUpdate {
        &mut self.update
    }

    pub fn rank(&self) -> usize {
        self.update.rank
    }

    pub fn alpha(&self) -> f64 {
        self.update.alpha
    }

    /// `W0·x + (α/r)·B·(A·x)`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.base.cols() {
            return Err(Error::shape("lora forward", self.base.shape(), x.shape()));
        }
        let base_out = matmul(&self.base, x)?;
        base_out.add(&self.update.apply(x)?)
    }

    /// Gradients for `A` and `B` only; the base never receives one.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<AdapterGradients> {
        self.update.gradients(x, upstream)
    }

    /// `W0 + (α/r)·B·A`.
    pub fn merge(&self) -> Result<Matrix> {
        self.base.add(&self.update.delta_weight()?)
    }
}

/// Total trainable scalars over a set of updates: `Σ r·(d + k)`.
pub fn trainable_param_count<'a, I>(updates: I) -> usize
where
    I: IntoIterator<Item = &'a LowRankUpdate>,
{
    updates.into_iter().map(LowRankUpdate::param_count).sum()
}
