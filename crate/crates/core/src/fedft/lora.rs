//! Low-rank adapters and the pad/truncate projection used to aggregate
//! adapters of different ranks.

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, Matrix};

/// Trainable low-rank update `ΔW = A · B` with `A: d×r`, `B: r×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!(
                "A is {}x{} but B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let rank = a.cols();
        let limit = a.rows().min(b.cols());
        if rank < 1 || rank > limit {
            return Err(Error::Rank(format!("rank {rank} outside [1, {limit}]")));
        }
        Ok(Self { a, b })
    }

    pub fn zeros(d: usize, k: usize, rank: usize) -> Result<Self> {
        Self::new(Matrix::zeros(d, rank), Matrix::zeros(rank, k))
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn base_rows(&self) -> usize {
        self.a.rows()
    }

    pub fn base_cols(&self) -> usize {
        self.b.cols()
    }

    /// Number of trainable scalars, `r · (d + k)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.base_rows() + self.base_cols())
    }

    /// Effective update `A · B`.
    pub fn delta(&self) -> Matrix {
        matmul(&self.a, &self.b).expect("adapter factors are conformable")
    }
}

/// Frozen pre-trained weight `W0: d×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBase {
    w0: Matrix,
}

impl FrozenBase {
    pub fn new(w0: Matrix) -> Self {
        Self { w0 }
    }

    pub fn weights(&self) -> &Matrix {
        &self.w0
    }

    pub fn effective(&self, adapter: &LoraAdapter) -> Result<Matrix> {
        if self.w0.shape() != (adapter.base_rows(), adapter.base_cols()) {
            return Err(Error::Shape(format!(
                "base is {:?} but adapter targets {}x{}",
                self.w0.shape(),
                adapter.base_rows(),
                adapter.base_cols()
            )));
        }
        self.w0.add(&adapter.delta())
    }
}

/// One regression example: input `x` (length k) and target `y` (length d).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Appends zero columns to `A` and zero rows to `B`; `A · B` is unchanged.
pub fn zero_pad(adapter: &LoraAdapter, target_rank: usize) -> Result<LoraAdapter> {
    let (d, k, r) = (adapter.base_rows(), adapter.base_cols(), adapter.rank());
    if target_rank < r {
        return Err(Error::Rank(format!("cannot pad rank {r} down to {target_rank}")));
    }
    if target_rank == r {
        return Ok(adapter.clone());
    }
    let a = Matrix::from_fn(d, target_rank, |i, j| if j < r { adapter.a.get(i, j) } else { 0.0 });
    let b = Matrix::from_fn(target_rank, k, |i, j| if i < r { adapter.b.get(i, j) } else { 0.0 });
    LoraAdapter::new(a, b)
}

/// Keeps the leading `target_rank` columns of `A` and rows of `B`.
pub fn truncate(adapter: &LoraAdapter, target_rank: usize) -> Result<LoraAdapter> {
    let r = adapter.rank();
    if target_rank < 1 || target_rank > r {
        return Err(Error::Rank(format!("cannot truncate rank {r} to {target_rank}")));
    }
    if target_rank == r {
        return Ok(adapter.clone());
    }
    let a = Matrix::from_fn(adapter.base_rows(), target_rank, |i, j| adapter.a.get(i, j));
    let b = Matrix::from_fn(target_rank, adapter.base_cols(), |i, j| adapter.b.get(i, j));
    LoraAdapter::new(a, b)
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Input(format!("{} weights for {n} adapters", weights.len())));
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::Input("aggregation weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("aggregation weights sum to {total}")));
    }
    Ok(())
}

/// Zero-pads every adapter to the largest rank present, then takes the
/// weighted mean of the `A` factors and of the `B` factors separately.
pub fn aggregate_hetero(adapters: &[LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    let first = adapters.first().ok_or_else(|| Error::Input("no adapters to aggregate".into()))?;
    check_weights(weights, adapters.len())?;
    let (d, k) = (first.base_rows(), first.base_cols());
    if let Some(bad) = adapters.iter().find(|a| (a.base_rows(), a.base_cols()) != (d, k)) {
        return Err(Error::Shape(format!(
            "adapter for {}x{} mixed with {d}x{k}",
            bad.base_rows(),
            bad.base_cols()
        )));
    }
    let r_max = adapters.iter().map(LoraAdapter::rank).max().unwrap_or(1);
    let mut a = Matrix::zeros(d, r_max);
    let mut b = Matrix::zeros(r_max, k);
    for (adapter, &w) in adapters.iter().zip(weights) {
        let padded = zero_pad(adapter, r_max)?;
        a.axpy(w, &padded.a)?;
        b.axpy(w, &padded.b)?;
    }
    LoraAdapter::new(a, b)
}

/// `‖Σ wᵢ AᵢBᵢ − (Σ wᵢ Aᵢ)(Σ wᵢ Bᵢ)‖_F`: how far factor-wise averaging
/// drifts from averaging the effective updates.
pub fn aggregation_bias(adapters: &[LoraAdapter], weights: &[f64]) -> Result<f64> {
    let merged = aggregate_hetero(adapters, weights)?;
    let mut mean_delta = Matrix::zeros(merged.base_rows(), merged.base_cols());
    for (adapter, &w) in adapters.iter().zip(weights) {
        mean_delta.axpy(w, &adapter.delta())?;
    }
    Ok(mean_delta.sub(&merged.delta())?.frobenius_norm())
}

fn check_batch(effective: &Matrix, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let (d, k) = effective.shape();
    if let Some(s) = batch.iter().find(|s| s.x.len() != k || s.y.len() != d) {
        return Err(Error::Shape(format!(
            "sample ({}, {}) for a {d}x{k} layer",
            s.x.len(),
            s.y.len()
        )));
    }
    Ok(())
}

/// Mean over the batch of `‖(W0 + AB)x − y‖²`.
pub fn mse_loss(base: &FrozenBase, adapter: &LoraAdapter, batch: &[Sample]) -> Result<f64> {
    let w = base.effective(adapter)?;
    check_batch(&w, batch)?;
    let mut total = 0.0;
    for s in batch {
        let pred = w.mul_vec(&s.x)?;
        total += pred.iter().zip(&s.y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Gradients of [`mse_loss`] with respect to `A` and `B`.
pub fn lora_gradients(
    base: &FrozenBase,
    adapter: &LoraAdapter,
    batch: &[Sample],
) -> Result<(Matrix, Matrix)> {
    let w = base.effective(adapter)?;
    check_batch(&w, batch)?;
    let (d, k) = w.shape();
    // G = (2/n) Σ (Wx − y) xᵀ, the gradient with respect to W.
    let mut g = Matrix::zeros(d, k);
    let scale = 2.0 / batch.len() as f64;
    for s in batch {
        for i in 0..d {
            let resid = dot(w.row(i), &s.x) - s.y[i];
            if resid == 0.0 {
                continue;
            }
            for (j, xj) in s.x.iter().enumerate() {
                g.set(i, j, g.get(i, j) + scale * resid * xj);
            }
        }
    }
    let grad_a = matmul(&g, &adapter.b.transpose())?;
    let grad_b = matmul(&adapter.a.transpose(), &g)?;
    Ok((grad_a, grad_b))
}

/// One gradient step on `A` and `B`; the base stays frozen.
pub fn lora_sgd_step(
    base: &FrozenBase,
    adapter: &LoraAdapter,
    batch: &[Sample],
    lr: f64,
) -> Result<LoraAdapter> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Domain(format!("learning rate must be nonnegative, got {lr}")));
    }
    let (grad_a, grad_b) = lora_gradients(base, adapter, batch)?;
    let mut a = adapter.a.clone();
    let mut b = adapter.b.clone();
    a.axpy(-lr, &grad_a)?;
    b.axpy(-lr, &grad_b)?;
    LoraAdapter::new(a, b)
}
