//! Knowledge distillation between device-local modules and the shared module.
//!
//! Both sides are softmax-linear classifiers. The server pulls the shared
//! module toward the uploaded local modules (teacher = local), then each device
//! pulls its local module toward the refreshed shared one (teacher = shared).

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, ProbVector, Vector};

/// Floor applied to the second argument of [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// Softmax-linear classifier: `p = softmax(W f)` with `W: classes × features`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxLinear {
    weights: Matrix,
}

/// The module replicated on every device and refreshed by the server.
pub type SharedModule = SoftmaxLinear;

impl SoftmaxLinear {
    pub fn new(weights: Matrix) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn features(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, feature: &Vector) -> Result<Vec<f64>> {
        self.weights.mul_vec(feature.as_slice())
    }

    pub fn predict(&self, feature: &Vector) -> Result<ProbVector> {
        Ok(softmax(&self.logits(feature)?))
    }
}

/// `Σ pᵢ ln(pᵢ / qᵢ)` with `0 · ln 0 = 0` and `qᵢ` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL over {} vs {} classes", p.len(), q.len())));
    }
    let kl = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Mean `KL(teacher ‖ student(feature))` over the examples.
pub fn distill_loss(student: &SoftmaxLinear, teacher_preds: &[(Vector, ProbVector)]) -> Result<f64> {
    if teacher_preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (f, t) in teacher_preds {
        total += kl_divergence(t, &student.predict(f)?)?;
    }
    Ok(total / teacher_preds.len() as f64)
}

/// Gradient of [`distill_loss`] with respect to the student weights:
/// the mean of `(student_prob − teacher_prob) ⊗ feature`.
pub fn distill_gradient(
    student: &SoftmaxLinear,
    teacher_preds: &[(Vector, ProbVector)],
) -> Result<Matrix> {
    let (c, f_dim) = student.weights.shape();
    let mut grad = Matrix::zeros(c, f_dim);
    if teacher_preds.is_empty() {
        return Ok(grad);
    }
    let inv_n = 1.0 / teacher_preds.len() as f64;
    for (f, t) in teacher_preds {
        if t.len() != c {
            return Err(Error::Shape(format!("teacher has {} classes, student {c}", t.len())));
        }
        let s = student.predict(f)?;
        for i in 0..c {
            let coef = (s.as_slice()[i] - t.as_slice()[i]) * inv_n;
            for (j, fj) in f.as_slice().iter().enumerate() {
                grad.set(i, j, grad.get(i, j) + coef * fj);
            }
        }
    }
    Ok(grad)
}

/// One gradient step of the student toward the teacher predictions.
pub fn distill_step(
    student: &SoftmaxLinear,
    teacher_preds: &[(Vector, ProbVector)],
    lr: f64,
) -> Result<SoftmaxLinear> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Domain(format!("learning rate must be nonnegative, got {lr}")));
    }
    let grad = distill_gradient(student, teacher_preds)?;
    let mut w = student.weights.clone();
    w.axpy(-lr, &grad)?;
    Ok(SoftmaxLinear::new(w))
}

/// One two-way distillation exchange.
///
/// The server evaluates every uploaded local module on its own unlabeled
/// `proxy_features` and distills them into the shared module; each device then
/// distills the new shared module into its local module on its own features.
/// Returns the refreshed shared module; `locals` is updated in place.
pub fn kd_exchange(
    shared: &SharedModule,
    locals: &mut [SoftmaxLinear],
    proxy_features: &[Vector],
    device_features: &[Vec<Vector>],
    lr: f64,
) -> Result<SharedModule> {
    if locals.len() != device_features.len() {
        return Err(Error::Input(format!(
            "{} local modules but {} feature sets",
            locals.len(),
            device_features.len()
        )));
    }
    let mut teacher_preds = Vec::with_capacity(locals.len() * proxy_features.len());
    for local in locals.iter() {
        for f in proxy_features {
            teacher_preds.push((f.clone(), local.predict(f)?));
        }
    }
    let shared = distill_step(shared, &teacher_preds, lr)?;

    for (local, feats) in locals.iter_mut().zip(device_features) {
        let preds = feats
            .iter()
            .map(|f| Ok((f.clone(), shared.predict(f)?)))
            .collect::<Result<Vec<_>>>()?;
        *local = distill_step(local, &preds, lr)?;
    }
    Ok(shared)
}
