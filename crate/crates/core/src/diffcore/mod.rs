//! Flat parameter vectors, dataset losses, exact gradients and
//! Hessian-vector products.
//!
//! Everything here is a pure function of its inputs. Gradients come from a
//! hand-written reverse pass over the model; Hessian-vector products run the
//! same reverse pass in dual-number arithmetic (forward-over-reverse).

pub mod engine;
pub mod scalar;

pub use engine::NormStatistics;

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::models::ModelSpec;
use crate::tasks::LabeledExample;
use crate::{Error, Result};

/// One named tensor inside a flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Mapping from named tensors to contiguous, disjoint index ranges that
/// cover `[0, len)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    slots: Vec<Slot>,
    len: usize,
}

impl Layout {
    pub fn new(tensors: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let slots = tensors
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let slot = Slot {
                    name,
                    shape,
                    offset,
                    len,
                };
                offset += len;
                slot
            })
            .collect();
        Self { slots, len: offset }
    }

    /// A single unnamed vector of `n` entries.
    pub fn flat(n: usize) -> Self {
        Self::new(vec![("theta".to_string(), vec![n])])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.offset..s.offset + s.len)
    }

    /// Re-checks the coverage invariant; used on deserialized layouts.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.slots {
            if s.offset != next || s.len != s.shape.iter().product::<usize>() {
                return Err(Error::Layout(format!("slot {} breaks contiguity", s.name)));
            }
            next += s.len;
        }
        if next != self.len {
            return Err(Error::Layout("slots do not cover the vector".into()));
        }
        Ok(())
    }
}

macro_rules! flat_vector {
    ($name:ident) => {
        impl $name {
            pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
                if values.len() != layout.len() {
                    return Err(Error::Layout(format!(
                        "{} values for a layout of {}",
                        values.len(),
                        layout.len()
                    )));
                }
                Ok(Self { values, layout })
            }

            pub fn zeros(layout: Arc<Layout>) -> Self {
                Self {
                    values: vec![0.0; layout.len()],
                    layout,
                }
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            pub fn layout(&self) -> &Arc<Layout> {
                &self.layout
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            /// Entries of the named tensor.
            pub fn slot(&self, name: &str) -> Option<&[f64]> {
                self.layout.range(name).map(|r| &self.values[r])
            }

            pub fn same_layout<V: HasLayout>(&self, other: &V) -> bool {
                Arc::ptr_eq(&self.layout, other.layout_arc())
                    || *self.layout == **other.layout_arc()
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }

            pub fn norm(&self) -> f64 {
                self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
        }

        impl HasLayout for $name {
            fn layout_arc(&self) -> &Arc<Layout> {
                &self.layout
            }
        }
    };
}

pub trait HasLayout {
    fn layout_arc(&self) -> &Arc<Layout>;
}

/// Model parameters (meta-parameters θ or adapted parameters φ).
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

flat_vector!(ParameterVector);

/// A gradient (or any direction) sharing the layout of a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

flat_vector!(GradientVector);

impl ParameterVector {
    /// `self + step · direction`.
    pub fn offset_by(&self, direction: &GradientVector, step: f64) -> Result<ParameterVector> {
        check_layout(self, direction)?;
        let values = self
            .values
            .iter()
            .zip(&direction.values)
            .map(|(p, d)| p + step * d)
            .collect();
        Ok(ParameterVector {
            values,
            layout: self.layout.clone(),
        })
    }

    /// Reinterprets the values as a direction.
    pub fn as_direction(&self) -> GradientVector {
        GradientVector {
            values: self.values.clone(),
            layout: self.layout.clone(),
        }
    }
}

impl GradientVector {
    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        check_layout(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &GradientVector, k: f64) -> Result<()> {
        check_layout(self, other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> GradientVector {
        GradientVector {
            values: self.values.iter().map(|v| v * k).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn sub(&self, other: &GradientVector) -> Result<GradientVector> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }
}

pub(crate) fn check_layout(a: &impl HasLayout, b: &impl HasLayout) -> Result<()> {
    let (la, lb) = (a.layout_arc(), b.layout_arc());
    if Arc::ptr_eq(la, lb) || la == lb {
        Ok(())
    } else {
        Err(Error::Layout(format!(
            "vector of length {} does not share the layout of length {}",
            lb.len(),
            la.len()
        )))
    }
}

/// Mean loss over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub example_count: usize,
}

/// A twice-differentiable scalar function of the parameters.
///
/// [`DatasetLoss`] is the production implementation; [`QuadraticLoss`] is a
/// closed-form surrogate used to check the optimizers against linear algebra.
pub trait Objective: Sync {
    fn loss(&self, params: &ParameterVector) -> Result<LossReport>;

    fn loss_and_gradient(&self, params: &ParameterVector) -> Result<(LossReport, GradientVector)>;

    fn gradient(&self, params: &ParameterVector) -> Result<GradientVector> {
        Ok(self.loss_and_gradient(params)?.1)
    }

    /// `∇²L(θ)·v`.
    fn hessian_vector_product(
        &self,
        params: &ParameterVector,
        v: &GradientVector,
    ) -> Result<GradientVector>;

    /// Gradient at `params` together with `∇²L(θ)·v`, from one pass where
    /// the implementation allows it.
    fn gradient_and_hvp(
        &self,
        params: &ParameterVector,
        v: &GradientVector,
    ) -> Result<(GradientVector, GradientVector)> {
        Ok((
            self.gradient(params)?,
            self.hessian_vector_product(params, v)?,
        ))
    }
}

/// Mean categorical cross-entropy of a model over a labeled dataset.
#[derive(Clone, Copy, Debug)]
pub struct DatasetLoss<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a [LabeledExample],
}

impl<'a> DatasetLoss<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a [LabeledExample]) -> Self {
        Self { spec, data }
    }

    fn check(&self, params: &ParameterVector) -> Result<()> {
        let expected = self.spec.layout();
        if **params.layout() != expected {
            return Err(Error::Layout(format!(
                "parameter vector of length {} does not match {} ({} parameters)",
                params.len(),
                self.spec.name,
                expected.len()
            )));
        }
        Ok(())
    }
}

impl Objective for DatasetLoss<'_> {
    fn loss(&self, params: &ParameterVector) -> Result<LossReport> {
        self.check(params)?;
        let loss = engine::loss(self.spec, params.values(), self.data)?;
        Ok(LossReport {
            loss,
            example_count: self.data.len(),
        })
    }

    fn loss_and_gradient(&self, params: &ParameterVector) -> Result<(LossReport, GradientVector)> {
        self.check(params)?;
        let (loss, grad) = engine::loss_and_gradient::<f64>(self.spec, params.values(), self.data)?;
        Ok((
            LossReport {
                loss,
                example_count: self.data.len(),
            },
            GradientVector {
                values: grad,
                layout: params.layout().clone(),
            },
        ))
    }

    fn hessian_vector_product(
        &self,
        params: &ParameterVector,
        v: &GradientVector,
    ) -> Result<GradientVector> {
        Ok(self.gradient_and_hvp(params, v)?.1)
    }

    fn gradient_and_hvp(
        &self,
        params: &ParameterVector,
        v: &GradientVector,
    ) -> Result<(GradientVector, GradientVector)> {
        self.check(params)?;
        check_layout(params, v)?;
        let (grad, hvp) =
            engine::gradient_and_hvp(self.spec, params.values(), v.values(), self.data)?;
        let layout = params.layout().clone();
        Ok((
            GradientVector {
                values: grad,
                layout: layout.clone(),
            },
            GradientVector {
                values: hvp,
                layout,
            },
        ))
    }
}

/// `L(θ) = ½ (θ − c)ᵀ A (θ − c)` with symmetric `A` (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticLoss {
    matrix: Vec<f64>,
    center: Vec<f64>,
    layout: Arc<Layout>,
}

impl QuadraticLoss {
    pub fn new(matrix: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        let n = center.len();
        if matrix.len() != n * n {
            return Err(Error::Shape(format!(
                "matrix of {} entries for dimension {n}",
                matrix.len()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if matrix[i * n + j] != matrix[j * n + i] {
                    return Err(Error::Shape("quadratic form must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            matrix,
            center,
            layout: Arc::new(Layout::flat(n)),
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn params(&self, values: Vec<f64>) -> Result<ParameterVector> {
        ParameterVector::new(self.layout.clone(), values)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.matrix[i * n + j] * x[j]).sum())
            .collect()
    }

    fn shifted(&self, params: &ParameterVector) -> Result<Vec<f64>> {
        check_layout(params, &GradientVector::zeros(self.layout.clone()))?;
        Ok(params
            .values()
            .iter()
            .zip(&self.center)
            .map(|(p, c)| p - c)
            .collect())
    }
}

impl Objective for QuadraticLoss {
    fn loss(&self, params: &ParameterVector) -> Result<LossReport> {
        let d = self.shifted(params)?;
        let ad = self.apply(&d);
        Ok(LossReport {
            loss: 0.5 * d.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>(),
            example_count: 1,
        })
    }

    fn loss_and_gradient(&self, params: &ParameterVector) -> Result<(LossReport, GradientVector)> {
        let d = self.shifted(params)?;
        let ad = self.apply(&d);
        let loss = 0.5 * d.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>();
        Ok((
            LossReport {
                loss,
                example_count: 1,
            },
            GradientVector::new(self.layout.clone(), ad)?,
        ))
    }

    fn hessian_vector_product(
        &self,
        params: &ParameterVector,
        v: &GradientVector,
    ) -> Result<GradientVector> {
        check_layout(params, v)?;
        self.shifted(params)?;
        GradientVector::new(self.layout.clone(), self.apply(v.values()))
    }
}

/// Mean cross-entropy of `spec` with `params` over `data`.
pub fn evaluate_loss(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
) -> Result<LossReport> {
    DatasetLoss::new(spec, data).loss(params)
}

/// Exact gradient of [`evaluate_loss`].
pub fn gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
) -> Result<GradientVector> {
    DatasetLoss::new(spec, data).gradient(params)
}

/// Exact `∇²L(θ)·v` without materializing the Hessian.
pub fn hessian_vector_product(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &[LabeledExample],
    v: &GradientVector,
) -> Result<GradientVector> {
    DatasetLoss::new(spec, data).hessian_vector_product(params, v)
}

/// Central-difference gradient over every coordinate (test and diagnostic
/// use only; costs `2·len` loss evaluations).
pub fn finite_difference_gradient(
    objective: &dyn Objective,
    params: &ParameterVector,
    step: f64,
) -> Result<GradientVector> {
    let mut values = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for i in 0..params.len() {
        values.push(finite_difference_coordinate(
            objective, &mut probe, i, step,
        )?);
    }
    GradientVector::new(params.layout().clone(), values)
}

/// Central-difference partial derivative along coordinate `i`; `probe` is
/// restored before returning.
pub fn finite_difference_coordinate(
    objective: &dyn Objective,
    probe: &mut ParameterVector,
    i: usize,
    step: f64,
) -> Result<f64> {
    let orig = probe.values()[i];
    probe.values_mut()[i] = orig + step;
    let plus = objective.loss(probe)?.loss;
    probe.values_mut()[i] = orig - step;
    let minus = objective.loss(probe)?.loss;
    probe.values_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * step))
}

/// Finite-difference Hessian-vector product
/// `(∇L(θ + εv) − ∇L(θ − εv)) / 2ε`; a cross-check for the exact path.
pub fn hvp_finite_difference(
    objective: &dyn Objective,
    params: &ParameterVector,
    v: &GradientVector,
    eps: f64,
) -> Result<GradientVector> {
    let plus = objective.gradient(&params.offset_by(v, eps)?)?;
    let minus = objective.gradient(&params.offset_by(v, -eps)?)?;
    Ok(plus.sub(&minus)?.scaled(0.5 / eps))
}

/// Max-norm relative error `max|a − b| / max(max|a|, max|b|)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
