//! The first-order Taylor expansion of the one-step meta-gradient,
//!
//! `∇(L_Q ∘ φ)(θ) = ∇L_Q − α(∇²L_Q·∇L_S + ∇²L_S·∇L_Q) + O(α²)`,
//!
//! its residual-scaling check, and support/query gradient alignment.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DatasetLoss, GradientVector, Objective, ParameterVector};
use crate::meta::meta_gradient_with;
use crate::models::ModelSpec;
use crate::tasks::Task;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub inner_product: f64,
    pub support_grad_norm: f64,
    pub query_grad_norm: f64,
    /// Zero when either gradient vanishes.
    pub cosine: f64,
}

pub fn gradient_alignment_with(
    support: &dyn Objective,
    query: &dyn Objective,
    params: &ParameterVector,
) -> Result<AlignmentReport> {
    let gs = support.gradient(params)?;
    let gq = query.gradient(params)?;
    alignment_of(&gs, &gq)
}

fn alignment_of(gs: &GradientVector, gq: &GradientVector) -> Result<AlignmentReport> {
    let inner_product = gs.dot(gq)?;
    let (ns, nq) = (gs.norm(), gq.norm());
    let cosine = if ns > 0.0 && nq > 0.0 {
        (inner_product / (ns * nq)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(AlignmentReport {
        inner_product,
        support_grad_norm: ns,
        query_grad_norm: nq,
        cosine,
    })
}

pub fn gradient_alignment(
    spec: &ModelSpec,
    params: &ParameterVector,
    task: &Task,
) -> Result<AlignmentReport> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::EmptyDataset);
    }
    gradient_alignment_with(
        &DatasetLoss::new(spec, &task.support),
        &DatasetLoss::new(spec, &task.query),
        params,
    )
}

/// `∇L_Q(θ) − α[∇²L_Q(θ)∇L_S(θ) + ∇²L_S(θ)∇L_Q(θ)]`.
pub fn taylor_approx_gradient_with(
    support: &dyn Objective,
    query: &dyn Objective,
    params: &ParameterVector,
    alpha: f64,
) -> Result<GradientVector> {
    if alpha == 0.0 {
        return query.gradient(params);
    }
    let gs = support.gradient(params)?;
    let (mut out, hq_gs) = query.gradient_and_hvp(params, &gs)?;
    let hs_gq = support.hessian_vector_product(params, &out)?;
    out.add_scaled(&hq_gs, -alpha)?;
    out.add_scaled(&hs_gq, -alpha)?;
    Ok(out)
}

pub fn taylor_approx_gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    task: &Task,
    alpha: f64,
) -> Result<GradientVector> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::EmptyDataset);
    }
    taylor_approx_gradient_with(
        &DatasetLoss::new(spec, &task.support),
        &DatasetLoss::new(spec, &task.query),
        params,
        alpha,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub alpha: f64,
    pub residual_norm: f64,
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
        return Err(Error::Config(
            "step sizes must be nonnegative and finite".into(),
        ));
    }
    if alphas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(
            "step sizes must be strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// `‖meta_gradient(α) − taylor_approx_gradient(α)‖₂` for each `α` (one
/// inner step).
pub fn residual_scaling_with(
    support: &dyn Objective,
    query: &dyn Objective,
    params: &ParameterVector,
    alphas: &[f64],
) -> Result<Vec<ResidualPoint>> {
    check_alphas(alphas)?;
    alphas
        .iter()
        .map(|&alpha| {
            let (_, exact) = meta_gradient_with(support, query, params, alpha, 1)?;
            let approx = taylor_approx_gradient_with(support, query, params, alpha)?;
            Ok(ResidualPoint {
                alpha,
                residual_norm: exact.sub(&approx)?.norm(),
            })
        })
        .collect()
}

pub fn residual_scaling(
    spec: &ModelSpec,
    params: &ParameterVector,
    task: &Task,
    alphas: &[f64],
) -> Result<Vec<ResidualPoint>> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::EmptyDataset);
    }
    residual_scaling_with(
        &DatasetLoss::new(spec, &task.support),
        &DatasetLoss::new(spec, &task.query),
        params,
        alphas,
    )
}

/// Successive ratios `r(α_i) / r(α_{i+1})`; about 4 when each step halves α.
pub fn residual_ratios(points: &[ResidualPoint]) -> Vec<f64> {
    points
        .windows(2)
        .map(|w| w[0].residual_norm / w[1].residual_norm)
        .collect()
}

/// `alpha,residual_norm,ratio`; the ratio column is empty on the first row.
pub fn residual_csv(points: &[ResidualPoint]) -> String {
    let mut out = String::from("alpha,residual_norm,ratio\n");
    for (i, p) in points.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            (points[i - 1].residual_norm / p.residual_norm).to_string()
        };
        out.push_str(&format!("{},{},{}\n", p.alpha, p.residual_norm, ratio));
    }
    out
}

/// Per-run JSON summary of a Taylor/alignment analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub residuals: Vec<ResidualPoint>,
    pub ratios: Vec<f64>,
    pub alignments: Vec<AlignmentReport>,
    pub mean_inner_product: f64,
    pub mean_cosine: f64,
}

impl AnalysisSummary {
    pub fn new(residuals: Vec<ResidualPoint>, alignments: Vec<AlignmentReport>) -> Self {
        let n = alignments.len().max(1) as f64;
        Self {
            ratios: residual_ratios(&residuals),
            mean_inner_product: alignments.iter().map(|a| a.inner_product).sum::<f64>() / n,
            mean_cosine: alignments.iter().map(|a| a.cosine).sum::<f64>() / n,
            residuals,
            alignments,
        }
    }
}

/// `inner_product,support_grad_norm,query_grad_norm,cosine`.
pub fn alignment_csv(reports: &[AlignmentReport]) -> String {
    let mut out = String::from("inner_product,support_grad_norm,query_grad_norm,cosine\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.inner_product, r.support_grad_norm, r.query_grad_norm, r.cosine
        ));
    }
    out
}
