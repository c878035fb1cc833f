//! Weight-construction schemes, rank-selection rules, and parameter-count
//! formulas.
//!
//! The central construction is the low-rank Hadamard product
//! `W = (X1 Y1^T) (.) (X2 Y2^T)`, which spans ranks up to `r1 * r2` while
//! costing only `(r1 + r2)(m + n)` parameters, plus its tensor form for
//! convolution kernels and the personalized split `W = W1 (.) (W2 + 1)`.

use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("gamma {0} outside [0, 1]")]
    GammaOutOfRange(f64),
    #[error("rank must be >= 1")]
    RankZero,
    #[error("{0}")]
    Construction(String),
    #[error("scheme {scheme:?} is not supported for {kind} layers")]
    UnsupportedScheme { scheme: Scheme, kind: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Shape of one learnable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerShape {
    /// Fully connected: `out x in` weight.
    Fc { out: usize, input: usize },
    /// Convolution kernel: `out_ch x in_ch x k1 x k2`.
    Conv {
        out_ch: usize,
        in_ch: usize,
        k1: usize,
        k2: usize,
    },
}

impl LayerShape {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Fc { out, input } => vec![out, input],
            LayerShape::Conv {
                out_ch,
                in_ch,
                k1,
                k2,
            } => vec![out_ch, in_ch, k1, k2],
        }
    }

    pub fn original_count(&self) -> u64 {
        self.weight_shape().iter().map(|&d| d as u64).product()
    }

    /// Fan-in of the composed layer, used for He-style initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Fc { input, .. } => input,
            LayerShape::Conv { in_ch, k1, k2, .. } => in_ch * k1 * k2,
        }
    }

    /// The matrix dimensions that govern rank selection: `(m, n)` for FC
    /// layers, `(O, I)` for convolutions (first/second unfolding dims).
    pub fn rank_dims(&self) -> (usize, usize) {
        match *self {
            LayerShape::Fc { out, input } => (out, input),
            LayerShape::Conv { out_ch, in_ch, .. } => (out_ch, in_ch),
        }
    }

    pub fn out_features(&self) -> usize {
        match *self {
            LayerShape::Fc { out, .. } => out,
            LayerShape::Conv { out_ch, .. } => out_ch,
        }
    }

    fn validate(&self) -> Result<(), ParamError> {
        if self.weight_shape().iter().any(|&d| d == 0) {
            return Err(ParamError::Construction(format!(
                "layer shape {self:?} has a zero dimension"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Original,
    LowRank,
    FedParaMatrix,
    FedParaTensor,
    PFedPara,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    None,
    Tanh,
}

impl Nonlinearity {
    pub fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Nonlinearity::None => t.clone(),
            Nonlinearity::Tanh => t.map(f64::tanh),
        }
    }
}

/// A layer weight under one parameterization scheme, holding the inner
/// factors that are actually trained and transmitted.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorizedWeight {
    Original {
        weight: Tensor,
    },
    /// `W = X Y^T` with factor width `2R`, the budget-equivalent of a
    /// FedPara weight at inner rank `R`; composed rank is at most `2R`.
    LowRank {
        x: Tensor,
        y: Tensor,
    },
    /// `W = s(X1 Y1^T) (.) s(X2 Y2^T)` where `s` is the optional Tanh.
    FedParaMatrix {
        x1: Tensor,
        y1: Tensor,
        x2: Tensor,
        y2: Tensor,
        nonlinearity: Nonlinearity,
    },
    /// `W = (T1 x0 X1 x1 Y1) (.) (T2 x0 X2 x1 Y2)` over a 4D kernel.
    FedParaTensor {
        t1: Tensor,
        t2: Tensor,
        x1: Tensor,
        x2: Tensor,
        y1: Tensor,
        y2: Tensor,
    },
    /// Personalized split: `W = (X1 Y1^T) (.) ((X2 Y2^T) + 1)`; the
    /// `{X1, Y1}` pair is globally aggregated, `{X2, Y2}` stays local.
    PFedPara {
        x1: Tensor,
        y1: Tensor,
        x2: Tensor,
        y2: Tensor,
    },
}

impl FactorizedWeight {
    pub fn scheme(&self) -> Scheme {
        match self {
            FactorizedWeight::Original { .. } => Scheme::Original,
            FactorizedWeight::LowRank { .. } => Scheme::LowRank,
            FactorizedWeight::FedParaMatrix { .. } => Scheme::FedParaMatrix,
            FactorizedWeight::FedParaTensor { .. } => Scheme::FedParaTensor,
            FactorizedWeight::PFedPara { .. } => Scheme::PFedPara,
        }
    }

    /// All trainable tensors in a fixed order, with their payload names.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            FactorizedWeight::Original { weight } => vec![("weight", weight)],
            FactorizedWeight::LowRank { x, y } => vec![("x", x), ("y", y)],
            FactorizedWeight::FedParaMatrix { x1, y1, x2, y2, .. } => {
                vec![("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)]
            }
            FactorizedWeight::FedParaTensor {
                t1,
                t2,
                x1,
                x2,
                y1,
                y2,
            } => vec![
                ("t1", t1),
                ("t2", t2),
                ("x1", x1),
                ("x2", x2),
                ("y1", y1),
                ("y2", y2),
            ],
            FactorizedWeight::PFedPara { x1, y1, x2, y2 } => {
                vec![("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)]
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            FactorizedWeight::Original { weight } => vec![("weight", weight)],
            FactorizedWeight::LowRank { x, y } => vec![("x", x), ("y", y)],
            FactorizedWeight::FedParaMatrix { x1, y1, x2, y2, .. } => {
                vec![("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)]
            }
            FactorizedWeight::FedParaTensor {
                t1,
                t2,
                x1,
                x2,
                y1,
                y2,
            } => vec![
                ("t1", t1),
                ("t2", t2),
                ("x1", x1),
                ("x2", x2),
                ("y1", y1),
                ("y2", y2),
            ],
            FactorizedWeight::PFedPara { x1, y1, x2, y2 } => {
                vec![("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)]
            }
        }
    }

    /// Names of the tensors shared with the server. Everything for the
    /// global schemes; only the `{X1, Y1}` half for the personalized one.
    pub fn global_tensor_names(&self) -> Vec<&'static str> {
        match self {
            FactorizedWeight::PFedPara { .. } => vec!["x1", "y1"],
            other => other.tensors().into_iter().map(|(n, _)| n).collect(),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Builds the dense weight this parameterization represents.
    pub fn compose(&self) -> Result<Tensor, ParamError> {
        match self {
            FactorizedWeight::Original { weight } => Ok(weight.clone()),
            FactorizedWeight::LowRank { x, y } => {
                check_matrix_factor("x", x)?;
                check_matrix_factor("y", y)?;
                if x.cols() != y.cols() {
                    return Err(ParamError::Construction(format!(
                        "low-rank factor widths differ: {} vs {}",
                        x.cols(),
                        y.cols()
                    )));
                }
                Ok(x.matmul(&y.transpose()?)?)
            }
            FactorizedWeight::FedParaMatrix {
                x1,
                y1,
                x2,
                y2,
                nonlinearity,
            } => compose_matrix(x1, y1, x2, y2, *nonlinearity),
            FactorizedWeight::FedParaTensor {
                t1,
                t2,
                x1,
                x2,
                y1,
                y2,
            } => compose_tensor(t1, t2, x1, x2, y1, y2),
            FactorizedWeight::PFedPara { x1, y1, x2, y2 } => {
                compose_personalized(x1, y1, x2, y2)
            }
        }
    }
}

fn check_matrix_factor(name: &str, t: &Tensor) -> Result<(), ParamError> {
    if t.ndim() != 2 {
        return Err(ParamError::Construction(format!(
            "factor {name} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_pair(
    x: &Tensor,
    y: &Tensor,
    m: usize,
    n: usize,
    which: &str,
) -> Result<usize, ParamError> {
    check_matrix_factor("x", x)?;
    check_matrix_factor("y", y)?;
    if x.rows() != m || y.rows() != n || x.cols() != y.cols() {
        return Err(ParamError::Construction(format!(
            "inconsistent {which} factor shapes: X {:?}, Y {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let r = x.cols();
    if r > m.min(n) {
        return Err(ParamError::Construction(format!(
            "inner rank {r} exceeds min(m, n) = {}",
            m.min(n)
        )));
    }
    Ok(r)
}

/// `W = s(X1 Y1^T) (.) s(X2 Y2^T)`; rank(W) <= r1 * r2 when `s` is identity.
pub fn compose_matrix(
    x1: &Tensor,
    y1: &Tensor,
    x2: &Tensor,
    y2: &Tensor,
    nonlinearity: Nonlinearity,
) -> Result<Tensor, ParamError> {
    check_matrix_factor("x1", x1)?;
    let (m, n) = (x1.rows(), y1.rows());
    check_pair(x1, y1, m, n, "first")?;
    check_pair(x2, y2, m, n, "second")?;
    let w1 = x1.matmul(&y1.transpose()?)?;
    let w2 = x2.matmul(&y2.transpose()?)?;
    Ok(nonlinearity.apply(&w1).hadamard(&nonlinearity.apply(&w2))?)
}

fn check_tucker(
    t: &Tensor,
    x: &Tensor,
    y: &Tensor,
    which: &str,
) -> Result<(usize, usize, usize), ParamError> {
    if t.ndim() != 4 {
        return Err(ParamError::Construction(format!(
            "{which} kernel core must be rank 4, got {:?}",
            t.shape()
        )));
    }
    check_matrix_factor("x", x)?;
    check_matrix_factor("y", y)?;
    let r = t.shape()[0];
    if t.shape()[1] != r || x.cols() != r || y.cols() != r {
        return Err(ParamError::Construction(format!(
            "{which} core/factor ranks disagree: T {:?}, X {:?}, Y {:?}",
            t.shape(),
            x.shape(),
            y.shape()
        )));
    }
    let (o, i) = (x.rows(), y.rows());
    if r > o.min(i) {
        return Err(ParamError::Construction(format!(
            "inner rank {r} exceeds min(O, I) = {}",
            o.min(i)
        )));
    }
    Ok((o, i, r))
}

/// `W = (T1 x0 X1 x1 Y1) (.) (T2 x0 X2 x1 Y2)`; both unfolding ranks <= R^2.
pub fn compose_tensor(
    t1: &Tensor,
    t2: &Tensor,
    x1: &Tensor,
    x2: &Tensor,
    y1: &Tensor,
    y2: &Tensor,
) -> Result<Tensor, ParamError> {
    let (o, i, _) = check_tucker(t1, x1, y1, "first")?;
    let (o2, i2, _) = check_tucker(t2, x2, y2, "second")?;
    if o != o2 || i != i2 || t1.shape()[2..] != t2.shape()[2..] {
        return Err(ParamError::Construction(
            "the two kernel terms disagree on output shape".into(),
        ));
    }
    let a1 = t1.mode_n_product(x1, 0)?.mode_n_product(y1, 1)?;
    let a2 = t2.mode_n_product(x2, 0)?.mode_n_product(y2, 1)?;
    Ok(a1.hadamard(&a2)?)
}

/// `W = (X1 Y1^T) (.) ((X2 Y2^T) + 1)`, the additive global/personal split.
pub fn compose_personalized(
    x1: &Tensor,
    y1: &Tensor,
    x2: &Tensor,
    y2: &Tensor,
) -> Result<Tensor, ParamError> {
    check_matrix_factor("x1", x1)?;
    let (m, n) = (x1.rows(), y1.rows());
    check_pair(x1, y1, m, n, "global")?;
    check_pair(x2, y2, m, n, "local")?;
    let w1 = x1.matmul(&y1.transpose()?)?;
    let w2 = x2.matmul(&y2.transpose()?)?;
    Ok(w1.hadamard(&w2.add_scalar(1.0))?)
}

/// Smallest inner rank `R` with `R^2 >= min(m, n)`, i.e. the cheapest
/// FedPara configuration that can still span a full-rank matrix.
pub fn min_full_rank(m: usize, n: usize) -> usize {
    let target = m.min(n);
    let mut r = (target as f64).sqrt().floor() as usize;
    while r * r < target {
        r += 1;
    }
    while r > 1 && (r - 1) * (r - 1) >= target {
        r -= 1;
    }
    r.max(1)
}

/// The unique minimizer of `(r1 + r2)(m + n)` subject to `r1 * r2 >= R^2`
/// is `r1 = r2 = R`, with objective value `2R(m + n)`.
pub fn optimal_inner_rank(r_target: usize) -> Result<(usize, usize), ParamError> {
    if r_target < 1 {
        return Err(ParamError::RankZero);
    }
    Ok((r_target, r_target))
}

/// Outcome of the gamma -> rank interpolation for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankBudget {
    pub r_min: usize,
    pub r_max: usize,
    pub gamma: f64,
    pub r: usize,
    /// Set when the layer is too small for the budget rule (`r_max < r_min`)
    /// and the rank fell back to `r_min`.
    pub degenerate: bool,
}

/// Rank interpolation `r = (1 - gamma) * r_min + gamma * r_max`, rounded
/// half-up and clamped.
///
/// `r_min` comes from [`min_full_rank`] on the layer's rank dimensions;
/// `r_max` is the largest rank whose FedPara parameter count does not
/// exceed the original layer's count. For convolutions the budget uses the
/// tensor-form count; note `r_max` may exceed `min(O, I)` on very skewed
/// layers, which only matters if such a layer is actually instantiated.
pub fn rank_from_gamma(shape: &LayerShape, gamma: f64) -> Result<RankBudget, ParamError> {
    if !(0.0..=1.0).contains(&gamma) || gamma.is_nan() {
        return Err(ParamError::GammaOutOfRange(gamma));
    }
    shape.validate()?;
    let (m, n) = shape.rank_dims();
    let r_min = min_full_rank(m, n);
    let original = shape.original_count();
    let scheme = match shape {
        LayerShape::Fc { .. } => Scheme::FedParaMatrix,
        LayerShape::Conv { .. } => Scheme::FedParaTensor,
    };
    let mut r_max = 0usize;
    while param_count(scheme, shape, r_max + 1)? <= original {
        r_max += 1;
    }
    if r_max < r_min {
        return Ok(RankBudget {
            r_min,
            r_max,
            gamma,
            r: r_min,
            degenerate: true,
        });
    }
    let interpolated = (1.0 - gamma) * r_min as f64 + gamma * r_max as f64;
    let rounded = (interpolated + 0.5).floor() as usize;
    let r = rounded.clamp(r_min, r_max);
    Ok(RankBudget {
        r_min,
        r_max,
        gamma,
        r,
        degenerate: false,
    })
}

/// Weight parameter count for `scheme` at inner rank `r` (biases excluded).
pub fn param_count(scheme: Scheme, shape: &LayerShape, r: usize) -> Result<u64, ParamError> {
    shape.validate()?;
    if scheme != Scheme::Original && r < 1 {
        return Err(ParamError::RankZero);
    }
    let r = r as u64;
    match (*shape, scheme) {
        (_, Scheme::Original) => Ok(shape.original_count()),
        (LayerShape::Fc { out, input }, Scheme::LowRank)
        | (LayerShape::Fc { out, input }, Scheme::FedParaMatrix)
        | (LayerShape::Fc { out, input }, Scheme::PFedPara) => {
            Ok(2 * r * (out as u64 + input as u64))
        }
        (
            LayerShape::Conv {
                out_ch,
                in_ch,
                k1,
                k2,
            },
            Scheme::LowRank,
        )
        | (
            LayerShape::Conv {
                out_ch,
                in_ch,
                k1,
                k2,
            },
            Scheme::FedParaTensor,
        ) => Ok(2 * r * (out_ch as u64 + in_ch as u64 + r * (k1 * k2) as u64)),
        (
            LayerShape::Conv {
                out_ch,
                in_ch,
                k1,
                k2,
            },
            Scheme::FedParaMatrix,
        ) => Ok(2 * r * (out_ch as u64 + (in_ch * k1 * k2) as u64)),
        (LayerShape::Fc { .. }, Scheme::FedParaTensor) => Err(ParamError::UnsupportedScheme {
            scheme,
            kind: "fully connected",
        }),
        (LayerShape::Conv { .. }, Scheme::PFedPara) => Err(ParamError::UnsupportedScheme {
            scheme,
            kind: "convolutional",
        }),
    }
}

/// Maximal achievable rank (of the first unfolding, for kernels), capped by
/// the matrix dimensions.
pub fn max_rank(scheme: Scheme, shape: &LayerShape, r: usize) -> u64 {
    let dim_cap = match *shape {
        LayerShape::Fc { out, input } => out.min(input) as u64,
        LayerShape::Conv {
            out_ch,
            in_ch,
            k1,
            k2,
        } => (out_ch).min(in_ch * k1 * k2) as u64,
    };
    let r = r as u64;
    let bound = match scheme {
        Scheme::Original => dim_cap,
        Scheme::LowRank => 2 * r,
        Scheme::FedParaMatrix | Scheme::FedParaTensor => r * r,
        Scheme::PFedPara => r * (r + 1),
    };
    bound.min(dim_cap)
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Seeded He-style factor initialization: per-factor scales are chosen so
/// the composed weight's entry variance matches the He target
/// `2 / fan_in` of the layer.
pub fn init_factors(
    shape: &LayerShape,
    scheme: Scheme,
    r: usize,
    nonlinearity: Nonlinearity,
    rng: &mut impl Rng,
) -> Result<FactorizedWeight, ParamError> {
    shape.validate()?;
    if scheme != Scheme::Original && r < 1 {
        return Err(ParamError::RankZero);
    }
    let fan_in = shape.fan_in() as f64;
    let he_var = 2.0 / fan_in;
    match (*shape, scheme) {
        (_, Scheme::Original) => Ok(FactorizedWeight::Original {
            weight: gaussian(rng, &shape.weight_shape(), he_var.sqrt()),
        }),
        (LayerShape::Fc { out, input }, Scheme::LowRank) => {
            // Var(W) = 2r * s^4.
            let s = (he_var / (2.0 * r as f64)).powf(0.25);
            Ok(FactorizedWeight::LowRank {
                x: gaussian(rng, &[out, 2 * r], s),
                y: gaussian(rng, &[input, 2 * r], s),
            })
        }
        (LayerShape::Fc { out, input }, Scheme::FedParaMatrix) => {
            if r > out.min(input) {
                return Err(ParamError::Construction(format!(
                    "inner rank {r} exceeds min(m, n) = {}",
                    out.min(input)
                )));
            }
            // Var(W) = r^2 * s^8.
            let s = (he_var / (r as f64 * r as f64)).powf(1.0 / 8.0);
            Ok(FactorizedWeight::FedParaMatrix {
                x1: gaussian(rng, &[out, r], s),
                y1: gaussian(rng, &[input, r], s),
                x2: gaussian(rng, &[out, r], s),
                y2: gaussian(rng, &[input, r], s),
                nonlinearity,
            })
        }
        (LayerShape::Fc { out, input }, Scheme::PFedPara) => {
            if r > out.min(input) {
                return Err(ParamError::Construction(format!(
                    "inner rank {r} exceeds min(m, n) = {}",
                    out.min(input)
                )));
            }
            // Var(W) = u^2 + u with u = r * s^4; solve for the He target.
            let u = (-1.0 + (1.0 + 4.0 * he_var).sqrt()) / 2.0;
            let s = (u / r as f64).powf(0.25);
            Ok(FactorizedWeight::PFedPara {
                x1: gaussian(rng, &[out, r], s),
                y1: gaussian(rng, &[input, r], s),
                x2: gaussian(rng, &[out, r], s),
                y2: gaussian(rng, &[input, r], s),
            })
        }
        (
            LayerShape::Conv {
                out_ch,
                in_ch,
                k1,
                k2,
            },
            Scheme::FedParaTensor,
        ) => {
            if r > out_ch.min(in_ch) {
                return Err(ParamError::Construction(format!(
                    "inner rank {r} exceeds min(O, I) = {}",
                    out_ch.min(in_ch)
                )));
            }
            // Var(W) = r^4 * s^12.
            let s = (he_var / (r as f64).powi(4)).powf(1.0 / 12.0);
            Ok(FactorizedWeight::FedParaTensor {
                t1: gaussian(rng, &[r, r, k1, k2], s),
                t2: gaussian(rng, &[r, r, k1, k2], s),
                x1: gaussian(rng, &[out_ch, r], s),
                x2: gaussian(rng, &[out_ch, r], s),
                y1: gaussian(rng, &[in_ch, r], s),
                y2: gaussian(rng, &[in_ch, r], s),
            })
        }
        (
            LayerShape::Conv {
                out_ch,
                in_ch,
                k1,
                k2,
            },
            Scheme::FedParaMatrix,
        ) => {
            // Reshape form: factors over the O x (I*K1*K2) matrix.
            let n = in_ch * k1 * k2;
            if r > out_ch.min(n) {
                return Err(ParamError::Construction(format!(
                    "inner rank {r} exceeds min(O, I*K1*K2) = {}",
                    out_ch.min(n)
                )));
            }
            let s = (he_var / (r as f64 * r as f64)).powf(1.0 / 8.0);
            Ok(FactorizedWeight::FedParaMatrix {
                x1: gaussian(rng, &[out_ch, r], s),
                y1: gaussian(rng, &[n, r], s),
                x2: gaussian(rng, &[out_ch, r], s),
                y2: gaussian(rng, &[n, r], s),
                nonlinearity,
            })
        }
        (LayerShape::Conv { .. }, Scheme::LowRank) => Err(ParamError::UnsupportedScheme {
            scheme,
            kind: "convolutional",
        }),
        (LayerShape::Fc { .. }, Scheme::FedParaTensor) => Err(ParamError::UnsupportedScheme {
            scheme,
            kind: "fully connected",
        }),
        (LayerShape::Conv { .. }, Scheme::PFedPara) => Err(ParamError::UnsupportedScheme {
            scheme,
            kind: "convolutional",
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{stream_rng, Stream};
    use rand::Rng;

    fn gauss_pair(
        rng: &mut impl Rng,
        m: usize,
        n: usize,
        r: usize,
    ) -> (Tensor, Tensor, Tensor, Tensor) {
        let g = |rng: &mut dyn rand::RngCore, shape: &[usize]| {
            let normal = Normal::new(0.0, 1.0).unwrap();
            Tensor::from_fn(shape, |_| normal.sample(rng))
        };
        (
            g(rng, &[m, r]),
            g(rng, &[n, r]),
            g(rng, &[m, r]),
            g(rng, &[n, r]),
        )
    }

    #[test]
    fn compose_matrix_all_ones_rank_one() {
        let x = Tensor::ones(&[4, 1]);
        let y = Tensor::ones(&[3, 1]);
        let w = compose_matrix(&x, &y, &x, &y, Nonlinearity::None).unwrap();
        assert_eq!(w, Tensor::ones(&[4, 3]));
        assert_eq!(w.numerical_rank(None).unwrap(), 1);
    }

    #[test]
    fn compose_matrix_zero_factor_annihilates() {
        let mut rng = stream_rng(1, Stream::Init, 0);
        let (x1, y1, _, y2) = gauss_pair(&mut rng, 4, 5, 2);
        let x2 = Tensor::zeros(&[4, 2]);
        let w = compose_matrix(&x1, &y1, &x2, &y2, Nonlinearity::None).unwrap();
        assert_eq!(w, Tensor::zeros(&[4, 5]));
    }

    #[test]
    fn compose_matrix_rank_bound_prop1() {
        let mut rng = stream_rng(2, Stream::Init, 0);
        for (r1, r2) in [(1, 1), (2, 3), (3, 2), (2, 2)] {
            let g = |rng: &mut dyn rand::RngCore, shape: &[usize]| {
                let normal = Normal::new(0.0, 1.0).unwrap();
                Tensor::from_fn(shape, |_| normal.sample(rng))
            };
            let (m, n) = (12, 10);
            let w = compose_matrix(
                &g(&mut rng, &[m, r1]),
                &g(&mut rng, &[n, r1]),
                &g(&mut rng, &[m, r2]),
                &g(&mut rng, &[n, r2]),
                Nonlinearity::None,
            )
            .unwrap();
            assert!(w.numerical_rank(None).unwrap() <= r1 * r2);
        }
    }

    #[test]
    fn compose_matrix_full_rank_monte_carlo_small() {
        // Small-scale version of the full 1000-trial run in the acceptance
        // suite: 100 seeded trials at m = n = 30, r = 6 (36 >= 30).
        let mut full = 0;
        for trial in 0..100 {
            let mut rng = stream_rng(3, Stream::Init, trial);
            let (x1, y1, x2, y2) = gauss_pair(&mut rng, 30, 30, 6);
            let w = compose_matrix(&x1, &y1, &x2, &y2, Nonlinearity::None).unwrap();
            if w.numerical_rank(None).unwrap() == 30 {
                full += 1;
            }
        }
        assert!(full >= 99, "full rank in only {full}/100 trials");
    }

    #[test]
    fn compose_matrix_rejects_oversized_rank() {
        let x = Tensor::ones(&[3, 4]);
        let y = Tensor::ones(&[3, 4]);
        assert!(compose_matrix(&x, &y, &x, &y, Nonlinearity::None).is_err());
    }

    #[test]
    fn compose_tensor_zero_and_ones() {
        let r = 1;
        let t1 = Tensor::ones(&[r, r, 2, 2]);
        let x = Tensor::ones(&[3, r]);
        let y = Tensor::ones(&[3, r]);
        let zero = Tensor::zeros(&[r, r, 2, 2]);
        let w = compose_tensor(&t1, &zero, &x, &x, &y, &y).unwrap();
        assert_eq!(w, Tensor::zeros(&[3, 3, 2, 2]));

        let w = compose_tensor(&t1, &t1, &x, &x, &y, &y).unwrap();
        assert_eq!(w, Tensor::ones(&[3, 3, 2, 2]));
        assert_eq!(w.unfold(0).unwrap().numerical_rank(None).unwrap(), 1);
    }

    #[test]
    fn compose_tensor_unfolding_ranks_agree_and_bounded() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = stream_rng(4, Stream::Init, 0);
        let mut g = |shape: &[usize]| Tensor::from_fn(shape, |_| normal.sample(&mut rng));
        let (o, i, k, r) = (16, 16, 3, 4);
        let w = compose_tensor(
            &g(&[r, r, k, k]),
            &g(&[r, r, k, k]),
            &g(&[o, r]),
            &g(&[o, r]),
            &g(&[i, r]),
            &g(&[i, r]),
        )
        .unwrap();
        let r0 = w.unfold(0).unwrap().numerical_rank(None).unwrap();
        let r1 = w.unfold(1).unwrap().numerical_rank(None).unwrap();
        assert_eq!(r0, r1);
        assert!(r0 <= r * r);
        assert_eq!(r0, 16); // R^2 = 16 = min(O, I): typically full.
    }

    #[test]
    fn compose_personalized_switch_and_identity() {
        let mut rng = stream_rng(5, Stream::Init, 0);
        let (x1, y1, _, _) = gauss_pair(&mut rng, 8, 8, 3);
        let zero = Tensor::zeros(&[8, 3]);

        // X2 = 0 opens the switch: W == W1.
        let w1 = x1.matmul(&y1.transpose().unwrap()).unwrap();
        let w = compose_personalized(&x1, &y1, &zero, &zero).unwrap();
        assert!(w.sub(&w1).unwrap().frob_norm() < 1e-15);

        // W1 = 0 annihilates everything.
        let w = compose_personalized(&zero, &zero, &x1, &y1).unwrap();
        assert_eq!(w, Tensor::zeros(&[8, 8]));
    }

    #[test]
    fn compose_personalized_two_path_identity() {
        let mut rng = stream_rng(6, Stream::Init, 0);
        for trial in 0..20 {
            let mut rng2 = stream_rng(rng.gen(), Stream::Init, trial);
            let (x1, y1, x2, y2) = gauss_pair(&mut rng2, 8, 8, 3);
            let w = compose_personalized(&x1, &y1, &x2, &y2).unwrap();
            let w1 = x1.matmul(&y1.transpose().unwrap()).unwrap();
            let w2 = x2.matmul(&y2.transpose().unwrap()).unwrap();
            let alt = w1.hadamard(&w2).unwrap().add(&w1).unwrap();
            assert!(w.sub(&alt).unwrap().frob_norm() < 1e-12);
        }
    }

    #[test]
    fn optimal_inner_rank_is_diagonal() {
        assert_eq!(optimal_inner_rank(1).unwrap(), (1, 1));
        assert_eq!(optimal_inner_rank(4).unwrap(), (4, 4));
        assert!(optimal_inner_rank(0).is_err());
    }

    #[test]
    fn optimal_inner_rank_matches_exhaustive_search() {
        // Exhaustive oracle over r1, r2 in [1, R^2]^2 for a small case.
        let (m, n, r_target) = (10usize, 10usize, 4usize);
        let mut best = u64::MAX;
        let mut best_pair = (0, 0);
        let mut unique = true;
        for r1 in 1..=(r_target * r_target) {
            for r2 in 1..=(r_target * r_target) {
                if r1 * r2 < r_target * r_target {
                    continue;
                }
                let obj = ((r1 + r2) * (m + n)) as u64;
                if obj < best {
                    best = obj;
                    best_pair = (r1, r2);
                    unique = true;
                } else if obj == best {
                    unique = false;
                }
            }
        }
        assert_eq!(best_pair, optimal_inner_rank(r_target).unwrap());
        assert!(unique);
        assert_eq!(best, (2 * r_target * (m + n)) as u64);
    }

    #[test]
    fn min_full_rank_examples() {
        assert_eq!(min_full_rank(100, 100), 10);
        assert_eq!(min_full_rank(1, 1), 1);
        assert_eq!(min_full_rank(50, 200), 8);
        assert_eq!(min_full_rank(256, 256), 16);
        // Direct check of the defining inequality on a sweep.
        for d in 1..200 {
            let r = min_full_rank(d, d + 3);
            assert!(r * r >= d);
            assert!(r == 1 || (r - 1) * (r - 1) < d);
        }
    }

    #[test]
    fn rank_from_gamma_endpoints_and_midpoint() {
        let fc = LayerShape::Fc {
            out: 256,
            input: 256,
        };
        let b0 = rank_from_gamma(&fc, 0.0).unwrap();
        assert_eq!((b0.r_min, b0.r_max, b0.r), (16, 64, 16));
        let b1 = rank_from_gamma(&fc, 1.0).unwrap();
        assert_eq!(b1.r, 64);
        let bh = rank_from_gamma(&fc, 0.5).unwrap();
        assert_eq!(bh.r, 40);
        assert!(!bh.degenerate);

        // Exhaustive scan oracle for r_max: largest r with count <= original.
        let original = param_count(Scheme::Original, &fc, 1).unwrap();
        for r in 1..=b1.r_max {
            assert!(param_count(Scheme::FedParaMatrix, &fc, r).unwrap() <= original);
        }
        assert!(param_count(Scheme::FedParaMatrix, &fc, b1.r_max + 1).unwrap() > original);
    }

    #[test]
    fn rank_from_gamma_rejects_bad_gamma() {
        let fc = LayerShape::Fc { out: 8, input: 8 };
        assert!(rank_from_gamma(&fc, -0.1).is_err());
        assert!(rank_from_gamma(&fc, 1.1).is_err());
    }

    #[test]
    fn rank_from_gamma_degenerate_layer_falls_back() {
        // 2x2 layer: original count 4, FedPara at r = 1 costs 8 > 4.
        let fc = LayerShape::Fc { out: 2, input: 2 };
        let b = rank_from_gamma(&fc, 0.5).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.r, b.r_min);
    }

    #[test]
    fn param_count_table_reference_row() {
        let fc = LayerShape::Fc {
            out: 256,
            input: 256,
        };
        let conv = LayerShape::Conv {
            out_ch: 256,
            in_ch: 256,
            k1: 3,
            k2: 3,
        };
        assert_eq!(param_count(Scheme::Original, &fc, 1).unwrap(), 65536);
        assert_eq!(param_count(Scheme::LowRank, &fc, 16).unwrap(), 16384);
        assert_eq!(param_count(Scheme::FedParaMatrix, &fc, 16).unwrap(), 16384);
        assert_eq!(param_count(Scheme::Original, &conv, 1).unwrap(), 589824);
        assert_eq!(param_count(Scheme::LowRank, &conv, 16).unwrap(), 20992);
        assert_eq!(param_count(Scheme::FedParaMatrix, &conv, 16).unwrap(), 81920);
        assert_eq!(param_count(Scheme::FedParaTensor, &conv, 16).unwrap(), 20992);

        assert_eq!(max_rank(Scheme::Original, &fc, 1), 256);
        assert_eq!(max_rank(Scheme::LowRank, &fc, 16), 32);
        assert_eq!(max_rank(Scheme::FedParaMatrix, &fc, 16), 256);
        assert_eq!(max_rank(Scheme::Original, &conv, 1), 256);
        assert_eq!(max_rank(Scheme::LowRank, &conv, 16), 32);
        assert_eq!(max_rank(Scheme::FedParaMatrix, &conv, 16), 256);
        assert_eq!(max_rank(Scheme::FedParaTensor, &conv, 16), 256);
    }

    #[test]
    fn param_count_monotone_in_rank_and_within_budget() {
        let shapes = [
            LayerShape::Fc {
                out: 64,
                input: 32,
            },
            LayerShape::Conv {
                out_ch: 32,
                in_ch: 16,
                k1: 3,
                k2: 3,
            },
        ];
        for shape in &shapes {
            let scheme = match shape {
                LayerShape::Fc { .. } => Scheme::FedParaMatrix,
                LayerShape::Conv { .. } => Scheme::FedParaTensor,
            };
            let budget = rank_from_gamma(shape, 1.0).unwrap();
            let mut prev = 0;
            for r in 1..=budget.r_max {
                let c = param_count(scheme, shape, r).unwrap();
                assert!(c > prev);
                prev = c;
            }
            assert!(prev <= param_count(Scheme::Original, shape, 1).unwrap());
        }
    }

    #[test]
    fn init_factors_deterministic_and_seed_sensitive() {
        let fc = LayerShape::Fc {
            out: 16,
            input: 12,
        };
        let mut a = stream_rng(9, Stream::Init, 0);
        let mut b = stream_rng(9, Stream::Init, 0);
        let mut c = stream_rng(10, Stream::Init, 0);
        let wa = init_factors(&fc, Scheme::FedParaMatrix, 4, Nonlinearity::None, &mut a).unwrap();
        let wb = init_factors(&fc, Scheme::FedParaMatrix, 4, Nonlinearity::None, &mut b).unwrap();
        let wc = init_factors(&fc, Scheme::FedParaMatrix, 4, Nonlinearity::None, &mut c).unwrap();
        assert_eq!(wa, wb);
        assert_ne!(wa, wc);
    }

    #[test]
    fn init_factors_composed_variance_near_he_target() {
        let fc = LayerShape::Fc {
            out: 100,
            input: 100,
        };
        let target = 2.0 / 100.0;
        for scheme in [
            Scheme::Original,
            Scheme::LowRank,
            Scheme::FedParaMatrix,
            Scheme::PFedPara,
        ] {
            let mut rng = stream_rng(11, Stream::Init, scheme as u64);
            let w = init_factors(&fc, scheme, 10, Nonlinearity::None, &mut rng).unwrap();
            let composed = w.compose().unwrap();
            let n = composed.len() as f64;
            let mean = composed.data().iter().sum::<f64>() / n;
            let var = composed
                .data()
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / n;
            assert!(
                var < 3.0 * target && var > target / 3.0,
                "{scheme:?}: composed variance {var} vs He target {target}"
            );
        }
    }

    #[test]
    fn init_factors_tensor_variance_near_he_target() {
        let conv = LayerShape::Conv {
            out_ch: 24,
            in_ch: 24,
            k1: 3,
            k2: 3,
        };
        let target = 2.0 / (24.0 * 9.0);
        let mut rng = stream_rng(12, Stream::Init, 0);
        let w = init_factors(&conv, Scheme::FedParaTensor, 5, Nonlinearity::None, &mut rng)
            .unwrap();
        let composed = w.compose().unwrap();
        let n = composed.len() as f64;
        let var = composed.data().iter().map(|x| x * x).sum::<f64>() / n;
        assert!(var < 3.0 * target && var > target / 3.0);
    }

    #[test]
    fn global_tensor_names_hide_local_factors() {
        let mut rng = stream_rng(13, Stream::Init, 0);
        let fc = LayerShape::Fc { out: 8, input: 8 };
        let w = init_factors(&fc, Scheme::PFedPara, 3, Nonlinearity::None, &mut rng).unwrap();
        assert_eq!(w.global_tensor_names(), vec!["x1", "y1"]);
        let w = init_factors(&fc, Scheme::FedParaMatrix, 3, Nonlinearity::None, &mut rng).unwrap();
        assert_eq!(w.global_tensor_names(), vec!["x1", "y1", "x2", "y2"]);
    }
}
