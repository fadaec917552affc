//! Fusing context and candidate encodings into the classifier input.
//!
//! Three strategies: plain concatenation, concatenation through a one-layer
//! ReLU MLP, and compact bilinear pooling (CBP). CBP sketches both sides
//! with Count Sketch and circularly convolves the sketches, which equals the
//! sketch of the flattened outer product; an optional signed-square-root
//! plus L2 normalization (on by default) tames its value range. Sketch
//! plans are pure functions of their seed, so a saved model only needs to
//! remember the seed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomGrad, Tape, Tensor, VarId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    ConcatLinear,
    ConcatMlp,
    CbpLinear,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::ConcatLinear,
        FusionStrategy::ConcatMlp,
        FusionStrategy::CbpLinear,
    ];
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<FusionStrategy> {
        match s {
            "concat_linear" => Ok(FusionStrategy::ConcatLinear),
            "concat_mlp" => Ok(FusionStrategy::ConcatMlp),
            "cbp_linear" => Ok(FusionStrategy::CbpLinear),
            other => Err(Error::config(format!(
                "unknown fusion strategy {other:?} (expected concat_linear, concat_mlp or cbp_linear)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionStrategy::ConcatLinear => "concat_linear",
            FusionStrategy::ConcatMlp => "concat_mlp",
            FusionStrategy::CbpLinear => "cbp_linear",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Hidden width of the MLP variant.
    pub mlp_hidden: usize,
    /// Sketch length of the CBP variant; must be a power of two so the
    /// convolution runs on the FFT path.
    pub cbp_dim: usize,
    /// Signed square root + L2 normalization after CBP.
    pub cbp_normalize: bool,
}

impl FusionConfig {
    pub fn new(strategy: FusionStrategy) -> FusionConfig {
        FusionConfig {
            strategy,
            mlp_hidden: 512,
            cbp_dim: 8192,
            cbp_normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            FusionStrategy::ConcatMlp if self.mlp_hidden == 0 => {
                Err(Error::config("mlp_hidden must be positive"))
            }
            FusionStrategy::CbpLinear if !self.cbp_dim.is_power_of_two() => Err(Error::config(
                format!("cbp_dim must be a power of two, got {}", self.cbp_dim),
            )),
            _ => Ok(()),
        }
    }

    /// Width of the fused vector the classifier sees.
    pub fn fused_width(&self, ctx_width: usize, hidden: usize) -> usize {
        match self.strategy {
            FusionStrategy::ConcatLinear => ctx_width + hidden,
            FusionStrategy::ConcatMlp => self.mlp_hidden,
            FusionStrategy::CbpLinear => self.cbp_dim,
        }
    }
}

/// Count Sketch projection plan: each input coordinate gets one output
/// bucket and one sign. Fully determined by `(seed, input_dim, output_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountSketchPlan {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hash: Vec<usize>,
    pub sign: Vec<f64>,
}

impl CountSketchPlan {
    pub fn from_seed(seed: u64, input_dim: usize, output_dim: usize) -> CountSketchPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hash = (0..input_dim)
            .map(|_| rng.gen_range(0..output_dim))
            .collect();
        let sign = (0..input_dim)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        CountSketchPlan {
            input_dim,
            output_dim,
            hash,
            sign,
        }
    }

    /// `out[hash[j]] += sign[j] * x[j]`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim);
        let mut out = vec![0.0; self.output_dim];
        for (j, &v) in x.iter().enumerate() {
            out[self.hash[j]] += self.sign[j] * v;
        }
        out
    }
}

#[derive(Debug)]
struct CountSketchGrad {
    plan: Arc<CountSketchPlan>,
}

impl CustomGrad for CountSketchGrad {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        // The forward pass is a signed scatter; its transpose is a signed
        // gather.
        let x = inputs[0];
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let grow = grad_out.row(r);
            for j in 0..self.plan.input_dim {
                data.push(self.plan.sign[j] * grow[self.plan.hash[j]]);
            }
        }
        vec![Tensor::from_vec(x.shape(), data).expect("shape preserved")]
    }
}

/// Row-wise Count Sketch of `[B, m]` into `[B, D]`, differentiable.
pub fn count_sketch(tape: &mut Tape, x: VarId, plan: &Arc<CountSketchPlan>) -> Result<VarId> {
    let t = tape.value(x);
    if t.cols() != plan.input_dim {
        return Err(Error::shape(
            "count_sketch",
            format!(
                "input width {} but plan expects {}",
                t.cols(),
                plan.input_dim
            ),
        ));
    }
    let rows = t.rows();
    let mut data = Vec::with_capacity(rows * plan.output_dim);
    for r in 0..rows {
        data.extend(plan.apply(t.row(r)));
    }
    let shape = if t.rank() == 2 {
        vec![rows, plan.output_dim]
    } else {
        vec![plan.output_dim]
    };
    let value = Tensor::from_vec(&shape, data)?;
    Ok(tape.custom(
        &[x],
        value,
        Arc::new(CountSketchGrad {
            plan: Arc::clone(plan),
        }),
    ))
}

const SIGNED_SQRT_EPS: f64 = 1e-8;
const L2_NORM_EPS_SQ: f64 = 1e-12;

/// `x / sqrt(|x| + eps)`, elementwise: the smooth form of the signed square
/// root, with a derivative that is defined at zero.
#[derive(Debug)]
struct SignedSqrtGrad;

impl CustomGrad for SignedSqrtGrad {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| {
                let a = v.abs();
                g * (a / 2.0 + SIGNED_SQRT_EPS) / (a + SIGNED_SQRT_EPS).powf(1.5)
            })
            .collect();
        vec![Tensor::from_vec(x.shape(), data).expect("shape preserved")]
    }
}

pub fn signed_sqrt(tape: &mut Tape, x: VarId) -> VarId {
    let t = tape.value(x);
    let data = t
        .data()
        .iter()
        .map(|&v| v / (v.abs() + SIGNED_SQRT_EPS).sqrt())
        .collect();
    let value = Tensor::from_vec(t.shape(), data).expect("shape preserved");
    tape.custom(&[x], value, Arc::new(SignedSqrtGrad))
}

/// Row-wise `x / sqrt(|x|^2 + eps)`.
#[derive(Debug)]
struct L2NormalizeGrad;

impl CustomGrad for L2NormalizeGrad {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let x = inputs[0];
        let c = x.cols();
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let gr = grad_out.row(r);
            let m = (xr.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS_SQ).sqrt();
            let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
            let m3 = m * m * m;
            for j in 0..c {
                data.push(gr[j] / m - xr[j] * xg / m3);
            }
        }
        vec![Tensor::from_vec(x.shape(), data).expect("shape preserved")]
    }
}

pub fn l2_normalize(tape: &mut Tape, x: VarId) -> VarId {
    let t = tape.value(x);
    let mut data = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        let xr = t.row(r);
        let m = (xr.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS_SQ).sqrt();
        data.extend(xr.iter().map(|&v| v / m));
    }
    let value = Tensor::from_vec(t.shape(), data).expect("shape preserved");
    tape.custom(&[x], value, Arc::new(L2NormalizeGrad))
}

/// Trainable parameters of the MLP fusion variant, as tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w: VarId,
    pub b: VarId,
}

/// Builds the fused `[B, fused_width]` vector from an optional context and
/// the candidate encoding.
pub fn fuse(
    tape: &mut Tape,
    cfg: &FusionConfig,
    context: Option<VarId>,
    candidate: VarId,
    mlp: Option<MlpVars>,
    plans: Option<(&Arc<CountSketchPlan>, &Arc<CountSketchPlan>)>,
) -> Result<VarId> {
    match cfg.strategy {
        FusionStrategy::ConcatLinear => match context {
            Some(ctx) => tape.concat(&[ctx, candidate]),
            None => Ok(candidate),
        },
        FusionStrategy::ConcatMlp => {
            let mlp = mlp.ok_or_else(|| Error::config("concat_mlp fusion needs mlp parameters"))?;
            let cat = match context {
                Some(ctx) => tape.concat(&[ctx, candidate])?,
                None => candidate,
            };
            let z = tape.matmul(cat, mlp.w)?;
            let z = tape.add_bias(z, mlp.b)?;
            Ok(tape.relu(z))
        }
        FusionStrategy::CbpLinear => {
            let ctx = context.ok_or_else(|| {
                Error::config("cbp_linear fusion needs a context; context mode none has none")
            })?;
            let (plan_ctx, plan_cand) =
                plans.ok_or_else(|| Error::config("cbp_linear fusion needs sketch plans"))?;
            if plan_ctx.output_dim != plan_cand.output_dim {
                return Err(Error::shape(
                    "fuse",
                    "sketch plans must share an output dimension",
                ));
            }
            let sa = count_sketch(tape, ctx, plan_ctx)?;
            let sb = count_sketch(tape, candidate, plan_cand)?;
            let mut v = tape.circular_convolve(sa, sb)?;
            if cfg.cbp_normalize {
                v = signed_sqrt(tape, v);
                v = l2_normalize(tape, v);
            }
            Ok(v)
        }
    }
}
