//! Independent closed-form and brute-force references for the optimizer and
//! diagnostic layers.

use rand_distr::{Distribution, LogNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::{gram_rows, matmul, spd_inv_power, sym_eig, DenseMatrix, LinalgError};
use crate::diagnostics::{self, DiagError};
use crate::optim::{
    adam_step, AdamState, OptimError, Optimizer, ParamBlock, SoapState, StepConfig,
};
use crate::problems::{
    correlated_cov, equicorrelated_cov, FeatureGenerator, LinearAERD, Objective, ProblemError,
    QuarticObjective, TwoLayerNetRD,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("degenerate instance: {0}")]
    Degenerate(String),
    #[error("step with lr {lr} did not descend ({before} -> {after})")]
    NonDescent { lr: f64, before: f64, after: f64 },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

fn unit(v: &DenseMatrix) -> Result<DenseMatrix> {
    let n = v.frobenius_norm();
    if n == 0.0 {
        return Err(OracleError::Degenerate("zero direction".into()));
    }
    Ok(v.scale(1.0 / n))
}

fn check_positive_diag(d: &[f64]) -> Result<()> {
    if d.is_empty() || d.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(OracleError::Invalid {
            field: "d_diag",
            reason: "entries must be positive".into(),
        });
    }
    Ok(())
}

/// Frozen-preconditioner Adam on a quadratic, seen in `q = D^{1/2} p`
/// coordinates where it follows `q_{t+1} = (I − ηB) q_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedQuadratic {
    pub b_matrix: DenseMatrix,
    pub d_diag: Vec<f64>,
    pub lr: f64,
}

impl WhitenedQuadratic {
    pub fn new(b_matrix: DenseMatrix, d_diag: Vec<f64>, lr: f64) -> Result<Self> {
        check_positive_diag(&d_diag)?;
        if b_matrix.shape() != (d_diag.len(), d_diag.len()) {
            return Err(OracleError::Invalid {
                field: "b_matrix",
                reason: format!(
                    "shape {:?} for {} coordinates",
                    b_matrix.shape(),
                    d_diag.len()
                ),
            });
        }
        let eig = sym_eig(&b_matrix, 1e-12)?;
        if eig.eigenvalues[0] <= 0.0 {
            return Err(OracleError::Invalid {
                field: "b_matrix",
                reason: "not positive definite".into(),
            });
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OracleError::Invalid {
                field: "lr",
                reason: format!("{lr} is not positive"),
            });
        }
        Ok(Self {
            b_matrix,
            d_diag,
            lr,
        })
    }

    /// `B = c D^{−1/2} H D^{−1/2}`.
    pub fn from_hessian(hessian: &DenseMatrix, d_diag: Vec<f64>, c: f64, lr: f64) -> Result<Self> {
        check_positive_diag(&d_diag)?;
        let b = DenseMatrix::from_fn(hessian.rows(), hessian.cols(), |i, j| {
            c * hessian[(i, j)] / (d_diag[i] * d_diag[j]).sqrt()
        });
        Self::new(b, d_diag, lr)
    }

    /// Hessian whose frozen-Adam dynamics (with `√v = D`) produce this `B`.
    pub fn hessian(&self) -> DenseMatrix {
        let d = &self.d_diag;
        DenseMatrix::from_fn(d.len(), d.len(), |i, j| {
            self.b_matrix[(i, j)] * (d[i] * d[j]).sqrt()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterCosine {
    pub exact: f64,
    /// `1 − ½ η² Var_u(B)`.
    pub taylor: f64,
}

/// `(1 − η μ₁) / √(1 − 2η μ₁ + η² μ₂)` with `μ₁ = uᵀBu`, `μ₂ = uᵀB²u`.
pub fn adam_inter_cosine_exact(inst: &WhitenedQuadratic, u: &DenseMatrix) -> Result<InterCosine> {
    let u = unit(u)?;
    let bu = matmul(&inst.b_matrix, &u)?;
    let mu1 = u.dot(&bu)?;
    let mu2 = bu.dot(&bu)?;
    let eta = inst.lr;
    let denom_sq = 1.0 - 2.0 * eta * mu1 + eta * eta * mu2;
    if denom_sq <= 1e-300 {
        return Err(OracleError::Degenerate(format!(
            "denominator² = {denom_sq:e}"
        )));
    }
    Ok(InterCosine {
        exact: (1.0 - eta * mu1) / denom_sq.sqrt(),
        taylor: 1.0 - 0.5 * eta * eta * (mu2 - mu1 * mu1),
    })
}

/// Runs two frozen-moment Adam steps (β₁ = 0, `√v = D`) on the quadratic
/// with Hessian `D^{1/2} B D^{1/2}`, started where `q₀ ∝ u`, and returns
/// the cosine between `q₀` and `q₁`.
pub fn simulate_adam_inter_cosine(inst: &WhitenedQuadratic, u: &DenseMatrix) -> Result<f64> {
    let u = unit(u)?;
    let d = &inst.d_diag;
    let n = d.len();
    let h = inst.hessian();
    // q₀ = −D^{−1/2} H e₀ = u  ⇒  e₀ = −H⁻¹ D^{1/2} u
    let h_inv = spd_inv_power(&h, 1.0, 0.0)?;
    let target = DenseMatrix::from_fn(n, 1, |i, _| d[i].sqrt() * u[(i, 0)]);
    let e0 = matmul(&h_inv, &target)?.scale(-1.0);
    let mut adam = AdamState::new(0.0, 0.999, f64::MIN_POSITIVE)?;
    let v: Vec<f64> = d.iter().map(|x| x * x).collect();
    adam.freeze_with(&[ParamBlock::new("theta", DenseMatrix::col(&v)?)]);
    let cfg = StepConfig::new(inst.lr)?;
    let mut params = vec![ParamBlock::new("theta", e0)];
    let mut qs = Vec::with_capacity(2);
    for _ in 0..2 {
        let g = vec![ParamBlock::new("theta", matmul(&h, &params[0].value)?)];
        let out = adam_step(&mut adam, &params, &g, &cfg)?;
        let q: Vec<f64> = (0..n)
            .map(|i| d[i].sqrt() * out.update[0].value[(i, 0)] / inst.lr)
            .collect();
        qs.push(q);
        params = out.params;
    }
    Ok(diagnostics::cosine(&qs[0], &qs[1])?.value())
}

/// Random `(B, u, η)` with `B = MMᵀ + 0.1 I`, `η λmax(B) ∈ [0.05, 1.9]`
/// and `D` entries in `[0.2, 5]`, all from stream 0 of `seed`.
pub fn random_whitened_instance(seed: u64, dim: usize) -> Result<(WhitenedQuadratic, DenseMatrix)> {
    let mut r = rng::stream(seed, 0);
    let m = rng::normal_matrix(&mut r, dim, dim);
    let b = gram_rows(&m).add(&DenseMatrix::identity(dim).scale(0.1))?;
    let lmax = *sym_eig(&b, 1e-14)?.eigenvalues.last().expect("dim >= 1");
    let uniform = |lo: f64, hi: f64| Uniform::new(lo, hi).expect("literal bounds");
    let eta = uniform(0.05, 1.9).sample(&mut r) / lmax;
    let d: Vec<f64> = (0..dim).map(|_| uniform(0.2, 5.0).sample(&mut r)).collect();
    let u = rng::normal_matrix(&mut r, dim, 1);
    Ok((WhitenedQuadratic::new(b, d, eta)?, u))
}

/// Component Hessians, a diagonal preconditioner and an approach direction.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraLimitInstance {
    pub h_r: DenseMatrix,
    pub h_d: DenseMatrix,
    pub d_diag: Vec<f64>,
    pub direction: DenseMatrix,
}

pub fn rotation(angle_rad: f64) -> DenseMatrix {
    let (s, c) = angle_rad.sin_cos();
    DenseMatrix::from_rows(&[vec![c, -s], vec![s, c]]).expect("2x2 literal")
}

impl IntraLimitInstance {
    pub fn new(
        h_r: DenseMatrix,
        h_d: DenseMatrix,
        d_diag: Vec<f64>,
        direction: DenseMatrix,
    ) -> Result<Self> {
        check_positive_diag(&d_diag)?;
        let n = d_diag.len();
        for (name, m) in [("h_r", &h_r), ("h_d", &h_d)] {
            if m.shape() != (n, n) {
                return Err(OracleError::Invalid {
                    field: if name == "h_r" { "h_r" } else { "h_d" },
                    reason: format!("shape {:?}", m.shape()),
                });
            }
        }
        Ok(Self {
            h_r,
            h_d,
            d_diag,
            direction: unit(&direction)?,
        })
    }

    /// `D = I`, `H_R = diag(10, 1)`, `H_D` the same matrix rotated by
    /// `angle_deg`, and `u = (1, −1)/√2`.
    pub fn rotated_pair(angle_deg: f64) -> Self {
        let base = DenseMatrix::from_diag(&[10.0, 1.0]);
        let rot = rotation(angle_deg.to_radians());
        let h_d = matmul(&matmul(&rot, &base).expect("2x2"), &rot.transpose()).expect("2x2");
        let u = DenseMatrix::col(&[1.0, -1.0]).expect("literal");
        Self::new(base, h_d, vec![1.0, 1.0], u).expect("valid by construction")
    }

    /// Diagonal `H_R`, `H_D`, `D` with entries in `[0.1, 10]` and a random direction.
    pub fn random_joint_diagonal(dim: usize, rng: &mut rng::LabRng) -> Self {
        let range = Uniform::new(0.1, 10.0).expect("valid range");
        let mut draw = || (0..dim).map(|_| range.sample(rng)).collect::<Vec<f64>>();
        let (hr, hd, d) = (draw(), draw(), draw());
        let u = DenseMatrix::col(&rng::normals(rng, dim)).expect("finite normals");
        Self::new(
            DenseMatrix::from_diag(&hr),
            DenseMatrix::from_diag(&hd),
            d,
            u,
        )
        .expect("valid by construction")
    }
}

/// Limit of Adam's intra-step cosine along `u`: `cos(D⁻¹H_R u, D⁻¹H_D u)`.
pub fn rho_adam(inst: &IntraLimitInstance) -> Result<f64> {
    let map = |h: &DenseMatrix| -> Result<Vec<f64>> {
        let hu = matmul(h, &inst.direction)?;
        Ok(hu
            .as_slice()
            .iter()
            .zip(&inst.d_diag)
            .map(|(x, d)| x / d)
            .collect())
    };
    let (a, b) = (map(&inst.h_r)?, map(&inst.h_d)?);
    diagnostics::cosine(&a, &b)
        .map(|c| c.value())
        .map_err(|_| OracleError::Degenerate("mapped direction vanished".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCosineStats {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator).
    pub std: f64,
}

impl SignCosineStats {
    fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            values,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Positive per-coordinate scalings applied to the sign vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ScalingLaw {
    Unit,
    LogNormal { sigma: f64 },
    Uniform { low: f64, high: f64 },
}

impl ScalingLaw {
    fn draw(&self, rng: &mut rng::LabRng, n: usize) -> Result<Vec<f64>> {
        let values: Vec<f64> = match *self {
            Self::Unit => vec![1.0; n],
            Self::LogNormal { sigma } => {
                let dist = LogNormal::new(0.0, sigma).map_err(|e| OracleError::Invalid {
                    field: "sigma",
                    reason: e.to_string(),
                })?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Self::Uniform { low, high } => {
                let dist = Uniform::new(low, high).map_err(|e| OracleError::Invalid {
                    field: "low/high",
                    reason: e.to_string(),
                })?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        if let Some(bad) = values.iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(OracleError::Invalid {
                field: "scaling",
                reason: format!("drew nonpositive scaling {bad}"),
            });
        }
        Ok(values)
    }
}

fn sign_products(m: usize, seed: u64) -> Result<Vec<f64>> {
    let ae = LinearAERD::small_init(m, 1.0, 0.0, seed)?;
    Ok(ae
        .w_e
        .as_slice()
        .iter()
        .zip(ae.w_d.as_slice())
        .map(|(a, b)| (a * b).signum())
        .collect())
}

/// `S = −(1/(M√2)) Σ sign(w̄_e,i w̄_d,i)` for seeds `0..seeds`, with the
/// same draws as [`LinearAERD::small_init`].
pub fn slln_sign_cosine(m: usize, seeds: u64) -> Result<SignCosineStats> {
    scaled_sign_cosine(m, seeds, ScalingLaw::Unit)
}

/// Generalized cosine
/// `−(1/M) Σ a_i b_i s_i / √((1/M Σ a_i²)(1/M Σ (b_i² + c_i²)))`, with the
/// scalings `a, b, c` drawn from stream 5 of each seed, independent of the
/// sign draws.
pub fn scaled_sign_cosine(m: usize, seeds: u64, law: ScalingLaw) -> Result<SignCosineStats> {
    if m == 0 || seeds == 0 {
        return Err(OracleError::Invalid {
            field: "m/seeds",
            reason: "both must be at least 1".into(),
        });
    }
    let values = (0..seeds)
        .map(|seed| {
            let signs = sign_products(m, seed)?;
            let mut r = rng::stream(seed, 5);
            let a = law.draw(&mut r, m)?;
            let b = law.draw(&mut r, m)?;
            let c = law.draw(&mut r, m)?;
            let mf = m as f64;
            let num: f64 = (0..m).map(|i| a[i] * b[i] * signs[i]).sum::<f64>() / mf;
            let ra: f64 = a.iter().map(|x| x * x).sum::<f64>() / mf;
            let rbc: f64 = (0..m).map(|i| b[i] * b[i] + c[i] * c[i]).sum::<f64>() / mf;
            Ok(-num / (ra * rbc).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SignCosineStats::from_values(values))
}

/// Intra-step cosine of sign-preconditioned rate and distortion gradients on
/// the linear autoencoder at its small initialization.
pub fn measured_sign_intra(m: usize, init_scale: f64, lambda: f64, seed: u64) -> Result<f64> {
    let ae = LinearAERD::small_init(m, init_scale, lambda, seed)?;
    let obj = Objective::LinearAe(ae.clone());
    let params = ae.initial_params();
    let parts = obj.grad_components(&params, None)?;
    let (wr, wd) = obj.weights();
    let scale = |blocks: &[ParamBlock], s: f64| crate::optim::scale_blocks(blocks, s);
    let p_r = Optimizer::Sign.precondition(&scale(&parts.rate, wr))?;
    let p_d = Optimizer::Sign.precondition(&scale(&parts.dist, wd))?;
    Ok(diagnostics::intra_step(&p_r, &p_d)?.value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub etas: Vec<f64>,
    /// `1 − S(p_t, p_{t+1})` per step size.
    pub one_minus_s: Vec<f64>,
    /// Least-squares slope of `log(1 − S)` against `log η`.
    pub slope: f64,
    /// `(1 − S)(η_k) / (1 − S)(η_{k+1})` for consecutive grid points.
    pub shrink_ratios: Vec<f64>,
}

fn newton_direction(
    obj: &QuarticObjective,
    theta: &DenseMatrix,
    damping: f64,
) -> Result<DenseMatrix> {
    let inv = spd_inv_power(&obj.hessian_at(theta), 1.0, damping)?;
    Ok(matmul(&inv, &obj.gradient(theta)?)?.scale(-1.0))
}

/// `1 − cos(u, v)` evaluated as `½‖û − v̂‖²` to keep precision near 1.
fn one_minus_cosine(u: &DenseMatrix, v: &DenseMatrix) -> Result<f64> {
    let diff = unit(u)?.sub(&unit(v)?)?;
    Ok(0.5 * diff.dot(&diff)?)
}

/// Damped-Newton inter-step misalignment from a common point `start` for
/// each step size.
pub fn newton_interstep_scaling(
    obj: &QuarticObjective,
    start: &DenseMatrix,
    eta_grid: &[f64],
    damping: f64,
) -> Result<ScalingFit> {
    if eta_grid.len() < 2 {
        return Err(OracleError::Invalid {
            field: "eta_grid",
            reason: "need at least two step sizes".into(),
        });
    }
    let p0 = newton_direction(obj, start, damping)?;
    let f0 = obj.value(start)?;
    let one_minus_s = eta_grid
        .iter()
        .map(|&eta| {
            let next = start.axpy(eta, &p0)?;
            let f1 = obj.value(&next)?;
            if f1 >= f0 {
                return Err(OracleError::NonDescent {
                    lr: eta,
                    before: f0,
                    after: f1,
                });
            }
            one_minus_cosine(&p0, &newton_direction(obj, &next, damping)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let xs: Vec<f64> = eta_grid.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = one_minus_s
        .iter()
        .map(|v| v.max(f64::MIN_POSITIVE).ln())
        .collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let shrink_ratios = one_minus_s.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(ScalingFit {
        etas: eta_grid.to_vec(),
        one_minus_s,
        slope: sxy / sxx,
        shrink_ratios,
    })
}

/// Settings for the SOAP-versus-Adam outlier growth comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KurtGrowthConfig {
    pub hidden: usize,
    pub channels: usize,
    pub batch: usize,
    pub eval_samples: usize,
    pub condition: f64,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub init_scale: f64,
    pub seeds: u64,
    pub eps: f64,
    pub refresh_period: u64,
    pub correlation: Correlation,
    /// Rescale SOAP's update so its preconditioner has the spectral norm of
    /// Adam's diagonal one, recomputed at every eigenbasis refresh.
    pub match_spectral_norms: bool,
    /// Start every latent channel at the same population energy.
    pub balanced_init: bool,
}

/// Shape of the input covariance used by [`kurt_growth_compare`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    /// Geometric spectrum in a random orthonormal basis.
    Rotated,
    /// Identity plus a shared all-ones mode.
    CommonMode,
}

impl Default for KurtGrowthConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            channels: 8,
            batch: 64,
            eval_samples: 512,
            condition: 100.0,
            steps: 200,
            lr: 1e-2,
            lambda: 0.01,
            init_scale: 0.3,
            seeds: 20,
            eps: 1e-8,
            refresh_period: 10,
            correlation: Correlation::CommonMode,
            match_spectral_norms: true,
            balanced_init: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub kurt_start: f64,
    pub kurt_end: f64,
    pub losses: Vec<f64>,
    pub net: TwoLayerNetRD,
}

impl TrainedRun {
    pub fn delta_kurt(&self) -> f64 {
        self.kurt_end - self.kurt_start
    }
}

#[derive(Debug, Clone)]
pub struct SeedComparison {
    pub seed: u64,
    pub generator: FeatureGenerator,
    pub eval_hidden: DenseMatrix,
    pub soap: TrainedRun,
    pub adam: TrainedRun,
}

#[derive(Debug, Clone)]
pub struct KurtGrowthReport {
    pub per_seed: Vec<SeedComparison>,
    pub mean_delta_soap: f64,
    pub mean_delta_adam: f64,
}

/// Batch seed for training step `step` of run `seed`.
/// `‖diag(1/(√v̂+ε))‖₂ / ‖Q diag(1/(√ṽ̂+ε)) Qᵀ‖₂`; the bias corrections
/// coincide because both states have taken the same number of steps.
fn spectral_ratio(adam: &AdamState, soap: &SoapState, id: &str, eps: f64) -> f64 {
    let floor = |v: &DenseMatrix| v.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let correction = 1.0 / (1.0 - adam.beta2.powi(adam.t as i32));
    match (adam.second_moment(id), soap.rotated_second_moment(id)) {
        (Some(v), Some(v_rot)) => {
            let soap_floor = (floor(v_rot) * correction).max(0.0).sqrt() + eps;
            let adam_floor = (floor(v) * correction).max(0.0).sqrt() + eps;
            soap_floor / adam_floor
        }
        _ => 1.0,
    }
}

fn train(
    net: &TwoLayerNetRD,
    gen: &FeatureGenerator,
    eval_hidden: &DenseMatrix,
    mut opt: Optimizer,
    cfg: &KurtGrowthConfig,
    seed: u64,
) -> Result<TrainedRun> {
    let obj = Objective::TwoLayer(net.clone());
    let kurt_of = |enc: &DenseMatrix| -> Result<f64> {
        Ok(diagnostics::kurt(&matmul(eval_hidden, &enc.transpose())?)?)
    };
    let mut params = net.initial_params();
    let kurt_start = kurt_of(&params[0].value)?;
    let mut losses = vec![obj.loss(&params, Some(eval_hidden))?.total];
    if cfg.lr > 0.0 {
        let step_cfg = StepConfig::new(cfg.lr)?;
        // a shadow Adam moment along the same trajectory sets the spectral
        // norm SOAP's preconditioner is matched to at each refresh
        let mut shadow = AdamState::new(0.9, 0.999, cfg.eps)?;
        let mut match_scale = vec![1.0; params.len()];
        for t in 0..cfg.steps {
            let batch = gen.sample_batch(cfg.batch, rng::derive_seed(seed, t as u64))?;
            let grads = obj.total_gradient(&params, Some(&batch))?;
            let out = opt.step(&params, &grads, &step_cfg)?;
            params = match &opt {
                Optimizer::Soap(soap) if cfg.match_spectral_norms => {
                    adam_step(&mut shadow, &params, &grads, &step_cfg)?;
                    if (t as u64).is_multiple_of(cfg.refresh_period) {
                        for (k, p) in params.iter().enumerate() {
                            match_scale[k] = spectral_ratio(&shadow, soap, &p.id, cfg.eps);
                        }
                    }
                    let scaled: Vec<ParamBlock> = out
                        .update
                        .iter()
                        .zip(&match_scale)
                        .map(|(u, &s)| ParamBlock::new(u.id.clone(), u.value.scale(s)))
                        .collect();
                    crate::optim::axpy_blocks(&params, 1.0, &scaled)?
                }
                _ => out.params,
            };
            losses.push(obj.loss(&params, Some(eval_hidden))?.total);
        }
    }
    Ok(TrainedRun {
        kurt_start,
        kurt_end: kurt_of(&params[0].value)?,
        losses,
        net: net.with_params(&params)?,
    })
}

/// Trains the same encoder/decoder pair under SOAP and Adam for each seed
/// and tracks the kurtosis of the latent features `X = H W` with
/// `W = encᵀ`. Both optimizers share β₁, β₂, ε and the learning rate.
pub fn kurt_growth_compare(cfg: &KurtGrowthConfig) -> Result<KurtGrowthReport> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(OracleError::Invalid {
            field: "lr",
            reason: format!("{} is negative", cfg.lr),
        });
    }
    let per_seed = (0..cfg.seeds)
        .map(|seed| {
            let cov = match cfg.correlation {
                _ if cfg.condition == 1.0 => DenseMatrix::identity(cfg.hidden),
                Correlation::Rotated => correlated_cov(cfg.hidden, cfg.condition, seed)?,
                Correlation::CommonMode => equicorrelated_cov(cfg.hidden, cfg.condition)?,
            };
            let mut net = TwoLayerNetRD::random(
                cfg.hidden,
                cfg.channels,
                cov.clone(),
                cfg.lambda,
                cfg.init_scale,
                seed,
            )?;
            if cfg.balanced_init {
                net = net.with_balanced_channels()?;
            }
            let gen = FeatureGenerator::new(cfg.batch, cov, net.enc.transpose())?;
            let eval_hidden =
                gen.sample_batch(cfg.eval_samples, rng::derive_seed(seed, u64::MAX - 1))?;
            let soap = Optimizer::Soap(SoapState::new(
                0.9,
                0.999,
                cfg.eps,
                0.95,
                cfg.refresh_period,
            )?);
            let adam = Optimizer::Adam(AdamState::new(0.9, 0.999, cfg.eps)?);
            Ok(SeedComparison {
                seed,
                soap: train(&net, &gen, &eval_hidden, soap, cfg, seed)?,
                adam: train(&net, &gen, &eval_hidden, adam, cfg, seed)?,
                generator: gen,
                eval_hidden,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len().max(1) as f64;
    Ok(KurtGrowthReport {
        mean_delta_soap: per_seed.iter().map(|s| s.soap.delta_kurt()).sum::<f64>() / n,
        mean_delta_adam: per_seed.iter().map(|s| s.adam.delta_kurt()).sum::<f64>() / n,
        per_seed,
    })
}

/// Named groups of oracle checks, as run by the `oracle` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    InterCosine,
    IntraLimit,
    SignCosine,
    NewtonScaling,
    KurtGrowth,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::InterCosine,
        Suite::IntraLimit,
        Suite::SignCosine,
        Suite::NewtonScaling,
        Suite::KurtGrowth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::InterCosine => "inter_cosine",
            Self::IntraLimit => "intra_limit",
            Self::SignCosine => "sign_cosine",
            Self::NewtonScaling => "newton_scaling",
            Self::KurtGrowth => "kurt_growth",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|x| x.name()).collect();
                format!("unknown suite `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// One row of the oracle table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub suite: String,
    pub check: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

fn check(suite: Suite, name: &str, value: f64, threshold: &str, pass: bool) -> OracleCheck {
    OracleCheck {
        suite: suite.name().into(),
        check: name.into(),
        value,
        threshold: threshold.into(),
        pass,
    }
}

/// Quartic-perturbed quadratic used by the Newton scaling checks.
pub fn reference_quartic() -> (QuarticObjective, DenseMatrix) {
    let h = DenseMatrix::from_rows(&[
        vec![3.0, 1.0, 0.0],
        vec![1.0, 2.0, 0.5],
        vec![0.0, 0.5, 1.0],
    ])
    .expect("literal");
    let obj = QuarticObjective::new(h, 0.1).expect("SPD literal");
    (obj, DenseMatrix::col(&[1.0, -0.5, 0.8]).expect("literal"))
}

pub const NEWTON_ETA_GRID: [f64; 4] = [0.4, 0.2, 0.1, 0.05];

pub fn run_suite(suite: Suite) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    match suite {
        Suite::InterCosine => {
            let mut worst: f64 = 0.0;
            for seed in 0..100u64 {
                let (inst, u) = random_whitened_instance(seed, 1 + (seed as usize % 6))?;
                let exact = adam_inter_cosine_exact(&inst, &u)?.exact;
                worst = worst.max((exact - simulate_adam_inter_cosine(&inst, &u)?).abs());
            }
            out.push(check(
                suite,
                "closed_form_vs_simulation_max_abs",
                worst,
                "<= 1e-12",
                worst <= 1e-12,
            ));
            let flip =
                WhitenedQuadratic::new(DenseMatrix::from_diag(&[1.0, 10.0]), vec![1.0, 1.0], 0.5)?;
            let c = adam_inter_cosine_exact(&flip, &DenseMatrix::col(&[0.0, 1.0])?)?.exact;
            out.push(check(suite, "flip_flop_cosine", c, "== -1", c == -1.0));
        }
        Suite::IntraLimit => {
            let rho = rho_adam(&IntraLimitInstance::rotated_pair(57.0))?;
            out.push(check(suite, "rho_rotated_57deg", rho, "< 0", rho < 0.0));
            let mut r = rng::stream(0, 6);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for _ in 0..10_000 {
                let rho = rho_adam(&IntraLimitInstance::random_joint_diagonal(4, &mut r))?;
                lo = lo.min(rho);
                hi = hi.max(rho);
            }
            out.push(check(
                suite,
                "rho_joint_diagonal_min",
                lo,
                ">= 0",
                lo >= 0.0,
            ));
            out.push(check(
                suite,
                "rho_joint_diagonal_max",
                hi,
                "<= 1",
                hi <= 1.0,
            ));
        }
        Suite::SignCosine => {
            let m = 4096;
            let stats = slln_sign_cosine(m, 200)?;
            out.push(check(
                suite,
                "slln_abs_mean",
                stats.mean.abs(),
                "< 0.02",
                stats.mean.abs() < 0.02,
            ));
            let ratio = stats.std * (2.0 * m as f64).sqrt();
            out.push(check(
                suite,
                "slln_std_over_theory",
                ratio,
                "in [0.7, 1.3]",
                (0.7..=1.3).contains(&ratio),
            ));
            let mut worst: f64 = 0.0;
            for (seed, expect) in stats.values.iter().enumerate() {
                worst = worst.max((measured_sign_intra(m, 1e-3, 0.5, seed as u64)? - expect).abs());
            }
            out.push(check(
                suite,
                "sign_step_vs_formula_max_abs",
                worst,
                "<= 1e-12",
                worst <= 1e-12,
            ));
            let scaled = scaled_sign_cosine(m, 200, ScalingLaw::LogNormal { sigma: 0.5 })?;
            out.push(check(
                suite,
                "lognormal_abs_mean",
                scaled.mean.abs(),
                "< 0.03",
                scaled.mean.abs() < 0.03,
            ));
        }
        Suite::NewtonScaling => {
            let (obj, start) = reference_quartic();
            let fit = newton_interstep_scaling(&obj, &start, &NEWTON_ETA_GRID, 0.0)?;
            let shrink = fit
                .shrink_ratios
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            out.push(check(
                suite,
                "min_shrink_per_halving",
                shrink,
                ">= 1.8",
                shrink >= 1.8,
            ));
            out.push(check(
                suite,
                "log_log_slope",
                fit.slope,
                ">= 0.9",
                fit.slope >= 0.9,
            ));
        }
        Suite::KurtGrowth => {
            let report = kurt_growth_compare(&KurtGrowthConfig::default())?;
            let gap = report.mean_delta_soap - report.mean_delta_adam;
            out.push(check(
                suite,
                "mean_delta_kurt_soap_minus_adam",
                gap,
                "<= 0",
                gap <= 0.0,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_instance(seed: u64, n: usize) -> (WhitenedQuadratic, DenseMatrix) {
        random_whitened_instance(seed, n).unwrap()
    }

    #[test]
    fn identity_b_gives_unit_cosine() {
        let inst = WhitenedQuadratic::new(DenseMatrix::identity(3), vec![1.0; 3], 0.7).unwrap();
        let c =
            adam_inter_cosine_exact(&inst, &DenseMatrix::col(&[0.3, -1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(c.exact, 1.0);
        assert_eq!(c.taylor, 1.0);
    }

    #[test]
    fn eigenvector_direction_gives_unit_cosine() {
        let inst =
            WhitenedQuadratic::new(DenseMatrix::from_diag(&[1.0, 4.0, 9.0]), vec![1.0; 3], 0.1)
                .unwrap();
        let c =
            adam_inter_cosine_exact(&inst, &DenseMatrix::col(&[0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert!((c.exact - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flip_flop_hand_value() {
        let inst =
            WhitenedQuadratic::new(DenseMatrix::from_diag(&[1.0, 10.0]), vec![1.0, 1.0], 0.5)
                .unwrap();
        let u = DenseMatrix::col(&[0.0, 1.0]).unwrap();
        assert_eq!(adam_inter_cosine_exact(&inst, &u).unwrap().exact, -1.0);
        assert!((simulate_adam_inter_cosine(&inst, &u).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_simulation() {
        for seed in 0..100 {
            let (inst, u) = random_instance(seed, 1 + (seed as usize % 6));
            let exact = adam_inter_cosine_exact(&inst, &u).unwrap().exact;
            let sim = simulate_adam_inter_cosine(&inst, &u).unwrap();
            assert!(
                (exact - sim).abs() <= 1e-12,
                "seed {seed}: {exact} vs {sim}"
            );
        }
    }

    #[test]
    fn taylor_error_is_cubic() {
        let (base, u) = random_instance(7, 4);
        let ratios: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&eta| {
                let inst = WhitenedQuadratic {
                    lr: eta,
                    ..base.clone()
                };
                let c = adam_inter_cosine_exact(&inst, &u).unwrap();
                (c.exact - c.taylor).abs() / eta.powi(3)
            })
            .collect();
        let bound = ratios[0].max(1e-3) * 10.0;
        assert!(ratios.iter().all(|&r| r <= bound), "{ratios:?}");
    }

    #[test]
    fn rho_cases() {
        let h = DenseMatrix::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let same = IntraLimitInstance::new(
            h.clone(),
            h,
            vec![0.5, 4.0],
            DenseMatrix::col(&[0.2, 0.9]).unwrap(),
        )
        .unwrap();
        assert!((rho_adam(&same).unwrap() - 1.0).abs() < 1e-15);
        assert!(rho_adam(&IntraLimitInstance::rotated_pair(57.0)).unwrap() < 0.0);
        let mut r = rng::stream(3, 0);
        for _ in 0..10_000 {
            let inst = IntraLimitInstance::random_joint_diagonal(4, &mut r);
            let rho = rho_adam(&inst).unwrap();
            assert!((0.0..=1.0).contains(&rho));
        }
    }

    #[test]
    fn colinear_images_give_unit_rho() {
        // H_D u = 3 H_R u by construction with a non-proportional H_D
        let h_r = DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let u = DenseMatrix::col(&[1.0, 0.0]).unwrap();
        let h_d = DenseMatrix::from_rows(&[vec![6.0, 1.5], vec![1.5, 7.0]]).unwrap();
        let inst = IntraLimitInstance::new(h_r, h_d, vec![2.0, 0.3], u).unwrap();
        assert!((rho_adam(&inst).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_coordinate_sign_cosine() {
        let s = slln_sign_cosine(1, 50).unwrap();
        assert!(s
            .values
            .iter()
            .all(|v| (v.abs() - 0.5f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn unit_scaling_reduces_to_plain_formula() {
        let a = slln_sign_cosine(37, 20).unwrap();
        let b = scaled_sign_cosine(37, 20, ScalingLaw::Unit).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_coordinate_scaled_cosine_collapses() {
        let law = ScalingLaw::LogNormal { sigma: 1.0 };
        let s = scaled_sign_cosine(1, 20, law).unwrap();
        for (seed, v) in s.values.iter().enumerate() {
            let mut r = rng::stream(seed as u64, 5);
            let _a = law.draw(&mut r, 1).unwrap();
            let b = law.draw(&mut r, 1).unwrap()[0];
            let c = law.draw(&mut r, 1).unwrap()[0];
            assert!((v.abs() - b / (b * b + c * c).sqrt()).abs() < 1e-14);
            assert!(v.abs() > 0.0 && v.abs() < 1.0);
        }
    }

    #[test]
    fn nonpositive_scaling_rejected() {
        let law = ScalingLaw::Uniform {
            low: -1.0,
            high: 1.0,
        };
        assert!(matches!(
            scaled_sign_cosine(64, 1, law),
            Err(OracleError::Invalid { .. })
        ));
    }

    #[test]
    fn sign_step_measurement_matches_formula() {
        let s = slln_sign_cosine(64, 10).unwrap();
        for (seed, expect) in s.values.iter().enumerate() {
            let got = measured_sign_intra(64, 1e-3, 0.5, seed as u64).unwrap();
            assert!((got - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn newton_on_pure_quadratic_keeps_direction() {
        let h = DenseMatrix::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let obj = QuarticObjective::new(h, 0.0).unwrap();
        let fit = newton_interstep_scaling(
            &obj,
            &DenseMatrix::col(&[1.0, -2.0]).unwrap(),
            &[0.4, 0.2, 0.1, 0.05],
            0.0,
        )
        .unwrap();
        assert!(
            fit.one_minus_s.iter().all(|&v| v <= 1e-12),
            "{:?}",
            fit.one_minus_s
        );
    }

    #[test]
    fn quartic_misalignment_shrinks_with_step() {
        let h = DenseMatrix::from_rows(&[
            vec![3.0, 1.0, 0.0],
            vec![1.0, 2.0, 0.5],
            vec![0.0, 0.5, 1.0],
        ])
        .unwrap();
        let obj = QuarticObjective::new(h, 0.1).unwrap();
        let start = DenseMatrix::col(&[1.0, -0.5, 0.8]).unwrap();
        let fit = newton_interstep_scaling(&obj, &start, &[0.4, 0.2, 0.1, 0.05], 0.0).unwrap();
        assert!(fit.shrink_ratios.iter().all(|&r| r >= 1.8), "{fit:?}");
        assert!(fit.slope >= 0.9);
        assert!(fit.one_minus_s.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn overshooting_step_is_not_descent() {
        let obj = QuarticObjective::new(DenseMatrix::identity(2), 0.0).unwrap();
        let err = newton_interstep_scaling(
            &obj,
            &DenseMatrix::col(&[1.0, 1.0]).unwrap(),
            &[2.5, 1.0],
            0.0,
        );
        assert!(matches!(err, Err(OracleError::NonDescent { .. })));
    }

    #[test]
    fn zero_lr_leaves_kurtosis_unchanged() {
        let cfg = KurtGrowthConfig {
            lr: 0.0,
            seeds: 2,
            steps: 5,
            ..KurtGrowthConfig::default()
        };
        let report = kurt_growth_compare(&cfg).unwrap();
        assert_eq!(report.mean_delta_soap, 0.0);
        assert_eq!(report.mean_delta_adam, 0.0);
    }

    proptest! {
        #[test]
        fn closed_form_cosine_in_range(seed in any::<u64>(), n in 1usize..6) {
            let (inst, u) = random_instance(seed, n);
            let c = adam_inter_cosine_exact(&inst, &u).unwrap().exact;
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        }
    }
}
