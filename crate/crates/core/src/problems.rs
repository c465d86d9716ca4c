//! Toy rate-distortion objectives with exact gradients.
//!
//! Parameters travel as [`ParamBlock`] lists. Quadratic-type objectives use a
//! single `n x 1` block named `theta`; the linear autoencoder uses `w_e` and
//! `w_d`; the two-layer net uses `enc` and `dec`.
//!
//! Each objective splits its loss into a rate and a distortion part and
//! reports how they combine through [`Objective::weights`]: the total
//! gradient is always `w_r * g_r + w_d * g_d`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::{gram_cols, matmul, sym_eig, sym_power, DenseMatrix, LinalgError, EIG_TOL};
use crate::optim::ParamBlock;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected parameter blocks {expected:?}, got {got:?}")]
    Blocks {
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("objective needs a data batch")]
    MissingBatch,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{0} has no exact Hessian")]
    NotQuadratic(&'static str),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub rate: f64,
    pub dist: f64,
}

/// Component gradients, aligned with the parameter blocks.
#[derive(Debug, Clone)]
pub struct GradParts {
    pub rate: Vec<ParamBlock>,
    pub dist: Vec<ParamBlock>,
}

fn check_shape(what: &str, m: &DenseMatrix, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(ProblemError::Shape {
            what: what.to_string(),
            expected,
            got: m.shape(),
        });
    }
    Ok(())
}

fn check_symmetric_psd(field: &'static str, m: &DenseMatrix, strict: bool) -> Result<()> {
    let eig = sym_eig(m, 1e-10)?;
    let floor = -1e-12 * m.frobenius_norm().max(1.0);
    let min = eig.eigenvalues[0];
    if (strict && min <= 0.0) || (!strict && min < floor) {
        return Err(ProblemError::Invalid {
            field,
            reason: format!("smallest eigenvalue {min:e}"),
        });
    }
    Ok(())
}

fn named<'a>(params: &'a [ParamBlock], ids: &[&str]) -> Result<Vec<&'a DenseMatrix>> {
    if params.len() != ids.len() || params.iter().zip(ids).any(|(p, id)| p.id != *id) {
        return Err(ProblemError::Blocks {
            expected: ids.iter().map(|s| s.to_string()).collect(),
            got: params.iter().map(|p| p.id.clone()).collect(),
        });
    }
    Ok(params.iter().map(|p| &p.value).collect())
}

fn theta_of(params: &[ParamBlock], dim: usize) -> Result<&DenseMatrix> {
    let theta = named(params, &["theta"])?[0];
    check_shape("theta", theta, (dim, 1))?;
    Ok(theta)
}

fn theta_block(value: DenseMatrix) -> Vec<ParamBlock> {
    vec![ParamBlock::new("theta", value)]
}

fn half_quad_form(h: &DenseMatrix, e: &DenseMatrix) -> Result<f64> {
    Ok(0.5 * e.dot(&matmul(h, e)?)?)
}

/// `L(θ) = ½ (θ − θ*)ᵀ H (θ − θ*)`, booked entirely as rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    pub hessian: DenseMatrix,
    pub anchor: DenseMatrix,
}

impl QuadraticObjective {
    pub fn new(hessian: DenseMatrix, anchor: DenseMatrix) -> Result<Self> {
        let n = anchor.rows();
        check_shape("anchor", &anchor, (n, 1))?;
        check_shape("hessian", &hessian, (n, n))?;
        check_symmetric_psd("hessian", &hessian, true)?;
        Ok(Self { hessian, anchor })
    }

    pub fn dim(&self) -> usize {
        self.anchor.rows()
    }

    pub fn gradient(&self, theta: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(matmul(&self.hessian, &theta.sub(&self.anchor)?)?)
    }
}

/// `L = L_R + λ L_D` with separately anchored quadratic components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiQuadraticRD {
    pub hessian_r: DenseMatrix,
    pub hessian_d: DenseMatrix,
    pub anchor_r: DenseMatrix,
    pub anchor_d: DenseMatrix,
    pub lambda: f64,
}

impl BiQuadraticRD {
    pub fn new(
        hessian_r: DenseMatrix,
        hessian_d: DenseMatrix,
        anchor_r: DenseMatrix,
        anchor_d: DenseMatrix,
        lambda: f64,
    ) -> Result<Self> {
        let n = anchor_r.rows();
        check_shape("anchor_r", &anchor_r, (n, 1))?;
        check_shape("anchor_d", &anchor_d, (n, 1))?;
        check_shape("hessian_r", &hessian_r, (n, n))?;
        check_shape("hessian_d", &hessian_d, (n, n))?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ProblemError::Invalid {
                field: "lambda",
                reason: format!("{lambda} is not positive"),
            });
        }
        check_symmetric_psd("hessian_r", &hessian_r, false)?;
        check_symmetric_psd("hessian_d", &hessian_d, false)?;
        check_symmetric_psd(
            "hessian_r + lambda * hessian_d",
            &hessian_r.axpy(lambda, &hessian_d)?,
            true,
        )?;
        Ok(Self {
            hessian_r,
            hessian_d,
            anchor_r,
            anchor_d,
            lambda,
        })
    }

    /// Both components share the optimum `anchor`.
    pub fn shared_anchor(
        hessian_r: DenseMatrix,
        hessian_d: DenseMatrix,
        anchor: DenseMatrix,
        lambda: f64,
    ) -> Result<Self> {
        Self::new(hessian_r, hessian_d, anchor.clone(), anchor, lambda)
    }

    pub fn dim(&self) -> usize {
        self.anchor_r.rows()
    }
}

/// `f(θ) = ½ θᵀHθ + α Σ θ_i⁴`: a quadratic with a smooth, Lipschitz-Hessian
/// perturbation. Booked entirely as rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarticObjective {
    pub hessian: DenseMatrix,
    pub alpha: f64,
}

impl QuarticObjective {
    pub fn new(hessian: DenseMatrix, alpha: f64) -> Result<Self> {
        if !hessian.is_square() {
            return Err(ProblemError::Invalid {
                field: "hessian",
                reason: "not square".into(),
            });
        }
        check_symmetric_psd("hessian", &hessian, true)?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(ProblemError::Invalid {
                field: "alpha",
                reason: format!("{alpha} is negative"),
            });
        }
        Ok(Self { hessian, alpha })
    }

    pub fn dim(&self) -> usize {
        self.hessian.rows()
    }

    pub fn value(&self, theta: &DenseMatrix) -> Result<f64> {
        let quartic: f64 = theta.as_slice().iter().map(|x| x.powi(4)).sum();
        Ok(half_quad_form(&self.hessian, theta)? + self.alpha * quartic)
    }

    pub fn gradient(&self, theta: &DenseMatrix) -> Result<DenseMatrix> {
        let cubic = theta.map(|x| 4.0 * self.alpha * x.powi(3));
        Ok(matmul(&self.hessian, theta)?.add(&cubic)?)
    }

    /// `H + diag(12 α θ²)`.
    pub fn hessian_at(&self, theta: &DenseMatrix) -> DenseMatrix {
        let mut h = self.hessian.clone();
        for (i, x) in theta.as_slice().iter().enumerate() {
            h[(i, i)] += 12.0 * self.alpha * x * x;
        }
        h
    }
}

/// Scalar-input linear autoencoder with `x ~ U[−1, 1]`, so `E[x²] = 1/3`.
///
/// `L_D = C (w_d·w_e − 1)²`, `L_R = C ‖w_e‖²`, and the total is
/// `L_D + λ L_R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAERD {
    pub latent_dim: usize,
    pub init_scale: f64,
    pub lambda: f64,
    pub w_e: DenseMatrix,
    pub w_d: DenseMatrix,
}

pub const LINEAR_AE_C: f64 = 1.0 / 3.0;

impl LinearAERD {
    /// Entries of `w_e` then `w_d` drawn i.i.d. `N(0, ε²)` from stream 0 of `seed`.
    pub fn small_init(latent_dim: usize, init_scale: f64, lambda: f64, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(ProblemError::Invalid {
                field: "latent_dim",
                reason: "must be at least 1".into(),
            });
        }
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(ProblemError::Invalid {
                field: "init_scale",
                reason: format!("{init_scale} is not positive"),
            });
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ProblemError::Invalid {
                field: "lambda",
                reason: format!("{lambda} is negative"),
            });
        }
        let mut r = rng::stream(seed, 0);
        let w_e = rng::normal_matrix(&mut r, latent_dim, 1).scale(init_scale);
        let w_d = rng::normal_matrix(&mut r, latent_dim, 1).scale(init_scale);
        Ok(Self {
            latent_dim,
            init_scale,
            lambda,
            w_e,
            w_d,
        })
    }

    pub fn c_const(&self) -> f64 {
        LINEAR_AE_C
    }

    pub fn initial_params(&self) -> Vec<ParamBlock> {
        vec![
            ParamBlock::new("w_e", self.w_e.clone()),
            ParamBlock::new("w_d", self.w_d.clone()),
        ]
    }

    fn unpack<'a>(&self, params: &'a [ParamBlock]) -> Result<(&'a DenseMatrix, &'a DenseMatrix)> {
        let v = named(params, &["w_e", "w_d"])?;
        check_shape("w_e", v[0], (self.latent_dim, 1))?;
        check_shape("w_d", v[1], (self.latent_dim, 1))?;
        Ok((v[0], v[1]))
    }
}

/// Linear encoder/decoder pair trained on squared reconstruction error with a
/// `‖z‖²` rate surrogate. Batches are `n x d`, one sample per row:
/// `Z = X encᵀ`, `X̂ = Z decᵀ`, rate `= ‖Z‖²/n`, dist `= ‖X̂ − X‖²/n`,
/// total `= dist + λ rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerNetRD {
    pub enc: DenseMatrix,
    pub dec: DenseMatrix,
    pub input_cov: DenseMatrix,
    pub lambda: f64,
}

impl TwoLayerNetRD {
    pub fn new(
        enc: DenseMatrix,
        dec: DenseMatrix,
        input_cov: DenseMatrix,
        lambda: f64,
    ) -> Result<Self> {
        let (m, d) = enc.shape();
        check_shape("dec", &dec, (d, m))?;
        check_shape("input_cov", &input_cov, (d, d))?;
        check_symmetric_psd("input_cov", &input_cov, true)?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ProblemError::Invalid {
                field: "lambda",
                reason: format!("{lambda} is negative"),
            });
        }
        Ok(Self {
            enc,
            dec,
            input_cov,
            lambda,
        })
    }

    /// Weights drawn i.i.d. `N(0, scale²)` from stream 1 of `seed`.
    pub fn random(
        input_dim: usize,
        latent_dim: usize,
        input_cov: DenseMatrix,
        lambda: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::stream(seed, 1);
        let enc = rng::normal_matrix(&mut r, latent_dim, input_dim).scale(scale);
        let dec = rng::normal_matrix(&mut r, input_dim, latent_dim).scale(scale);
        Self::new(enc, dec, input_cov, lambda)
    }

    /// Rescales each encoder row so every latent channel carries the mean
    /// population energy `rᵀΣr`, which puts the population kurt at 1.
    pub fn with_balanced_channels(self) -> Result<Self> {
        let sigma_r = matmul(&self.enc, &self.input_cov)?;
        let energies: Vec<f64> = (0..self.enc.rows())
            .map(|j| {
                sigma_r
                    .row(j)
                    .iter()
                    .zip(self.enc.row(j))
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if energies.iter().any(|&e| e <= 0.0) {
            return Err(ProblemError::Invalid {
                field: "enc",
                reason: "a latent channel has zero energy".into(),
            });
        }
        let mean = energies.iter().sum::<f64>() / energies.len() as f64;
        let enc = DenseMatrix::from_fn(self.enc.rows(), self.enc.cols(), |j, k| {
            self.enc[(j, k)] * (mean / energies[j]).sqrt()
        });
        Ok(Self { enc, ..self })
    }

    pub fn input_dim(&self) -> usize {
        self.enc.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc.rows()
    }

    pub fn initial_params(&self) -> Vec<ParamBlock> {
        vec![
            ParamBlock::new("enc", self.enc.clone()),
            ParamBlock::new("dec", self.dec.clone()),
        ]
    }

    /// Same net with weights taken from `params`.
    pub fn with_params(&self, params: &[ParamBlock]) -> Result<Self> {
        let (enc, dec) = self.unpack(params)?;
        Ok(Self {
            enc: enc.clone(),
            dec: dec.clone(),
            ..self.clone()
        })
    }

    fn unpack<'a>(&self, params: &'a [ParamBlock]) -> Result<(&'a DenseMatrix, &'a DenseMatrix)> {
        let v = named(params, &["enc", "dec"])?;
        check_shape("enc", v[0], self.enc.shape())?;
        check_shape("dec", v[1], self.dec.shape())?;
        Ok((v[0], v[1]))
    }

    fn check_batch(&self, batch: &DenseMatrix) -> Result<()> {
        if batch.rows() == 0 {
            return Err(ProblemError::EmptyBatch);
        }
        check_shape("batch", batch, (batch.rows(), self.input_dim()))
    }

    /// Latent codes `Z = X encᵀ`.
    pub fn encode(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_batch(batch)?;
        Ok(matmul(batch, &self.enc.transpose())?)
    }

    pub fn decode(&self, latents: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(matmul(latents, &self.dec.transpose())?)
    }

    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<DenseMatrix> {
        gaussian_rows(&self.input_cov, n, seed)
    }

    fn forward(
        &self,
        enc: &DenseMatrix,
        dec: &DenseMatrix,
        batch: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        self.check_batch(batch)?;
        let z = matmul(batch, &enc.transpose())?;
        let err = matmul(&z, &dec.transpose())?.sub(batch)?;
        Ok((z, err))
    }

    fn loss_at(
        &self,
        enc: &DenseMatrix,
        dec: &DenseMatrix,
        batch: &DenseMatrix,
    ) -> Result<LossParts> {
        let (z, err) = self.forward(enc, dec, batch)?;
        let n = batch.rows() as f64;
        let rate = z.dot(&z)? / n;
        let dist = err.dot(&err)? / n;
        Ok(LossParts {
            total: dist + self.lambda * rate,
            rate,
            dist,
        })
    }

    fn grads_at(
        &self,
        enc: &DenseMatrix,
        dec: &DenseMatrix,
        batch: &DenseMatrix,
    ) -> Result<GradParts> {
        let (z, err) = self.forward(enc, dec, batch)?;
        let k = 2.0 / batch.rows() as f64;
        let enc_rate = matmul(&z.transpose(), batch)?.scale(k);
        let dec_dist = matmul(&err.transpose(), &z)?.scale(k);
        let back = matmul(&err, dec)?;
        let enc_dist = matmul(&back.transpose(), batch)?.scale(k);
        Ok(GradParts {
            rate: vec![
                ParamBlock::new("enc", enc_rate),
                ParamBlock::new("dec", DenseMatrix::zeros(dec.rows(), dec.cols())),
            ],
            dist: vec![
                ParamBlock::new("enc", enc_dist),
                ParamBlock::new("dec", dec_dist),
            ],
        })
    }

    /// Per-layer Kronecker factors `(L, R)` such that `R ⊗ L` approximates the
    /// curvature of the total loss with respect to the column-stacked weight
    /// `vec(W)`. Returned in `[enc, dec]` order.
    pub fn capture_kron_factors(
        &self,
        batch: &DenseMatrix,
        mode: FactorMode,
    ) -> Result<Vec<KronFactors>> {
        let (z, err) = self.forward(&self.enc, &self.dec, batch)?;
        let n = batch.rows() as f64;
        let enc_r = gram_cols(batch).scale(1.0 / n);
        let dec_r = gram_cols(&z).scale(1.0 / n);
        let (enc_l, dec_l) = match mode {
            FactorMode::Empirical => {
                let dec_delta = err.scale(2.0);
                let enc_delta = matmul(&err, &self.dec)?
                    .scale(2.0)
                    .axpy(2.0 * self.lambda, &z)?;
                (
                    gram_cols(&enc_delta).scale(1.0 / n),
                    gram_cols(&dec_delta).scale(1.0 / n),
                )
            }
            FactorMode::GaussNewton => {
                let m = self.latent_dim();
                let enc_l = gram_cols(&self.dec)
                    .scale(2.0)
                    .axpy(2.0 * self.lambda, &DenseMatrix::identity(m))?;
                (enc_l, DenseMatrix::identity(self.input_dim()).scale(2.0))
            }
        };
        Ok(vec![
            KronFactors {
                id: "enc".into(),
                left: enc_l,
                right: enc_r,
            },
            KronFactors {
                id: "dec".into(),
                left: dec_l,
                right: dec_r,
            },
        ])
    }
}

/// How the output-side factor is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    /// Batch mean of outer products of backpropagated loss gradients.
    Empirical,
    /// Batch mean of the loss Hessian with respect to the layer output,
    /// which makes `R ⊗ L` the exact Gauss-Newton block.
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KronFactors {
    pub id: String,
    pub left: DenseMatrix,
    pub right: DenseMatrix,
}

/// Zero-mean Gaussian rows with covariance `cov`.
pub fn gaussian_rows(cov: &DenseMatrix, n: usize, seed: u64) -> Result<DenseMatrix> {
    if n == 0 {
        return Err(ProblemError::EmptyBatch);
    }
    let root = sym_power(cov, 0.5, 0.0)?;
    let white = rng::normal_matrix(&mut rng::stream(seed, 2), n, cov.rows());
    Ok(matmul(&white, &root)?)
}

/// Random SPD matrix with eigenvalues spaced geometrically from 1 down to
/// `1/condition` in a random orthonormal basis.
pub fn correlated_cov(dim: usize, condition: f64, seed: u64) -> Result<DenseMatrix> {
    if !(condition >= 1.0 && condition.is_finite()) {
        return Err(ProblemError::Invalid {
            field: "condition",
            reason: format!("{condition} is below 1"),
        });
    }
    let mut r = rng::stream(seed, 3);
    let g = rng::normal_matrix(&mut r, dim, dim);
    let basis = sym_eig(&g.add(&g.transpose())?, EIG_TOL)?.eigenvectors;
    let spectrum: Vec<f64> = (0..dim)
        .map(|i| {
            let frac = if dim > 1 {
                i as f64 / (dim - 1) as f64
            } else {
                0.0
            };
            condition.powf(-frac)
        })
        .collect();
    let scaled = DenseMatrix::from_fn(dim, dim, |i, j| basis[(i, j)] * spectrum[j]);
    let cov = matmul(&scaled, &basis.transpose())?;
    Ok(DenseMatrix::from_fn(dim, dim, |i, j| {
        0.5 * (cov[(i, j)] + cov[(j, i)])
    }))
}

/// `(I + c 11ᵀ)` scaled to unit top eigenvalue, with `c` chosen so the
/// condition number is `condition`: every coordinate shares one common mode.
pub fn equicorrelated_cov(dim: usize, condition: f64) -> Result<DenseMatrix> {
    if !(condition >= 1.0 && condition.is_finite()) || dim == 0 {
        return Err(ProblemError::Invalid {
            field: "condition",
            reason: format!("{condition} is below 1"),
        });
    }
    let c = (condition - 1.0) / dim as f64;
    Ok(DenseMatrix::from_fn(dim, dim, |i, j| {
        let base = if i == j { 1.0 } else { 0.0 };
        (base + c) / condition
    }))
}

/// Linearized feature map `X = H W` with Gaussian hidden inputs `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGenerator {
    pub samples: usize,
    pub channels: usize,
    pub hidden: usize,
    pub input_cov: DenseMatrix,
    pub weights: DenseMatrix,
}

impl FeatureGenerator {
    pub fn new(samples: usize, input_cov: DenseMatrix, weights: DenseMatrix) -> Result<Self> {
        let (hidden, channels) = weights.shape();
        check_shape("input_cov", &input_cov, (hidden, hidden))?;
        check_symmetric_psd("input_cov", &input_cov, true)?;
        if samples == 0 {
            return Err(ProblemError::EmptyBatch);
        }
        Ok(Self {
            samples,
            channels,
            hidden,
            input_cov,
            weights,
        })
    }

    /// Hidden inputs `H`, `n x hidden`.
    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<DenseMatrix> {
        gaussian_rows(&self.input_cov, n, seed)
    }

    /// Features `H W`, `n x channels`.
    pub fn features(&self, hidden_batch: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(matmul(hidden_batch, &self.weights)?)
    }
}

/// The objective family the harness and oracles drive.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Quadratic(QuadraticObjective),
    BiQuadratic(BiQuadraticRD),
    Quartic(QuarticObjective),
    LinearAe(LinearAERD),
    TwoLayer(TwoLayerNetRD),
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Quadratic(_) => "quadratic",
            Self::BiQuadratic(_) => "bi_quadratic",
            Self::Quartic(_) => "quartic",
            Self::LinearAe(_) => "linear_ae",
            Self::TwoLayer(_) => "two_layer",
        }
    }

    /// Whether evaluation needs a data batch.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Self::TwoLayer(_))
    }

    /// `(w_r, w_d)` with total gradient `w_r g_r + w_d g_d`.
    pub fn weights(&self) -> (f64, f64) {
        match self {
            Self::Quadratic(_) | Self::Quartic(_) => (1.0, 1.0),
            Self::BiQuadratic(o) => (1.0, o.lambda),
            Self::LinearAe(o) => (o.lambda, 1.0),
            Self::TwoLayer(o) => (o.lambda, 1.0),
        }
    }

    pub fn loss(&self, params: &[ParamBlock], batch: Option<&DenseMatrix>) -> Result<LossParts> {
        match self {
            Self::Quadratic(o) => {
                let theta = theta_of(params, o.dim())?;
                let rate = half_quad_form(&o.hessian, &theta.sub(&o.anchor)?)?;
                Ok(LossParts {
                    total: rate,
                    rate,
                    dist: 0.0,
                })
            }
            Self::BiQuadratic(o) => {
                let theta = theta_of(params, o.dim())?;
                let rate = half_quad_form(&o.hessian_r, &theta.sub(&o.anchor_r)?)?;
                let dist = half_quad_form(&o.hessian_d, &theta.sub(&o.anchor_d)?)?;
                Ok(LossParts {
                    total: rate + o.lambda * dist,
                    rate,
                    dist,
                })
            }
            Self::Quartic(o) => {
                let rate = o.value(theta_of(params, o.dim())?)?;
                Ok(LossParts {
                    total: rate,
                    rate,
                    dist: 0.0,
                })
            }
            Self::LinearAe(o) => {
                let (w_e, w_d) = o.unpack(params)?;
                let c = o.c_const();
                let dist = c * (w_d.dot(w_e)? - 1.0).powi(2);
                let rate = c * w_e.dot(w_e)?;
                Ok(LossParts {
                    total: dist + o.lambda * rate,
                    rate,
                    dist,
                })
            }
            Self::TwoLayer(o) => {
                let (enc, dec) = o.unpack(params)?;
                o.loss_at(enc, dec, batch.ok_or(ProblemError::MissingBatch)?)
            }
        }
    }

    pub fn grad_components(
        &self,
        params: &[ParamBlock],
        batch: Option<&DenseMatrix>,
    ) -> Result<GradParts> {
        match self {
            Self::Quadratic(o) => {
                let g = o.gradient(theta_of(params, o.dim())?)?;
                let zero = DenseMatrix::zeros(o.dim(), 1);
                Ok(GradParts {
                    rate: theta_block(g),
                    dist: theta_block(zero),
                })
            }
            Self::BiQuadratic(o) => {
                let theta = theta_of(params, o.dim())?;
                Ok(GradParts {
                    rate: theta_block(matmul(&o.hessian_r, &theta.sub(&o.anchor_r)?)?),
                    dist: theta_block(matmul(&o.hessian_d, &theta.sub(&o.anchor_d)?)?),
                })
            }
            Self::Quartic(o) => {
                let g = o.gradient(theta_of(params, o.dim())?)?;
                Ok(GradParts {
                    rate: theta_block(g),
                    dist: theta_block(DenseMatrix::zeros(o.dim(), 1)),
                })
            }
            Self::LinearAe(o) => {
                let (w_e, w_d) = o.unpack(params)?;
                let c = o.c_const();
                let k = 2.0 * c * (w_d.dot(w_e)? - 1.0);
                Ok(GradParts {
                    rate: vec![
                        ParamBlock::new("w_e", w_e.scale(2.0 * c)),
                        ParamBlock::new("w_d", DenseMatrix::zeros(o.latent_dim, 1)),
                    ],
                    dist: vec![
                        ParamBlock::new("w_e", w_d.scale(k)),
                        ParamBlock::new("w_d", w_e.scale(k)),
                    ],
                })
            }
            Self::TwoLayer(o) => {
                let (enc, dec) = o.unpack(params)?;
                o.grads_at(enc, dec, batch.ok_or(ProblemError::MissingBatch)?)
            }
        }
    }

    pub fn total_gradient(
        &self,
        params: &[ParamBlock],
        batch: Option<&DenseMatrix>,
    ) -> Result<Vec<ParamBlock>> {
        let parts = self.grad_components(params, batch)?;
        let (wr, wd) = self.weights();
        Ok(parts
            .rate
            .iter()
            .zip(&parts.dist)
            .map(|(r, d)| {
                let v = r
                    .value
                    .scale(wr)
                    .axpy(wd, &d.value)
                    .expect("component shapes agree");
                ParamBlock::new(r.id.clone(), v)
            })
            .collect())
    }

    /// Constant Hessian of the total loss for quadratic objectives.
    pub fn exact_hessian(&self) -> Result<DenseMatrix> {
        match self {
            Self::Quadratic(o) => Ok(o.hessian.clone()),
            Self::BiQuadratic(o) => Ok(o.hessian_r.axpy(o.lambda, &o.hessian_d)?),
            other => Err(ProblemError::NotQuadratic(other.name())),
        }
    }
}
