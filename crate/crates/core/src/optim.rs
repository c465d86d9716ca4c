//! Optimizer suite over named parameter blocks.
//!
//! Every step returns the applied `update`, which already carries the leading
//! minus sign and the learning rate, so `params' = params + update`.
//! [`Optimizer::precondition`] applies the current preconditioner to an
//! arbitrary gradient without touching state and without momentum; it returns
//! `−P g` (no learning rate).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::{
    gram_cols, gram_rows, matmul, spd_inv_power, sym_eig, DenseMatrix, LinalgError, EIG_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("expected {expected} gradient blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
    #[error("block {index}: parameter id {param:?} does not match gradient id {grad:?}")]
    BlockId {
        index: usize,
        param: String,
        grad: String,
    },
    #[error("block {id:?}: parameter shape {param:?} does not match gradient shape {grad:?}")]
    Shape {
        id: String,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("invalid hyperparameter {name} = {value}: {reason}")]
    Hyper {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("Newton preconditioner has no Hessian set")]
    MissingHessian,
    #[error("Hessian is {rows}x{cols} but parameters have {params} entries")]
    HessianShape {
        rows: usize,
        cols: usize,
        params: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// A named weight matrix (or `n x 1` vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub id: String,
    pub value: DenseMatrix,
}

impl ParamBlock {
    pub fn new(id: impl Into<String>, value: DenseMatrix) -> Self {
        Self {
            id: id.into(),
            value,
        }
    }
}

/// Blocks with the same ids as `like` but different values.
pub fn relabel(like: &[ParamBlock], values: Vec<DenseMatrix>) -> Vec<ParamBlock> {
    like.iter()
        .zip(values)
        .map(|(b, v)| ParamBlock::new(b.id.clone(), v))
        .collect()
}

pub fn scale_blocks(blocks: &[ParamBlock], s: f64) -> Vec<ParamBlock> {
    blocks
        .iter()
        .map(|b| ParamBlock::new(b.id.clone(), b.value.scale(s)))
        .collect()
}

/// `a + s * b`, blockwise.
pub fn axpy_blocks(a: &[ParamBlock], s: f64, b: &[ParamBlock]) -> Result<Vec<ParamBlock>> {
    check_aligned(a, b)?;
    a.iter()
        .zip(b)
        .map(|(x, y)| Ok(ParamBlock::new(x.id.clone(), x.value.axpy(s, &y.value)?)))
        .collect()
}

/// Concatenates block values in the given order (row-major within a block).
pub fn flatten(blocks: &[ParamBlock]) -> Vec<f64> {
    blocks
        .iter()
        .flat_map(|b| b.value.as_slice().iter().copied())
        .collect()
}

/// Inverse of [`flatten`] using `like` for ids and shapes.
pub fn unflatten(like: &[ParamBlock], flat: &[f64]) -> Result<Vec<ParamBlock>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(like.len());
    for b in like {
        let (r, c) = b.value.shape();
        let value = DenseMatrix::from_vec(r, c, flat[offset..offset + r * c].to_vec())?;
        offset += r * c;
        out.push(ParamBlock::new(b.id.clone(), value));
    }
    Ok(out)
}

pub fn check_aligned(params: &[ParamBlock], grads: &[ParamBlock]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(OptimError::BlockCount {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.id != g.id {
            return Err(OptimError::BlockId {
                index,
                param: p.id.clone(),
                grad: g.id.clone(),
            });
        }
        if p.value.shape() != g.value.shape() {
            return Err(OptimError::Shape {
                id: p.id.clone(),
                param: p.value.shape(),
                grad: g.value.shape(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    lr: f64,
}

impl StepConfig {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::Hyper {
                name: "lr",
                value: lr,
                reason: "must be positive and finite",
            });
        }
        Ok(Self { lr })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: Vec<ParamBlock>,
    pub update: Vec<ParamBlock>,
}

fn apply(params: &[ParamBlock], update: Vec<ParamBlock>) -> Result<StepOutput> {
    let params = axpy_blocks(params, 1.0, &update)?;
    Ok(StepOutput { params, update })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_unit_interval(name: &'static str, value: f64) -> Result<()> {
    if !(0.0..1.0).contains(&value) {
        return Err(OptimError::Hyper {
            name,
            value,
            reason: "must lie in [0, 1)",
        });
    }
    Ok(())
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(OptimError::Hyper {
            name,
            value,
            reason: "must be positive",
        });
    }
    Ok(())
}

pub fn sgd_step(
    params: &[ParamBlock],
    grads: &[ParamBlock],
    cfg: &StepConfig,
) -> Result<StepOutput> {
    check_aligned(params, grads)?;
    apply(params, scale_blocks(grads, -cfg.lr))
}

pub fn sign_step(
    params: &[ParamBlock],
    grads: &[ParamBlock],
    cfg: &StepConfig,
) -> Result<StepOutput> {
    check_aligned(params, grads)?;
    let update = grads
        .iter()
        .map(|g| ParamBlock::new(g.id.clone(), g.value.map(|x| -cfg.lr * sign(x))))
        .collect();
    apply(params, update)
}

#[derive(Debug, Clone)]
struct Moments {
    m: DenseMatrix,
    v: DenseMatrix,
}

/// Adam with bias correction.
///
/// With `freeze_second_moment` set, `v` is never updated and is used as the
/// already bias-corrected second moment. This reproduces the frozen
/// diagonal-preconditioner model used by the oracles.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub freeze_second_moment: bool,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_unit_interval("beta1", beta1)?;
        check_unit_interval("beta2", beta2)?;
        check_positive("eps", eps)?;
        Ok(Self {
            beta1,
            beta2,
            eps,
            t: 0,
            freeze_second_moment: false,
            moments: BTreeMap::new(),
        })
    }

    /// Fixes `v` per block; subsequent steps leave it untouched.
    pub fn freeze_with(&mut self, v: &[ParamBlock]) {
        self.freeze_second_moment = true;
        for b in v {
            let entry = self.moments.entry(b.id.clone()).or_insert_with(|| Moments {
                m: DenseMatrix::zeros(b.value.rows(), b.value.cols()),
                v: b.value.clone(),
            });
            entry.v = b.value.clone();
        }
    }

    pub fn second_moment(&self, id: &str) -> Option<&DenseMatrix> {
        self.moments.get(id).map(|m| &m.v)
    }

    fn v_hat(&self, v: &DenseMatrix) -> DenseMatrix {
        if self.freeze_second_moment {
            v.clone()
        } else if self.t == 0 {
            DenseMatrix::zeros(v.rows(), v.cols())
        } else {
            v.scale(1.0 / (1.0 - self.beta2.powi(self.t as i32)))
        }
    }

    fn precondition(&self, grads: &[ParamBlock]) -> Vec<ParamBlock> {
        grads
            .iter()
            .map(|g| {
                let denom = match self.moments.get(&g.id) {
                    Some(mom) => self.v_hat(&mom.v).map(|v| v.sqrt() + self.eps),
                    None => g.value.map(|_| self.eps),
                };
                let p = DenseMatrix::from_fn(g.value.rows(), g.value.cols(), |i, j| {
                    -g.value[(i, j)] / denom[(i, j)]
                });
                ParamBlock::new(g.id.clone(), p)
            })
            .collect()
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8).expect("default hyperparameters are valid")
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &[ParamBlock],
    grads: &[ParamBlock],
    cfg: &StepConfig,
) -> Result<StepOutput> {
    check_aligned(params, grads)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let frozen = state.freeze_second_moment;
    let mut update = Vec::with_capacity(grads.len());
    for g in grads {
        let (r, c) = g.value.shape();
        let mom = state
            .moments
            .entry(g.id.clone())
            .or_insert_with(|| Moments {
                m: DenseMatrix::zeros(r, c),
                v: DenseMatrix::zeros(r, c),
            });
        let gs = g.value.as_slice();
        for (m, &x) in mom.m.as_mut_slice().iter_mut().zip(gs) {
            *m = b1 * *m + (1.0 - b1) * x;
        }
        if !frozen {
            for (v, &x) in mom.v.as_mut_slice().iter_mut().zip(gs) {
                *v = b2 * *v + (1.0 - b2) * x * x;
            }
        }
        let mc = 1.0 - b1.powi(t);
        let vc = if frozen { 1.0 } else { 1.0 - b2.powi(t) };
        let data = mom
            .m
            .as_slice()
            .iter()
            .zip(mom.v.as_slice())
            .map(|(&m, &v)| -cfg.lr * (m / mc) / ((v / vc).sqrt() + eps))
            .collect();
        update.push(ParamBlock::new(
            g.id.clone(),
            DenseMatrix::from_vec(r, c, data)?,
        ));
    }
    apply(params, update)
}

/// Sum-of-squares diagonal preconditioner.
#[derive(Debug, Clone)]
pub struct AdagradState {
    pub eps: f64,
    accum: BTreeMap<String, DenseMatrix>,
}

impl AdagradState {
    pub fn new(eps: f64) -> Result<Self> {
        check_positive("eps", eps)?;
        Ok(Self {
            eps,
            accum: BTreeMap::new(),
        })
    }

    pub fn accumulator(&self, id: &str) -> Option<&DenseMatrix> {
        self.accum.get(id)
    }

    fn direction(&self, g: &ParamBlock) -> DenseMatrix {
        match self.accum.get(&g.id) {
            Some(acc) => DenseMatrix::from_fn(g.value.rows(), g.value.cols(), |i, j| {
                -g.value[(i, j)] / (acc[(i, j)].sqrt() + self.eps)
            }),
            None => g.value.scale(-1.0 / self.eps),
        }
    }
}

impl Default for AdagradState {
    fn default() -> Self {
        Self::new(1e-8).expect("default eps is valid")
    }
}

pub fn adagrad_step(
    state: &mut AdagradState,
    params: &[ParamBlock],
    grads: &[ParamBlock],
    cfg: &StepConfig,
) -> Result<StepOutput> {
    check_aligned(params, grads)?;
    let mut update = Vec::with_capacity(grads.len());
    for g in grads {
        let acc = state
            .accum
            .entry(g.id.clone())
            .or_insert_with(|| DenseMatrix::zeros(g.value.rows(), g.value.cols()));
        for (a, &x) in acc.as_mut_slice().iter_mut().zip(g.value.as_slice()) {
            *a += x * x;
        }
        update.push(ParamBlock::new(
            g.id.clone(),
            state.direction(g).scale(cfg.lr),
        ));
    }
    apply(params, update)
}

/// Inverse-root exponent applied to each Kronecker factor. Vector blocks are
/// preconditioned from the left only and use the full square-root inverse.
const TWO_SIDED_ROOT: f64 = 0.25;
const ONE_SIDED_ROOT: f64 = 0.5;

#[derive(Debug, Clone)]
struct ShampooBlock {
    l_ema: DenseMatrix,
    r_ema: Option<DenseMatrix>,
    l_root: DenseMatrix,
    r_root: Option<DenseMatrix>,
}

#[derive(Debug, Clone)]
pub struct ShampooState {
    pub ema_decay: f64,
    pub damping: f64,
    pub update_freq: u64,
    pub t: u64,
    blocks: BTreeMap<String, ShampooBlock>,
}

fn fresh_factors(shape: (usize, usize)) -> (DenseMatrix, Option<DenseMatrix>) {
    let (r, c) = shape;
    let right = (c > 1).then(|| DenseMatrix::zeros(c, c));
    (DenseMatrix::zeros(r, r), right)
}

fn ema_into(ema: &mut DenseMatrix, decay: f64, sample: &DenseMatrix) {
    for (e, &s) in ema.as_mut_slice().iter_mut().zip(sample.as_slice()) {
        *e = decay * *e + (1.0 - decay) * s;
    }
}

impl ShampooState {
    pub fn new(ema_decay: f64, damping: f64, update_freq: u64) -> Result<Self> {
        check_unit_interval("ema_decay", ema_decay)?;
        check_positive("damping", damping)?;
        if update_freq == 0 {
            return Err(OptimError::Hyper {
                name: "update_freq",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        Ok(Self {
            ema_decay,
            damping,
            update_freq,
            t: 0,
            blocks: BTreeMap::new(),
        })
    }

    fn roots(
        &self,
        l: &DenseMatrix,
        r: Option<&DenseMatrix>,
    ) -> Result<(DenseMatrix, Option<DenseMatrix>)> {
        match r {
            Some(r) => Ok((
                spd_inv_power(l, TWO_SIDED_ROOT, self.damping)?,
                Some(spd_inv_power(r, TWO_SIDED_ROOT, self.damping)?),
            )),
            None => Ok((spd_inv_power(l, ONE_SIDED_ROOT, self.damping)?, None)),
        }
    }

    /// Overwrites a block's factor EMAs and refreshes its cached roots.
    /// `right` must be `None` exactly for vector blocks.
    pub fn set_factors(
        &mut self,
        id: &str,
        left: DenseMatrix,
        right: Option<DenseMatrix>,
    ) -> Result<()> {
        let (l_root, r_root) = self.roots(&left, right.as_ref())?;
        self.blocks.insert(
            id.to_string(),
            ShampooBlock {
                l_ema: left,
                r_ema: right,
                l_root,
                r_root,
            },
        );
        Ok(())
    }

    pub fn factors(&self, id: &str) -> Option<(&DenseMatrix, Option<&DenseMatrix>)> {
        self.blocks.get(id).map(|b| (&b.l_ema, b.r_ema.as_ref()))
    }

    fn direction(&self, g: &ParamBlock) -> Result<DenseMatrix> {
        let owned;
        let (l_root, r_root) = match self.blocks.get(&g.id) {
            Some(b) => (&b.l_root, b.r_root.as_ref()),
            None => {
                let (l, r) = fresh_factors(g.value.shape());
                owned = self.roots(&l, r.as_ref())?;
                (&owned.0, owned.1.as_ref())
            }
        };
        let mut p = matmul(l_root, &g.value)?;
        if let Some(r_root) = r_root {
            p = matmul(&p, r_root)?;
        }
        Ok(p.scale(-1.0))
    }
}

impl Default for ShampooState {
    fn default() -> Self {
        Self::new(0.95, 1e-6, 10).expect("default hyperparameters are valid")
    }
}

pub fn shampoo_step(
    state: &mut ShampooState,
    params: &[ParamBlock],
    grads: &[ParamBlock],
    cfg: &StepConfig,
) -> Result<StepOutput> {
    check_aligned(params, grads)?;
    let refresh = state.t.is_multiple_of(state.update_freq);
    let decay = state.ema_decay;
    for g in grads {
        if !state.blocks.contains_key(&g.id) {
            let (l, r) = fresh_factors(g.value.shape());
            state.set_factors(&g.id, l, r)?;
        }
        let (l_ema, r_ema) = {
            let b = state.blocks.get_mut(&g.id).expect("inserted above");
            ema_into(&mut b.l_ema, decay, &gram_rows(&g.value));
            if let Some(r) = b.r_ema.as_mut() {
                ema_into(r, decay, &gram_cols(&g.value));
            }
            (b.l_ema.clone(), b.r_ema.clone())
        };
        if refresh {
            let (l_root, r_root) = state.roots(&l_ema, r_ema.as_ref())?;
            let b = state.blocks.get_mut(&g.id).expect("inserted above");
            b.l_root = l_root;
            b.r_root = r_root;
        }
    }
    state.t += 1;
    let update = grads
        .iter()
        .map(|g| {
            Ok(ParamBlock::new(
                g.id.clone(),
                state.direction(g)?.scale(cfg.lr),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    apply(params, update)
}

#[derive(Debug, Clone)]
struct SoapBlock {
    l_ema: DenseMatrix,
    r_ema: Option<DenseMatrix>,
    q_l: DenseMatrix,
    q_r: Option<DenseMatrix>,
    m: DenseMatrix,
    v: DenseMatrix,
}

/// Adam run in the eigenbasis of the Shampoo factors.
#[derive(Debug, Clone)]
pub struct SoapState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
    pub refresh_period: u64,
    pub t: u64,
    blocks: BTreeMap<String, SoapBlock>,
}

fn rotate_in(q_l: &DenseMatrix, q_r: Option<&DenseMatrix>, g: &DenseMatrix) -> Result<DenseMatrix> {
    let mut x = matmul(&q_l.transpose(), g)?;
    if let Some(q_r) = q_r {
        x = matmul(&x, q_r)?;
    }
    Ok(x)
}

fn rotate_out(
    q_l: &DenseMatrix,
    q_r: Option<&DenseMatrix>,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    let mut g = matmul(q_l, x)?;
    if let Some(q_r) = q_r {
        g = matmul(&g, &q_r.transpose())?;
    }
    Ok(g)
}

impl SoapState {
    pub fn new(
        beta1: f64,
        beta2: f64,
        eps: f64,
        ema_decay: f64,
        refresh_period: u64,
    ) -> Result<Self> {
        check_unit_interval("beta1", beta1)?;
        check_unit_interval("beta2", beta2)?;
        check_unit_interval("ema_decay", ema_decay)?;
        check_positive("eps", eps)?;
        if refresh_period == 0 {
            return Err(OptimError::Hyper {
                name: "refresh_period",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            ema_decay,
            refresh_period,
            t: 0,
            blocks: BTreeMap::new(),
        })
    }

    pub fn bases(&self, id: &str) -> Option<(&DenseMatrix, Option<&DenseMatrix>)> {
        self.blocks.get(id).map(|b| (&b.q_l, b.q_r.as_ref()))
    }

    pub fn factors(&self, id: &str) -> Option<(&DenseMatrix, Option<&DenseMatrix>)> {
        self.blocks.get(id).map(|b| (&b.l_ema, b.r_ema.as_ref()))
    }

    /// Rotated second moment of a block.
    pub fn rotated_second_moment(&self, id: &str) -> Option<&DenseMatrix> {
        self.blocks.get(id).map(|b| &b.v)
    }

    /// Recomputes every block's eigenbases from the current factor EMAs and
    /// carries the rotated moments over to the new bases.
    pub fn refresh(&mut self) -> Result<()> {
        for b in self.blocks.values_mut() {
            refresh_block(b)?;
        }
        Ok(())
    }

    fn v_hat(&self, v: &DenseMatrix) -> DenseMatrix {
        if self.t == 0 {
            DenseMatrix::zeros(v.rows(), v.cols())
        } else {
            v.scale(1.0 / (1.0 - self.beta2.powi(self.t as i32)))
        }
    }

    fn direction(&self, g: &ParamBlock) -> Result<DenseMatrix> {
        match self.blocks.get(&g.id) {
            Some(b) => {
                let rotated = rotate_in(&b.q_l, b.q_r.as_ref(), &g.value)?;
                let v_hat = self.v_hat(&b.v);
                let scaled = DenseMatrix::from_fn(rotated.rows(), rotated.cols(), |i, j| {
                    -rotated[(i, j)] / (v_hat[(i, j)].sqrt() + self.eps)
                });
                Ok(rotate_out(&b.q_l, b.q_r.as_ref(), &scaled)?)
            }
            None => Ok(g.value.scale(-1.0 / self.eps)),
        }
    }
}

impl Default for SoapState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.95, 10).expect("default hyperparameters are valid")
    }
}

fn refresh_block(b: &mut SoapBlock) -> Result<()> {
    let q_l = sym_eig(&b.l_ema, EIG_TOL)?.eigenvectors;
    let q_r = match &b.r_ema {
        Some(r) => Some(sym_eig(r, EIG_TOL)?.eigenvectors),
        None => None,
    };
    // P = Q_newᵀ Q_old maps old rotated coordinates to new ones
    let p_l = matmul(&q_l.transpose(), &b.q_l)?;
    let p_r = match (&q_r, &b.q_r) {
        (Some(new), Some(old)) => Some(matmul(&new.transpose(), old)?),
        _ => None,
    };
    let project =
        |x: &DenseMatrix, pl: &DenseMatrix, pr: Option<&DenseMatrix>| -> Result<DenseMatrix> {
            let mut y = matmul(pl, x)?;
            if let Some(pr) = pr {
                y = matmul(&y, &pr.transpose())?;
            }
            Ok(y)
        };
    b.m = project(&b.m, &p_l, p_r.as_ref())?;
    let p_l2 = p_l.map(|x| x * x);
    let p_r2 = p_r.as_ref().map(|p| p.map(|x| x * x));
    b.v = project(&b.v, &p_l2, p_r2.as_ref())?.map(|x| x.max(0.0));
    b.q_l = q_l;
    b.q_r = q_r;
    Ok(())
}

pub fn soap_step(
    state: &mut SoapState,
    params: &[ParamBlock],
    grads: &[ParamBlock],
    cfg: &StepConfig,
) -> Result<StepOutput> {
    check_aligned(params, grads)?;
    let refresh = state.t.is_multiple_of(state.refresh_period);
    let (b1, b2, eps, decay) = (state.beta1, state.beta2, state.eps, state.ema_decay);
    let t = state.t as i32 + 1;
    let mut update = Vec::with_capacity(grads.len());
    for g in grads {
        let (r, c) = g.value.shape();
        let b = state.blocks.entry(g.id.clone()).or_insert_with(|| {
            let (l_ema, r_ema) = fresh_factors((r, c));
            SoapBlock {
                q_r: r_ema.as_ref().map(|_| DenseMatrix::identity(c)),
                l_ema,
                r_ema,
                q_l: DenseMatrix::identity(r),
                m: DenseMatrix::zeros(r, c),
                v: DenseMatrix::zeros(r, c),
            }
        });
        ema_into(&mut b.l_ema, decay, &gram_rows(&g.value));
        if let Some(re) = b.r_ema.as_mut() {
            ema_into(re, decay, &gram_cols(&g.value));
        }
        if refresh {
            refresh_block(b)?;
        }
        let rotated = rotate_in(&b.q_l, b.q_r.as_ref(), &g.value)?;
        for ((m, v), &x) in
            b.m.as_mut_slice()
                .iter_mut()
                .zip(b.v.as_mut_slice().iter_mut())
                .zip(rotated.as_slice())
        {
            *m = b1 * *m + (1.0 - b1) * x;
            *v = b2 * *v + (1.0 - b2) * x * x;
        }
        let mc = 1.0 - b1.powi(t);
        let vc = 1.0 - b2.powi(t);
        let dir = DenseMatrix::from_fn(r, c, |i, j| {
            -cfg.lr * (b.m[(i, j)] / mc) / ((b.v[(i, j)] / vc).sqrt() + eps)
        });
        update.push(ParamBlock::new(
            g.id.clone(),
            rotate_out(&b.q_l, b.q_r.as_ref(), &dir)?,
        ));
    }
    state.t += 1;
    apply(params, update)
}

/// Damped Newton preconditioner over the concatenation of all blocks.
#[derive(Debug, Clone)]
pub struct NewtonState {
    pub damping: f64,
    hessian: Option<DenseMatrix>,
}

impl NewtonState {
    pub fn new(damping: f64) -> Result<Self> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(OptimError::Hyper {
                name: "damping",
                value: damping,
                reason: "must be nonnegative",
            });
        }
        Ok(Self {
            damping,
            hessian: None,
        })
    }

    /// Hessian indexed by [`flatten`] order of the parameter blocks.
    pub fn set_hessian(&mut self, hessian: DenseMatrix) {
        self.hessian = Some(hessian);
    }

    pub fn hessian(&self) -> Option<&DenseMatrix> {
        self.hessian.as_ref()
    }
}

fn newton_direction(
    hessian: &DenseMatrix,
    grads: &[ParamBlock],
    damping: f64,
) -> Result<Vec<ParamBlock>> {
    let flat = flatten(grads);
    if hessian.rows() != flat.len() || hessian.cols() != flat.len() {
        return Err(OptimError::HessianShape {
            rows: hessian.rows(),
            cols: hessian.cols(),
            params: flat.len(),
        });
    }
    let inv = spd_inv_power(hessian, 1.0, damping)?;
    let p = matmul(&inv, &DenseMatrix::col(&flat)?)?.scale(-1.0);
    unflatten(grads, p.as_slice())
}

/// `update = −η (H + damping I)⁻¹ g` with the damping applied in the eigenbasis.
pub fn exact_newton_step(
    hessian: &DenseMatrix,
    grads: &[ParamBlock],
    cfg: &StepConfig,
    damping: f64,
) -> Result<Vec<ParamBlock>> {
    Ok(scale_blocks(
        &newton_direction(hessian, grads, damping)?,
        cfg.lr,
    ))
}

/// Uniform front over the optimizer suite.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Sign,
    Adam(AdamState),
    Adagrad(AdagradState),
    Shampoo(ShampooState),
    Soap(SoapState),
    Newton(NewtonState),
}

impl Optimizer {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Sign => "sign",
            Self::Adam(_) => "adam",
            Self::Adagrad(_) => "adagrad",
            Self::Shampoo(_) => "shampoo",
            Self::Soap(_) => "soap",
            Self::Newton(_) => "newton",
        }
    }

    /// Whether `precondition` is linear in its argument.
    pub fn is_linear(&self) -> bool {
        !matches!(self, Self::Sign)
    }

    pub fn step(
        &mut self,
        params: &[ParamBlock],
        grads: &[ParamBlock],
        cfg: &StepConfig,
    ) -> Result<StepOutput> {
        match self {
            Self::Sgd => sgd_step(params, grads, cfg),
            Self::Sign => sign_step(params, grads, cfg),
            Self::Adam(s) => adam_step(s, params, grads, cfg),
            Self::Adagrad(s) => adagrad_step(s, params, grads, cfg),
            Self::Shampoo(s) => shampoo_step(s, params, grads, cfg),
            Self::Soap(s) => soap_step(s, params, grads, cfg),
            Self::Newton(s) => {
                check_aligned(params, grads)?;
                let h = s.hessian.as_ref().ok_or(OptimError::MissingHessian)?;
                let update = exact_newton_step(h, grads, cfg, s.damping)?;
                apply(params, update)
            }
        }
    }

    /// Current preconditioner applied to `grads`: returns `−P g`.
    pub fn precondition(&self, grads: &[ParamBlock]) -> Result<Vec<ParamBlock>> {
        match self {
            Self::Sgd => Ok(scale_blocks(grads, -1.0)),
            Self::Sign => Ok(grads
                .iter()
                .map(|g| ParamBlock::new(g.id.clone(), g.value.map(|x| -sign(x))))
                .collect()),
            Self::Adam(s) => Ok(s.precondition(grads)),
            Self::Adagrad(s) => Ok(grads
                .iter()
                .map(|g| ParamBlock::new(g.id.clone(), s.direction(g)))
                .collect()),
            Self::Shampoo(s) => grads
                .iter()
                .map(|g| Ok(ParamBlock::new(g.id.clone(), s.direction(g)?)))
                .collect(),
            Self::Soap(s) => grads
                .iter()
                .map(|g| Ok(ParamBlock::new(g.id.clone(), s.direction(g)?)))
                .collect(),
            Self::Newton(s) => {
                let h = s.hessian.as_ref().ok_or(OptimError::MissingHessian)?;
                newton_direction(h, grads, s.damping)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn blocks(values: &[(&str, DenseMatrix)]) -> Vec<ParamBlock> {
        values
            .iter()
            .map(|(id, v)| ParamBlock::new(*id, v.clone()))
            .collect()
    }

    fn vec_block(id: &str, xs: &[f64]) -> Vec<ParamBlock> {
        blocks(&[(id, DenseMatrix::col(xs).unwrap())])
    }

    fn cfg(lr: f64) -> StepConfig {
        StepConfig::new(lr).unwrap()
    }

    fn random_blocks(seed: u64) -> Vec<ParamBlock> {
        let mut r = rng::stream(seed, 0);
        blocks(&[
            ("a", rng::normal_matrix(&mut r, 3, 4)),
            ("b", rng::normal_matrix(&mut r, 5, 1)),
        ])
    }

    #[test]
    fn step_config_rejects_nonpositive_lr() {
        assert!(StepConfig::new(0.0).is_err());
        assert!(StepConfig::new(-1.0).is_err());
        assert!(StepConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn sgd_zero_gradient_leaves_params() {
        let p = vec_block("x", &[1.0, 2.0]);
        let g = vec_block("x", &[0.0, 0.0]);
        assert_eq!(sgd_step(&p, &g, &cfg(0.1)).unwrap().params, p);
    }

    #[test]
    fn sgd_unit_lr_subtracts_gradient() {
        let p = vec_block("x", &[1.0, 2.0]);
        let g = vec_block("x", &[0.5, -1.0]);
        let out = sgd_step(&p, &g, &cfg(1.0)).unwrap();
        assert_eq!(out.params, vec_block("x", &[0.5, 3.0]));
        assert_eq!(out.update, vec_block("x", &[-0.5, 1.0]));
    }

    #[test]
    fn sgd_two_half_steps_equal_one_step() {
        let p = vec_block("x", &[1.0, -2.0, 0.25]);
        let g = vec_block("x", &[0.5, 0.25, -1.0]);
        let half = sgd_step(&sgd_step(&p, &g, &cfg(0.5)).unwrap().params, &g, &cfg(0.5)).unwrap();
        let full = sgd_step(&p, &g, &cfg(1.0)).unwrap();
        assert_eq!(half.params, full.params);
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let p = vec_block("x", &[1.0, 2.0]);
        assert!(matches!(
            sgd_step(&p, &vec_block("y", &[1.0, 2.0]), &cfg(1.0)),
            Err(OptimError::BlockId { .. })
        ));
        assert!(matches!(
            sgd_step(&p, &vec_block("x", &[1.0]), &cfg(1.0)),
            Err(OptimError::Shape { .. })
        ));
        assert!(matches!(
            sgd_step(&p, &[], &cfg(1.0)),
            Err(OptimError::BlockCount { .. })
        ));
    }

    #[test]
    fn sign_step_cases() {
        let p = vec_block("x", &[0.0, 0.0, 0.0]);
        let g = vec_block("x", &[3.0, -2.0, 0.0]);
        let out = sign_step(&p, &g, &cfg(0.1)).unwrap();
        assert_eq!(out.update, vec_block("x", &[-0.1, 0.1, 0.0]));
        let out10 = sign_step(&p, &scale_blocks(&g, 10.0), &cfg(0.1)).unwrap();
        assert_eq!(out.update, out10.update);
    }

    #[test]
    fn sign_step_matches_first_adam_direction() {
        let p = random_blocks(1);
        let g = random_blocks(2);
        let a = adam_step(
            &mut AdamState::new(0.9, 0.999, 1e-12).unwrap(),
            &p,
            &g,
            &cfg(0.01),
        )
        .unwrap()
        .update;
        let s = sign_step(&p, &g, &cfg(0.01)).unwrap().update;
        let (fa, fs) = (flatten(&a), flatten(&s));
        let dot: f64 = fa.iter().zip(&fs).map(|(x, y)| x * y).sum();
        let na = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ns = fs.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * ns) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let p = vec_block("x", &[0.0]);
        let g = vec_block("x", &[3.0]);
        let mut s = AdamState::default();
        let out = adam_step(&mut s, &p, &g, &cfg(0.01)).unwrap();
        assert!((out.update[0].value[(0, 0)] + 0.01).abs() < 1e-6 * 0.01);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_zero_gradient_gives_zero_update() {
        let p = vec_block("x", &[1.0, -1.0]);
        let g = vec_block("x", &[0.0, 0.0]);
        let out = adam_step(&mut AdamState::default(), &p, &g, &cfg(0.1)).unwrap();
        assert!(flatten(&out.update).iter().all(|&u| u == 0.0));
    }

    #[test]
    fn adam_rejects_bad_hyperparameters() {
        assert!(AdamState::new(1.0, 0.999, 1e-8).is_err());
        assert!(AdamState::new(0.9, -0.1, 1e-8).is_err());
        assert!(AdamState::new(0.9, 0.999, 0.0).is_err());
    }

    #[test]
    fn frozen_adam_follows_linear_whitened_dynamics() {
        // p = −D⁻¹ g with g = H e; in q = D^{1/2} p coordinates q' = (I − ηB) q
        let h = DenseMatrix::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let d = [2.0, 0.5];
        let eta = 0.3;
        let mut s = AdamState::new(0.0, 0.999, 1e-300).unwrap();
        s.freeze_with(&vec_block("x", &[d[0] * d[0], d[1] * d[1]]));
        let mut theta = vec_block("x", &[1.0, -0.7]);
        let b = DenseMatrix::from_fn(2, 2, |i, j| h[(i, j)] / (d[i] * d[j]).sqrt());
        let mut q_prev: Option<DenseMatrix> = None;
        for _ in 0..5 {
            let g = relabel(&theta, vec![matmul(&h, &theta[0].value).unwrap()]);
            let out = adam_step(&mut s, &theta, &g, &cfg(eta)).unwrap();
            let p = out.update[0].value.scale(1.0 / eta);
            let q = DenseMatrix::from_fn(2, 1, |i, _| d[i].sqrt() * p[(i, 0)]);
            if let Some(prev) = q_prev {
                let predicted = prev.axpy(-eta, &matmul(&b, &prev).unwrap()).unwrap();
                assert!(predicted.sub(&q).unwrap().max_abs() < 1e-12);
            }
            q_prev = Some(q);
            theta = out.params;
        }
    }

    #[test]
    fn adagrad_first_step_is_sign_like() {
        let p = vec_block("x", &[0.0]);
        let g = vec_block("x", &[-4.0]);
        let out = adagrad_step(&mut AdagradState::default(), &p, &g, &cfg(0.5)).unwrap();
        assert!((out.update[0].value[(0, 0)] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn adagrad_constant_gradient_decays_as_inverse_sqrt() {
        let mut s = AdagradState::new(1e-12).unwrap();
        let mut p = vec_block("x", &[0.0]);
        let g = vec_block("x", &[2.0]);
        for t in 1..=50 {
            let out = adagrad_step(&mut s, &p, &g, &cfg(1.0)).unwrap();
            let mag = out.update[0].value[(0, 0)].abs();
            assert!((mag - 1.0 / (t as f64).sqrt()).abs() < 1e-9, "t={t}");
            p = out.params;
        }
    }

    #[test]
    fn adagrad_zero_gradient_keeps_params() {
        let mut s = AdagradState::default();
        let p = vec_block("x", &[1.0, 2.0]);
        let g = vec_block("x", &[0.0, 0.0]);
        let mut cur = p.clone();
        for _ in 0..10 {
            cur = adagrad_step(&mut s, &cur, &g, &cfg(1.0)).unwrap().params;
        }
        assert_eq!(cur, p);
    }

    #[test]
    fn shampoo_zero_gradient_zero_update() {
        let p = random_blocks(3);
        let g = scale_blocks(&p, 0.0);
        let out = shampoo_step(&mut ShampooState::default(), &p, &g, &cfg(0.1)).unwrap();
        assert!(flatten(&out.update).iter().all(|&u| u == 0.0));
    }

    #[test]
    fn fresh_shampoo_direction_is_negative_gradient() {
        let g = random_blocks(4);
        let p = Optimizer::Shampoo(ShampooState::default())
            .precondition(&g)
            .unwrap();
        for (pb, gb) in p.iter().zip(&g) {
            let ratio = pb.value[(0, 0)] / gb.value[(0, 0)];
            assert!(ratio < 0.0);
            let expect = gb.value.scale(ratio);
            assert!(pb.value.sub(&expect).unwrap().max_abs() <= 1e-9 * pb.value.max_abs());
        }
    }

    #[test]
    fn shampoo_matches_inverse_root_composition() {
        let mut r = rng::stream(5, 0);
        let m = rng::normal_matrix(&mut r, 4, 4);
        let a = gram_rows(&m).add(&DenseMatrix::identity(4)).unwrap();
        let g = rng::normal_matrix(&mut r, 4, 4);
        let mut s = ShampooState::new(0.95, 1e-6, 1).unwrap();
        s.set_factors("w", a.clone(), Some(a.clone())).unwrap();
        let opt = Optimizer::Shampoo(s);
        let p = opt.precondition(&blocks(&[("w", g.clone())])).unwrap();
        let root = spd_inv_power(&a, 0.25, 1e-6).unwrap();
        let expect = matmul(&matmul(&root, &g).unwrap(), &root)
            .unwrap()
            .scale(-1.0);
        assert!(p[0].value.sub(&expect).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn soap_zero_gradient_only_decays_factors() {
        let p = random_blocks(6);
        let g = random_blocks(7);
        let mut s = SoapState::default();
        soap_step(&mut s, &p, &g, &cfg(0.1)).unwrap();
        let before = s.factors("a").unwrap().0.clone();
        let zero = scale_blocks(&g, 0.0);
        let out = soap_step(&mut s, &p, &zero, &cfg(0.1)).unwrap();
        let after = s.factors("a").unwrap().0.clone();
        assert!(after.sub(&before.scale(0.95)).unwrap().max_abs() < 1e-15);
        // first moment still carries the previous gradient, so only a fresh state gives exactly zero
        let fresh = soap_step(&mut SoapState::default(), &p, &zero, &cfg(0.1)).unwrap();
        assert!(flatten(&fresh.update).iter().all(|&u| u == 0.0));
        assert!(flatten(&out.update).iter().all(|u| u.is_finite()));
    }

    #[test]
    fn soap_bases_stay_orthonormal_over_many_refreshes() {
        let mut s = SoapState::new(0.9, 0.999, 1e-8, 0.95, 1).unwrap();
        let mut p = random_blocks(8);
        for k in 0..100 {
            let g = random_blocks(100 + k);
            p = soap_step(&mut s, &p, &g, &cfg(1e-3)).unwrap().params;
            let (ql, qr) = s.bases("a").unwrap();
            for q in [Some(ql), qr].into_iter().flatten() {
                let qtq = matmul(&q.transpose(), q).unwrap();
                let err = qtq.sub(&DenseMatrix::identity(q.rows())).unwrap().max_abs();
                assert!(err < 1e-8, "step {k}: {err}");
            }
        }
    }

    #[test]
    fn soap_double_refresh_is_idempotent() {
        let mut s = SoapState::new(0.9, 0.999, 1e-8, 0.95, 3).unwrap();
        let mut p = random_blocks(9);
        for k in 0..7 {
            p = soap_step(&mut s, &p, &random_blocks(200 + k), &cfg(1e-3))
                .unwrap()
                .params;
        }
        s.refresh().unwrap();
        let probe = random_blocks(300);
        let once = Optimizer::Soap(s.clone()).precondition(&probe).unwrap();
        s.refresh().unwrap();
        let twice = Optimizer::Soap(s.clone()).precondition(&probe).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!(a.value.sub(&b.value).unwrap().max_abs() < 1e-10 * a.value.max_abs().max(1.0));
        }
    }

    #[test]
    fn newton_lands_on_anchor() {
        let h = DenseMatrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let anchor = DenseMatrix::col(&[0.5, -1.0]).unwrap();
        let theta = DenseMatrix::col(&[2.0, 2.0]).unwrap();
        let g = matmul(&h, &theta.sub(&anchor).unwrap()).unwrap();
        let upd = exact_newton_step(&h, &blocks(&[("x", g)]), &cfg(1.0), 0.0).unwrap();
        let landed = theta.add(&upd[0].value).unwrap();
        assert!(landed.sub(&anchor).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn newton_with_identity_is_sgd() {
        let g = vec_block("x", &[0.3, -0.2, 1.0]);
        let upd = exact_newton_step(&DenseMatrix::identity(3), &g, &cfg(0.5), 0.0).unwrap();
        let sgd = sgd_step(&g, &g, &cfg(0.5)).unwrap().update;
        for (a, b) in flatten(&upd).iter().zip(flatten(&sgd)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn heavily_damped_newton_is_gradient_descent() {
        let h = DenseMatrix::from_rows(&[vec![100.0, 5.0], vec![5.0, 1.0]]).unwrap();
        let g = vec_block("x", &[1.0, 2.0]);
        let upd = flatten(&exact_newton_step(&h, &g, &cfg(1.0), 1e6).unwrap());
        let neg: Vec<f64> = flatten(&g).iter().map(|x| -x).collect();
        let dot: f64 = upd.iter().zip(&neg).map(|(a, b)| a * b).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (n(&upd) * n(&neg)) >= 0.999);
    }

    #[test]
    fn newton_rejects_indefinite() {
        let h = DenseMatrix::from_diag(&[1.0, -1.0]);
        let g = vec_block("x", &[1.0, 1.0]);
        assert!(exact_newton_step(&h, &g, &cfg(1.0), 0.0).is_err());
        assert!(matches!(
            Optimizer::Newton(NewtonState::new(0.0).unwrap()).precondition(&g),
            Err(OptimError::MissingHessian)
        ));
    }

    #[test]
    fn fresh_adam_precondition_is_scaled_negative_gradient() {
        let g = random_blocks(10);
        let p = Optimizer::Adam(AdamState::default())
            .precondition(&g)
            .unwrap();
        for (pb, gb) in p.iter().zip(&g) {
            let expect = gb.value.scale(-1e8);
            assert!(pb.value.sub(&expect).unwrap().max_abs() <= 1e-6 * expect.max_abs());
        }
    }

    #[test]
    fn newton_precondition_points_at_anchor() {
        let mut r = rng::stream(11, 0);
        let m = rng::normal_matrix(&mut r, 5, 5);
        let h = gram_rows(&m).add(&DenseMatrix::identity(5)).unwrap();
        let e = rng::normal_matrix(&mut r, 5, 1);
        let g = blocks(&[("x", matmul(&h, &e).unwrap())]);
        let mut s = NewtonState::new(0.0).unwrap();
        s.set_hessian(h);
        let p = Optimizer::Newton(s).precondition(&g).unwrap();
        assert!(p[0].value.add(&e).unwrap().max_abs() < 1e-10);
    }

    fn stepped_optimizers() -> Vec<Optimizer> {
        let p = random_blocks(20);
        let mut out = vec![
            Optimizer::Sgd,
            Optimizer::Adam(AdamState::default()),
            Optimizer::Adagrad(AdagradState::default()),
            Optimizer::Shampoo(ShampooState::new(0.95, 1e-3, 1).unwrap()),
            Optimizer::Soap(SoapState::new(0.9, 0.999, 1e-8, 0.95, 1).unwrap()),
        ];
        for opt in &mut out {
            for k in 0..3 {
                opt.step(&p, &random_blocks(30 + k), &cfg(1e-3)).unwrap();
            }
        }
        let n: usize = flatten(&p).len();
        let mut r = rng::stream(21, 0);
        let m = rng::normal_matrix(&mut r, n, n);
        let mut newton = NewtonState::new(1e-3).unwrap();
        newton.set_hessian(gram_rows(&m));
        out.push(Optimizer::Newton(newton));
        out
    }

    #[test]
    fn linear_preconditioners_are_linear() {
        let gr = random_blocks(40);
        let gd = random_blocks(41);
        let lambda = 0.37;
        let combined = axpy_blocks(&gr, lambda, &gd).unwrap();
        for opt in stepped_optimizers() {
            assert!(opt.is_linear());
            let lhs = opt.precondition(&combined).unwrap();
            let rhs = axpy_blocks(
                &opt.precondition(&gr).unwrap(),
                lambda,
                &opt.precondition(&gd).unwrap(),
            )
            .unwrap();
            let scale = flatten(&lhs).iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (a, b) in flatten(&lhs).iter().zip(flatten(&rhs)) {
                assert!((a - b).abs() <= 1e-10 * scale, "{}", opt.name());
            }
        }
    }

    #[test]
    fn preconditioned_directions_descend() {
        for opt in stepped_optimizers() {
            for k in 0..5 {
                let g = random_blocks(50 + k);
                let p = opt.precondition(&g).unwrap();
                let inner: f64 = flatten(&p)
                    .iter()
                    .zip(flatten(&g))
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(inner < 0.0, "{}", opt.name());
            }
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let p = random_blocks(60);
        let g = random_blocks(61);
        for mut opt in stepped_optimizers() {
            let mut twin = opt.clone();
            let a = opt.step(&p, &g, &cfg(1e-2));
            let b = twin.step(&p, &g, &cfg(1e-2));
            match (a, b) {
                (Ok(a), Ok(b)) => assert_eq!(flatten(&a.update), flatten(&b.update)),
                (Err(a), Err(b)) => assert_eq!(a, b),
                _ => panic!("divergent outcomes for {}", opt.name()),
            }
        }
    }
}
