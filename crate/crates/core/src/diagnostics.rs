//! Alignment cosines, outlier statistics and descent-bound checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::{gram_cols, gram_rows, DenseMatrix};
use crate::optim::ParamBlock;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("block lists differ: {0}")]
    BlockMismatch(String),
    #[error("statistic undefined for an all-zero matrix")]
    ZeroMatrix,
    #[error("row {row} has zero median magnitude")]
    DegenerateRow { row: usize },
    #[error("deviation normalizer is zero")]
    ZeroNormalizer,
    #[error("shapes {0:?} and {1:?} differ")]
    Shape((usize, usize), (usize, usize)),
    #[error("trajectory arrays disagree in length: {0}")]
    Trajectory(String),
}

pub type Result<T> = std::result::Result<T, DiagError>;

/// A cosine similarity, always in `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CosineScore(f64);

impl CosineScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<CosineScore> {
    if u.len() != v.len() {
        return Err(DiagError::LengthMismatch(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(DiagError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    Ok(CosineScore(dot.clamp(-1.0, 1.0)))
}

/// Concatenation of block values in lexicographic id order.
pub fn flatten_sorted(blocks: &[ParamBlock]) -> Vec<f64> {
    let mut order: Vec<&ParamBlock> = blocks.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    order
        .into_iter()
        .flat_map(|b| b.value.as_slice().iter().copied())
        .collect()
}

fn check_same_layout(a: &[ParamBlock], b: &[ParamBlock]) -> Result<()> {
    let layout = |x: &[ParamBlock]| {
        let mut v: Vec<(String, (usize, usize))> =
            x.iter().map(|p| (p.id.clone(), p.value.shape())).collect();
        v.sort();
        v
    };
    let (la, lb) = (layout(a), layout(b));
    if la != lb {
        return Err(DiagError::BlockMismatch(format!("{la:?} vs {lb:?}")));
    }
    Ok(())
}

pub fn block_cosine(a: &[ParamBlock], b: &[ParamBlock]) -> Result<CosineScore> {
    check_same_layout(a, b)?;
    cosine(&flatten_sorted(a), &flatten_sorted(b))
}

pub fn block_norm(blocks: &[ParamBlock]) -> f64 {
    blocks
        .iter()
        .map(|b| b.value.as_slice().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Alignment of the rate and distortion updates within a step.
pub fn intra_step(p_r: &[ParamBlock], p_d: &[ParamBlock]) -> Result<CosineScore> {
    block_cosine(p_r, p_d)
}

/// Alignment of consecutive total updates.
pub fn inter_step(p_prev: &[ParamBlock], p_cur: &[ParamBlock]) -> Result<CosineScore> {
    block_cosine(p_prev, p_cur)
}

fn second_moment(x: &DenseMatrix) -> f64 {
    x.as_slice().iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Rescales `x` so its mean squared entry is 1.
pub fn normalize_m2(x: &DenseMatrix) -> Result<DenseMatrix> {
    let m2 = second_moment(x);
    if m2 == 0.0 {
        return Err(DiagError::ZeroMatrix);
    }
    Ok(x.scale(1.0 / m2.sqrt()))
}

/// Mean square of each column (channel).
fn channel_energies(x: &DenseMatrix) -> Vec<f64> {
    let n = x.rows() as f64;
    let mut s = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (acc, v) in s.iter_mut().zip(x.row(i)) {
            *acc += v * v;
        }
    }
    s.iter().map(|e| e / n).collect()
}

/// Kurtosis of per-channel RMS values: `mean(s⁴) / mean(s²)²`.
pub fn kurt(x: &DenseMatrix) -> Result<f64> {
    let s2 = channel_energies(x);
    let d = s2.len() as f64;
    let mean2 = s2.iter().sum::<f64>() / d;
    if mean2 == 0.0 {
        return Err(DiagError::ZeroMatrix);
    }
    let mean4 = s2.iter().map(|e| e * e).sum::<f64>() / d;
    Ok(mean4 / (mean2 * mean2))
}

fn median(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

/// Mean over rows of `max |x| / median |x|`.
pub fn maxmed(x: &DenseMatrix) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let mut mags: Vec<f64> = x.row(i).iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let med = median(&mags);
        if med == 0.0 {
            return Err(DiagError::DegenerateRow { row: i });
        }
        total += mags[mags.len() - 1] / med;
    }
    Ok(total / x.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierStats {
    pub kurt: f64,
    pub maxmed: f64,
    pub n: usize,
    pub d: usize,
}

pub fn outlier_stats(x: &DenseMatrix) -> Result<OutlierStats> {
    Ok(OutlierStats {
        kurt: kurt(x)?,
        maxmed: maxmed(x)?,
        n: x.rows(),
        d: x.cols(),
    })
}

/// Terms of `n²d·kurt + Σ_{i≠j}(Σ_F)²_ij = Σ(Σ_I)²` for the m2-normalized
/// input, where `Σ_F = XᵀX` and `Σ_I = XXᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceIdentity {
    pub diag_term: f64,
    pub offdiag_term: f64,
    pub input_energy: f64,
    pub residual: f64,
}

pub fn trace_identity(x: &DenseMatrix) -> Result<TraceIdentity> {
    let xn = normalize_m2(x)?;
    let (n, d) = (xn.rows() as f64, xn.cols() as f64);
    let feature = gram_cols(&xn);
    let sample = gram_rows(&xn);
    let diag_term = n * n * d * kurt(&xn)?;
    let mut offdiag_term = 0.0;
    for i in 0..feature.rows() {
        for j in 0..feature.cols() {
            if i != j {
                offdiag_term += feature[(i, j)] * feature[(i, j)];
            }
        }
    }
    let input_energy: f64 = sample.as_slice().iter().map(|v| v * v).sum();
    Ok(TraceIdentity {
        diag_term,
        offdiag_term,
        input_energy,
        residual: (diag_term + offdiag_term - input_energy).abs() / input_energy,
    })
}

/// `|ŷ − y| / Σ|y|`, entrywise.
pub fn scaled_deviation(y: &DenseMatrix, y_hat: &DenseMatrix) -> Result<DenseMatrix> {
    if y.shape() != y_hat.shape() {
        return Err(DiagError::Shape(y.shape(), y_hat.shape()));
    }
    let norm: f64 = y.as_slice().iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        return Err(DiagError::ZeroNormalizer);
    }
    Ok(DenseMatrix::from_fn(y.rows(), y.cols(), |i, j| {
        (y_hat[(i, j)] - y[(i, j)]).abs() / norm
    }))
}

/// Constants for the one-step descent bound. `spec_upper` bounds the
/// preconditioner's eigenvalues from above, `smoothness` is the gradient
/// Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentBoundParams {
    pub smoothness: f64,
    pub spec_upper: f64,
    pub spec_lower: f64,
    pub lr: f64,
}

impl DescentBoundParams {
    /// `η/M − Lη²/2`.
    pub fn coefficient(&self) -> f64 {
        self.lr / self.spec_upper - 0.5 * self.smoothness * self.lr * self.lr
    }

    pub fn applicable(&self) -> bool {
        self.lr < 2.0 / (self.smoothness * self.spec_upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundStep {
    pub measured_drop: f64,
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BoundReport {
    /// The step size is outside the range where the bound holds.
    Inapplicable,
    Checked(Vec<BoundStep>),
}

impl BoundReport {
    pub fn violations(&self) -> Option<usize> {
        match self {
            Self::Inapplicable => None,
            Self::Checked(steps) => Some(steps.iter().filter(|s| !s.satisfied).count()),
        }
    }
}

// absolute slack for floating-point loss differences
fn slack(a: f64, b: f64) -> f64 {
    1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Checks `Δ_t ≥ C(η)(‖p_R‖² + ‖p_D‖² + 2‖p_R‖‖p_D‖S)` at every step.
///
/// `losses` has one more entry than the step arrays: `losses[t]` is the loss
/// before step `t`. `intra[t]` is `None` when a component update vanished.
pub fn descent_bound_check(
    losses: &[f64],
    p_r_norms: &[f64],
    p_d_norms: &[f64],
    intra: &[Option<f64>],
    params: &DescentBoundParams,
) -> Result<BoundReport> {
    let steps = p_r_norms.len();
    if p_d_norms.len() != steps || intra.len() != steps || losses.len() != steps + 1 {
        return Err(DiagError::Trajectory(format!(
            "{} losses, {} / {} / {} step entries",
            losses.len(),
            steps,
            p_d_norms.len(),
            intra.len()
        )));
    }
    if !params.applicable() {
        return Ok(BoundReport::Inapplicable);
    }
    let c = params.coefficient();
    let out = (0..steps)
        .map(|t| {
            let (a, b) = (p_r_norms[t], p_d_norms[t]);
            let s = intra[t].unwrap_or(0.0);
            let bound = c * (a * a + b * b + 2.0 * a * b * s);
            let measured_drop = losses[t] - losses[t + 1];
            BoundStep {
                measured_drop,
                bound,
                satisfied: measured_drop >= bound - slack(losses[t], losses[t + 1]),
            }
        })
        .collect();
    Ok(BoundReport::Checked(out))
}

/// Constants for the two-step bound, which additionally treats the
/// preconditioner as `σI`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStepBoundParams {
    pub smoothness: f64,
    pub spec_upper: f64,
    pub sigma: f64,
    pub lr: f64,
}

impl TwoStepBoundParams {
    /// Coefficient of the inter-step cosine term: `η/σ − Lη²`.
    pub fn alignment_coefficient(&self) -> f64 {
        self.lr / self.sigma - self.smoothness * self.lr * self.lr
    }

    pub fn applicable(&self) -> bool {
        self.lr < 1.0 / (self.smoothness * self.sigma)
    }
}

/// Checks, for each consecutive pair of steps,
/// `L(θ_{t−1}) − L(θ_{t+1}) ≥ (η/M)‖p_{t−1}‖² − (Lη²/2)(‖p_{t−1}‖² + ‖p_t‖²)
/// + (η/σ − Lη²)‖p_{t−1}‖‖p_t‖ S_inter`.
///
/// `p_norms[t]` is the norm of the direction taking `θ_t` to `θ_{t+1}`
/// (update divided by `η`); `inter[t]` is the cosine between directions
/// `t−1` and `t`, so `inter[0]` is ignored.
pub fn two_step_bound_check(
    losses: &[f64],
    p_norms: &[f64],
    inter: &[Option<f64>],
    params: &TwoStepBoundParams,
) -> Result<BoundReport> {
    let steps = p_norms.len();
    if inter.len() != steps || losses.len() != steps + 1 {
        return Err(DiagError::Trajectory(format!(
            "{} losses, {} / {} step entries",
            losses.len(),
            steps,
            inter.len()
        )));
    }
    if !params.applicable() {
        return Ok(BoundReport::Inapplicable);
    }
    let eta = params.lr;
    let l = params.smoothness;
    let c2 = params.alignment_coefficient();
    let out = (1..steps)
        .map(|t| {
            let (a, b) = (p_norms[t - 1], p_norms[t]);
            let s = inter[t].unwrap_or(0.0);
            let bound = eta / params.spec_upper * a * a - 0.5 * l * eta * eta * (a * a + b * b)
                + c2 * a * b * s;
            let measured_drop = losses[t - 1] - losses[t + 1];
            BoundStep {
                measured_drop,
                bound,
                satisfied: measured_drop >= bound - slack(losses[t - 1], losses[t + 1]),
            }
        })
        .collect();
    Ok(BoundReport::Checked(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_cases() {
        let u = [1.0, 2.0, -3.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!(close(cosine(&u, &u).unwrap().value(), 1.0, 1e-15));
        assert!(close(cosine(&u, &neg).unwrap().value(), -1.0, 1e-15));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(DiagError::ZeroVector));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(DiagError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn block_cosine_ignores_listing_order() {
        let a = DenseMatrix::col(&[1.0, 2.0]).unwrap();
        let b = DenseMatrix::col(&[3.0]).unwrap();
        let x = vec![
            ParamBlock::new("a", a.clone()),
            ParamBlock::new("b", b.clone()),
        ];
        let y = vec![ParamBlock::new("b", b), ParamBlock::new("a", a)];
        assert!(close(block_cosine(&x, &y).unwrap().value(), 1.0, 1e-15));
        assert!(block_cosine(&x, &x[..1]).is_err());
    }

    #[test]
    fn opposite_pulls_give_minus_one() {
        // H_R = H_D = I with anchors ±e₁, measured at the midpoint
        let g_r = vec![ParamBlock::new(
            "theta",
            DenseMatrix::col(&[-1.0, 0.0]).unwrap(),
        )];
        let g_d = vec![ParamBlock::new(
            "theta",
            DenseMatrix::col(&[1.0, 0.0]).unwrap(),
        )];
        assert!(close(intra_step(&g_r, &g_d).unwrap().value(), -1.0, 1e-15));
        assert!(close(inter_step(&g_r, &g_r).unwrap().value(), 1.0, 1e-15));
    }

    #[test]
    fn normalize_cases() {
        let ones = DenseMatrix::from_fn(3, 4, |_, _| 1.0);
        assert_eq!(normalize_m2(&ones).unwrap(), ones);
        let x = rng::normal_matrix(&mut rng::stream(1, 0), 5, 6);
        let a = normalize_m2(&x).unwrap();
        let b = normalize_m2(&x.scale(7.0)).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-14);
        assert!(close(second_moment(&a), 1.0, 1e-12));
        assert_eq!(
            normalize_m2(&DenseMatrix::zeros(2, 2)),
            Err(DiagError::ZeroMatrix)
        );
    }

    #[test]
    fn kurt_cases() {
        let equal = DenseMatrix::from_rows(&[vec![1.0, -1.0, 1.0], vec![-1.0, 1.0, 1.0]]).unwrap();
        assert!(close(kurt(&equal).unwrap(), 1.0, 1e-15));
        // single-row matrix so s² is the squared entry
        let x = DenseMatrix::from_rows(&[vec![0.5f64.sqrt(), 1.5f64.sqrt()]]).unwrap();
        assert!(close(kurt(&x).unwrap(), 1.25, 1e-12));
        assert!(kurt(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn maxmed_cases() {
        let flat = DenseMatrix::from_rows(&[vec![2.0, -2.0, 2.0], vec![1.0, 1.0, -1.0]]).unwrap();
        assert!(close(maxmed(&flat).unwrap(), 1.0, 1e-15));
        let row = DenseMatrix::from_rows(&[vec![1.0, 1.0, 1.0, 3.0]]).unwrap();
        assert!(close(maxmed(&row).unwrap(), 3.0, 1e-15));
        let even = DenseMatrix::from_rows(&[vec![1.0, 2.0, 4.0, 8.0]]).unwrap();
        assert!(close(maxmed(&even).unwrap(), 8.0 / 3.0, 1e-15));
        let zero = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(maxmed(&zero), Err(DiagError::DegenerateRow { row: 1 }));
    }

    #[test]
    fn trace_identity_cases() {
        let x = rng::normal_matrix(&mut rng::stream(2, 0), 32, 16);
        assert!(trace_identity(&x).unwrap().residual <= 1e-9);
        let orth =
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(trace_identity(&orth).unwrap().offdiag_term, 0.0);
        let single = rng::normal_matrix(&mut rng::stream(3, 0), 10, 1);
        let t = trace_identity(&single).unwrap();
        assert_eq!(t.offdiag_term, 0.0);
        assert!(t.residual <= 1e-12);
    }

    #[test]
    fn scaled_deviation_cases() {
        let y = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        assert_eq!(scaled_deviation(&y, &y).unwrap().max_abs(), 0.0);
        let mut y_hat = y.clone();
        y_hat[(1, 0)] += 0.13;
        let map = scaled_deviation(&y, &y_hat).unwrap();
        let nonzero: Vec<f64> = map
            .as_slice()
            .iter()
            .copied()
            .filter(|&v| v != 0.0)
            .collect();
        assert_eq!(nonzero.len(), 1);
        assert!(close(nonzero[0], 0.13 / 6.5, 1e-15));
        let doubled = scaled_deviation(&y.scale(2.0), &y_hat.scale(2.0)).unwrap();
        assert!(doubled.sub(&map).unwrap().max_abs() < 1e-12);
        assert_eq!(
            scaled_deviation(&DenseMatrix::zeros(1, 2), &DenseMatrix::zeros(1, 2)),
            Err(DiagError::ZeroNormalizer)
        );
    }

    fn params(lr: f64) -> DescentBoundParams {
        DescentBoundParams {
            smoothness: 4.0,
            spec_upper: 1.0,
            spec_lower: 0.25,
            lr,
        }
    }

    #[test]
    fn descent_bound_inapplicable_above_threshold() {
        let r =
            descent_bound_check(&[1.0, 0.5], &[1.0], &[1.0], &[Some(1.0)], &params(0.5)).unwrap();
        assert_eq!(r, BoundReport::Inapplicable);
        assert_eq!(r.violations(), None);
    }

    #[test]
    fn zero_updates_satisfy_trivially() {
        let r = descent_bound_check(
            &[1.0, 1.0, 1.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[None, None],
            &params(0.1),
        )
        .unwrap();
        assert_eq!(r.violations(), Some(0));
    }

    #[test]
    fn two_step_edge_cases() {
        let p = TwoStepBoundParams {
            smoothness: 2.0,
            spec_upper: 1.0,
            sigma: 1.0,
            lr: 0.6,
        };
        assert_eq!(
            two_step_bound_check(&[1.0, 0.5], &[1.0], &[None], &p).unwrap(),
            BoundReport::Inapplicable
        );
        let ok = TwoStepBoundParams { lr: 0.1, ..p };
        assert_eq!(
            two_step_bound_check(&[1.0, 0.5], &[1.0], &[None], &ok).unwrap(),
            BoundReport::Checked(vec![])
        );
        assert!(two_step_bound_check(&[1.0], &[1.0], &[None], &ok).is_err());
    }

    #[test]
    fn two_step_bound_holds_on_isotropic_quadratic() {
        // f = ½ θᵀ diag(h) θ with P = σI, so L = max h and M = σ
        let h = [2.0, 0.5, 1.0];
        let sigma = 0.8;
        let eta = 0.3;
        let mut theta = vec![1.0, -2.0, 0.5];
        let f = |t: &[f64]| 0.5 * t.iter().zip(&h).map(|(x, k)| k * x * x).sum::<f64>();
        let mut losses = vec![f(&theta)];
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..10 {
            let p: Vec<f64> = theta.iter().zip(&h).map(|(x, k)| -sigma * k * x).collect();
            theta = theta.iter().zip(&p).map(|(x, d)| x + eta * d).collect();
            losses.push(f(&theta));
            dirs.push(p);
        }
        let norms: Vec<f64> = dirs
            .iter()
            .map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let inter: Vec<Option<f64>> = (0..dirs.len())
            .map(|t| (t > 0).then(|| cosine(&dirs[t - 1], &dirs[t]).unwrap().value()))
            .collect();
        let p = TwoStepBoundParams {
            smoothness: 2.0,
            spec_upper: sigma,
            sigma,
            lr: eta,
        };
        let report = two_step_bound_check(&losses, &norms, &inter, &p).unwrap();
        assert_eq!(report.violations(), Some(0));
        if let BoundReport::Checked(steps) = report {
            assert_eq!(steps.len(), 9);
        }
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 8),
            v in prop::collection::vec(-10.0f64..10.0, 8),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let base = cosine(&u, &v).unwrap().value();
            let su: Vec<f64> = u.iter().map(|x| a * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
            let scaled = cosine(&su, &sv).unwrap().value();
            prop_assert!((base - scaled).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn kurt_at_least_one_and_scale_invariant(seed in any::<u64>(), n in 1usize..12, d in 1usize..12, c in 0.1f64..50.0) {
            let x = rng::normal_matrix(&mut rng::stream(seed, 0), n, d);
            let k = kurt(&x).unwrap();
            prop_assert!(k >= 1.0 - 1e-12);
            prop_assert!((k - kurt(&x.scale(-c)).unwrap()).abs() <= 1e-12 * k);
            let m = maxmed(&x).unwrap();
            prop_assert!(m >= 1.0);
            prop_assert!((m - maxmed(&x.scale(c)).unwrap()).abs() <= 1e-12 * m);
        }

        #[test]
        fn kurt_is_one_for_equal_channel_energy(seed in any::<u64>(), d in 1usize..10) {
            let base = rng::normal_matrix(&mut rng::stream(seed, 1), 6, 1);
            // columns are sign flips of one column, so all channel RMS values match
            let x = DenseMatrix::from_fn(6, d, |i, j| if (i + j) % 2 == 0 { base[(i, 0)] } else { -base[(i, 0)] });
            prop_assert!((kurt(&x).unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn trace_identity_residual_small(seed in any::<u64>(), n in 1usize..40, d in 1usize..40) {
            let x = rng::normal_matrix(&mut rng::stream(seed, 2), n, d);
            prop_assert!(trace_identity(&x).unwrap().residual <= 1e-9);
        }
    }
}
