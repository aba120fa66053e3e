//! Ridge head on fixed features and its representer decomposition.
//!
//! With features `Φ` (N×D), targets `y` and ridge strength `λ`, the primal
//! solution is `w* = (ΦᵀΦ + λI)⁻¹Φᵀy` and the dual coefficients are
//! `α = (ΦΦᵀ + λI)⁻¹y`, which satisfy `w* = Φᵀα` and therefore
//! `α = (y − Φw*)/λ`. Validation predictions decompose as the row sums of
//! `S = T·diag(α)` with the cached inner products `T = Φ_val·Φᵀ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{conjugate_gradient_solve, dot, CholeskyFactor, DenseMatrix, LinalgError};

/// Lower bound for the ridge strength, also the estimator's fallback value.
pub const LAMBDA_MIN: f64 = 1e-5;

/// `‖w_NN‖²` below this is treated as a degenerate denominator.
const WEIGHT_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RepresenterError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("ridge strength must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("{what}: expected length {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("feature matrix has no rows")]
    Empty,
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), RepresenterError> {
    if expected == found {
        Ok(())
    } else {
        Err(RepresenterError::Shape {
            what,
            expected,
            found,
        })
    }
}

fn check_lambda(lambda: f64) -> Result<(), RepresenterError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(RepresenterError::InvalidLambda(lambda))
    }
}

/// How the dual coefficients are derived from the primal solution.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// `α = (y − Φw*)/λ`, the exact dual solution.
    #[default]
    Dual,
    /// `α = Φw*`, the fitted values. Only equals the dual solution when
    /// `ΦΦᵀ = I`; kept for ablations.
    FeatureProjection,
}

/// Which linear system produces `α` when a state is built.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AlphaSolver {
    /// Factor the D×D primal system and map `w*` to `α`.
    #[default]
    Primal,
    /// Conjugate gradient on the N×N dual system `(ΦΦᵀ + λI)α = y`.
    DualCg { tol: f64, max_iter: Option<usize> },
}

impl AlphaSolver {
    pub const DEFAULT_CG_TOL: f64 = 1e-8;

    pub fn dual_cg() -> Self {
        AlphaSolver::DualCg {
            tol: Self::DEFAULT_CG_TOL,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub chol: CholeskyFactor,
    pub w_star: Vec<f64>,
    /// `Φᵀy`
    pub rhs: Vec<f64>,
}

pub fn gram_with_ridge(phi: &DenseMatrix, lambda: f64) -> DenseMatrix {
    let mut a = phi.gram();
    a.add_diagonal(lambda);
    a
}

/// Solves the primal ridge problem by factorizing `ΦᵀΦ + λI`.
pub fn fit_ridge_primal(
    phi: &DenseMatrix,
    y: &[f64],
    lambda: f64,
) -> Result<RidgeFit, RepresenterError> {
    check_lambda(lambda)?;
    if phi.rows() == 0 || phi.cols() == 0 {
        return Err(RepresenterError::Empty);
    }
    check_len("targets", phi.rows(), y.len())?;
    let chol = CholeskyFactor::factorize(&gram_with_ridge(phi, lambda))?;
    let rhs = phi.tr_matvec(y)?;
    let w_star = chol.solve(&rhs)?;
    Ok(RidgeFit { chol, w_star, rhs })
}

/// Dual coefficients from the primal solution, without any inversion.
pub fn compute_alpha(
    phi: &DenseMatrix,
    y: &[f64],
    w_star: &[f64],
    lambda: f64,
    rule: AlphaRule,
) -> Result<Vec<f64>, RepresenterError> {
    check_len("targets", phi.rows(), y.len())?;
    let fitted = phi.matvec(w_star)?;
    Ok(match rule {
        AlphaRule::Dual => fitted
            .iter()
            .zip(y)
            .map(|(f, yi)| (yi - f) / lambda)
            .collect(),
        AlphaRule::FeatureProjection => fitted,
    })
}

/// Dual coefficients from `(ΦΦᵀ + λI)α = y` by conjugate gradient, applying
/// the kernel implicitly as `Φ(Φᵀp) + λp`.
pub fn compute_alpha_cg(
    phi: &DenseMatrix,
    y: &[f64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, RepresenterError> {
    check_lambda(lambda)?;
    check_len("targets", phi.rows(), y.len())?;
    let apply = |p: &[f64], out: &mut [f64]| {
        let u = phi.tr_matvec(p).expect("length checked");
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(phi.row(i), &u) + lambda * p[i];
        }
    };
    Ok(conjugate_gradient_solve(apply, y, tol, max_iter)?.x)
}

/// `T = Φ_val·Φᵀ`, independent of `λ` and `α`.
pub fn build_t_cache(
    phi_val: &DenseMatrix,
    phi_train: &DenseMatrix,
) -> Result<DenseMatrix, RepresenterError> {
    check_len("feature dimension", phi_train.cols(), phi_val.cols())?;
    Ok(phi_val.matmul_transposed(phi_train)?)
}

/// `S[i, j] = α_j · T[i, j]`
pub fn build_influence_matrix(
    t_cache: &DenseMatrix,
    alpha: &[f64],
) -> Result<DenseMatrix, RepresenterError> {
    check_len("dual coefficients", t_cache.cols(), alpha.len())?;
    let mut s = t_cache.clone();
    scale_columns(&mut s, alpha);
    Ok(s)
}

fn scale_columns(m: &mut DenseMatrix, factors: &[f64]) {
    for i in 0..m.rows() {
        for (v, a) in m.row_mut(i).iter_mut().zip(factors) {
            *v *= a;
        }
    }
}

/// `ŷ = Φ·w`
pub fn predict(phi_query: &DenseMatrix, w: &[f64]) -> Result<Vec<f64>, RepresenterError> {
    check_len("weights", phi_query.cols(), w.len())?;
    Ok(phi_query.matvec(w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub value: f64,
    pub fallback_used: bool,
    /// Estimator output before the lower bound was applied.
    pub raw_value: f64,
}

impl LambdaEstimate {
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            fallback_used: false,
            raw_value: value,
        }
    }
}

/// Effective ridge strength implied by trained final-layer weights.
///
/// If `w_nn` solved `(ΦᵀΦ + λI)w = Φᵀ(y − b_nn)` exactly, projecting the
/// normal equations onto `w_nn` gives
/// `λ = w_nnᵀ(Φᵀy_c − ΦᵀΦw_nn) / ‖w_nn‖²`, evaluated here through
/// matrix-vector products only. Degenerate cases fall back to [`LAMBDA_MIN`].
pub fn estimate_lambda(
    phi: &DenseMatrix,
    y: &[f64],
    w_nn: &[f64],
    b_nn: f64,
) -> Result<LambdaEstimate, RepresenterError> {
    check_len("targets", phi.rows(), y.len())?;
    check_len("final-layer weights", phi.cols(), w_nn.len())?;
    let norm_sq = dot(w_nn, w_nn);
    let fitted = phi.matvec(w_nn)?;
    let numerator: f64 = fitted
        .iter()
        .zip(y)
        .map(|(f, yi)| f * ((yi - b_nn) - f))
        .sum();
    let raw = numerator / norm_sq;
    let usable = norm_sq >= WEIGHT_NORM_FLOOR && raw.is_finite() && raw > 0.0;
    Ok(if usable && raw >= LAMBDA_MIN {
        LambdaEstimate {
            value: raw,
            fallback_used: false,
            raw_value: raw,
        }
    } else {
        LambdaEstimate {
            value: LAMBDA_MIN,
            fallback_used: true,
            raw_value: raw,
        }
    })
}

/// Everything needed to score and remove training points for one pruning
/// cycle. Training rows carry stable ids that survive removals.
#[derive(Debug, Clone)]
pub struct RepresenterState {
    phi_train: DenseMatrix,
    phi_val: DenseMatrix,
    y_train: Vec<f64>,
    y_val: Vec<f64>,
    train_ids: Vec<usize>,
    lambda: f64,
    alpha_rule: AlphaRule,
    chol: CholeskyFactor,
    rhs: Vec<f64>,
    w_star: Vec<f64>,
    alpha: Vec<f64>,
    /// Columns of `T` as contiguous rows, in storage order. Removals
    /// swap-remove a storage row, so `t_slot[j]` locates training row `j`.
    t_columns: DenseMatrix,
    t_slot: Vec<usize>,
    residuals: Vec<f64>,
    refactorizations: usize,
}

/// What happened to the factor while removing a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorUpdate {
    Downdated,
    /// The downdate lost definiteness and the reduced Gram was refactored.
    Refactored,
}

impl RepresenterState {
    /// Fits the ridge head and builds `α`, `T`, `S` and the validation
    /// residuals. `train_ids` defaults to `0..N` when `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        phi_train: DenseMatrix,
        y_train: Vec<f64>,
        phi_val: DenseMatrix,
        y_val: Vec<f64>,
        train_ids: Option<Vec<usize>>,
        lambda: f64,
        alpha_rule: AlphaRule,
        solver: AlphaSolver,
    ) -> Result<Self, RepresenterError> {
        check_len("validation targets", phi_val.rows(), y_val.len())?;
        let train_ids = train_ids.unwrap_or_else(|| (0..phi_train.rows()).collect());
        check_len("training ids", phi_train.rows(), train_ids.len())?;
        let fit = fit_ridge_primal(&phi_train, &y_train, lambda)?;
        let alpha = match solver {
            AlphaSolver::Primal => {
                compute_alpha(&phi_train, &y_train, &fit.w_star, lambda, alpha_rule)?
            }
            AlphaSolver::DualCg { tol, max_iter } => match alpha_rule {
                AlphaRule::Dual => {
                    let max_iter = max_iter.unwrap_or(10 * phi_train.rows());
                    compute_alpha_cg(&phi_train, &y_train, lambda, tol, max_iter)?
                }
                AlphaRule::FeatureProjection => {
                    compute_alpha(&phi_train, &y_train, &fit.w_star, lambda, alpha_rule)?
                }
            },
        };
        check_len("feature dimension", phi_train.cols(), phi_val.cols())?;
        let t_columns = phi_train.matmul_transposed(&phi_val)?;
        let t_slot: Vec<usize> = (0..t_columns.rows()).collect();
        let residuals = residuals_from(&y_val, &t_columns, &t_slot, &alpha);
        Ok(Self {
            phi_train,
            phi_val,
            y_train,
            y_val,
            train_ids,
            lambda,
            alpha_rule,
            chol: fit.chol,
            rhs: fit.rhs,
            w_star: fit.w_star,
            alpha,
            t_columns,
            t_slot,
            residuals,
            refactorizations: 0,
        })
    }

    pub fn n_train(&self) -> usize {
        self.phi_train.rows()
    }

    pub fn n_val(&self) -> usize {
        self.phi_val.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.phi_train.cols()
    }

    pub fn phi_train(&self) -> &DenseMatrix {
        &self.phi_train
    }

    pub fn phi_val(&self) -> &DenseMatrix {
        &self.phi_val
    }

    pub fn y_train(&self) -> &[f64] {
        &self.y_train
    }

    pub fn y_val(&self) -> &[f64] {
        &self.y_val
    }

    /// Stable ids of the remaining training rows, in row order.
    pub fn train_ids(&self) -> &[usize] {
        &self.train_ids
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha_rule(&self) -> AlphaRule {
        self.alpha_rule
    }

    pub fn chol(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// `T = Φ_val Φᵀ` (N_val×N), copied out of the cache.
    pub fn t_cache(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.n_val(), self.n_train());
        for (j, &slot) in self.t_slot.iter().enumerate() {
            for (i, v) in self.t_columns.row(slot).iter().enumerate() {
                t[(i, j)] = *v;
            }
        }
        t
    }

    /// The full `S = T·diag(α)`. Scoring only ever needs one row; see
    /// [`influence_row`](Self::influence_row).
    pub fn influence(&self) -> DenseMatrix {
        let mut s = self.t_cache();
        scale_columns(&mut s, &self.alpha);
        s
    }

    /// Row `v` of `S`: `S[v, j] = α_j·T[v, j]`.
    pub fn influence_row(&self, v: usize) -> Vec<f64> {
        assert!(
            v < self.n_val(),
            "validation row {v} out of range ({})",
            self.n_val()
        );
        self.alpha
            .iter()
            .zip(&self.t_slot)
            .map(|(a, &slot)| a * self.t_columns[(slot, v)])
            .collect()
    }

    /// `S[v, j]`
    pub fn influence_at(&self, v: usize, j: usize) -> f64 {
        self.alpha[j] * self.t_columns[(self.t_slot[j], v)]
    }

    /// `y_val − S·1`
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Validation predictions `S·1`.
    pub fn val_predictions(&self) -> Vec<f64> {
        self.y_val
            .iter()
            .zip(&self.residuals)
            .map(|(y, r)| y - r)
            .collect()
    }

    pub fn refactorizations(&self) -> usize {
        self.refactorizations
    }

    /// Mean squared validation residual.
    pub fn val_mse(&self) -> f64 {
        if self.residuals.is_empty() {
            return 0.0;
        }
        dot(&self.residuals, &self.residuals) / self.residuals.len() as f64
    }

    /// Removes training row `pos` and brings `w*`, `α`, `T`, `S` and the
    /// residuals up to date: downdate the factor by `φ_pos`, re-solve against
    /// the reduced `Φᵀy`, recompute `α`, drop column `pos` of `T` and
    /// re-accumulate the residuals.
    pub fn remove_training_point(&mut self, pos: usize) -> Result<FactorUpdate, RepresenterError> {
        let n = self.n_train();
        assert!(pos < n, "training position {pos} out of range ({n})");
        let phi_k = self.phi_train.row(pos).to_vec();
        let y_k = self.y_train[pos];

        self.phi_train.remove_row(pos);
        self.y_train.remove(pos);
        self.train_ids.remove(pos);
        let slot = self.t_slot.remove(pos);
        let last = self.t_columns.rows() - 1;
        self.t_columns.swap_remove_row(slot);
        if slot != last {
            let moved = self
                .t_slot
                .iter()
                .position(|&s| s == last)
                .expect("every storage row has an owner");
            self.t_slot[moved] = slot;
        }

        let update = match self.chol.downdate_in_place(&phi_k) {
            Ok(()) => {
                for (r, p) in self.rhs.iter_mut().zip(&phi_k) {
                    *r -= y_k * p;
                }
                FactorUpdate::Downdated
            }
            Err(LinalgError::DowndateBreaksPD { .. }) => {
                log::warn!("downdate lost definiteness; refactoring reduced Gram matrix");
                self.chol =
                    CholeskyFactor::factorize(&gram_with_ridge(&self.phi_train, self.lambda))?;
                self.rhs = self.phi_train.tr_matvec(&self.y_train)?;
                self.refactorizations += 1;
                FactorUpdate::Refactored
            }
            Err(e) => return Err(e.into()),
        };

        self.w_star = self.chol.solve(&self.rhs)?;
        self.alpha = compute_alpha(
            &self.phi_train,
            &self.y_train,
            &self.w_star,
            self.lambda,
            self.alpha_rule,
        )?;
        self.residuals = residuals_from(&self.y_val, &self.t_columns, &self.t_slot, &self.alpha);
        Ok(update)
    }
}

/// `y_val − T·α`, accumulated over training points in index order so each
/// entry equals the row sum of `S`.
fn residuals_from(
    y_val: &[f64],
    t_columns: &DenseMatrix,
    t_slot: &[usize],
    alpha: &[f64],
) -> Vec<f64> {
    let mut fitted = vec![0.0; y_val.len()];
    for (a, &slot) in alpha.iter().zip(t_slot) {
        for (f, t) in fitted.iter_mut().zip(t_columns.row(slot)) {
            *f += a * t;
        }
    }
    y_val.iter().zip(&fitted).map(|(y, f)| y - f).collect()
}
