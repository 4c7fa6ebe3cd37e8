// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy sparse approximation over a fixed dictionary.
//!
//! A signal matrix `H` (n samples x d dims) is approximated as `W * D[S]`
//! where `D` is a dictionary of v atoms (rows, d dims each) and `S` is a
//! support set grown one atom per iteration:
//!
//! 1. score every atom `j` not yet selected by `sum_i |<D[j], R[i]>|`, the L1
//!    norm of row `j` of `D * R^T`,
//! 2. append the best atom to the support (lowest index wins ties),
//! 3. refit `W` by least squares against the original signal restricted to
//!    the support, and recompute `R = H - W * D[S]`.
//!
//! With a single sample and a single iteration this is one step of plain
//! matching pursuit, which is exactly what a logit-lens readout does when the
//! dictionary is an unembedding matrix ([`mp_step`]).
//!
//! Explained variance is the *uncentered* energy ratio
//! `1 - ||R||_F^2 / ||H||_F^2`. No mean is subtracted from the samples; this
//! is the quantity the least-squares refit actually minimizes.
//!
//! All arithmetic is `f64`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Signals with Frobenius norm at or below this are treated as zero.
pub const ZERO_SIGNAL_TOL: f64 = 1e-12;

/// The pursuit loop stops once the residual Frobenius norm drops below this
/// fraction of the signal norm. Relative, so that rescaling the signal never
/// changes the support.
pub const EARLY_STOP_TOL: f64 = 1e-12;

/// Relative singular-value cutoff for the least-squares refit.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("dimension mismatch: expected {expected} columns, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {expected:?} vs {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("every one of the {0} dictionary atoms is excluded")]
    AllAtomsExcluded(usize),
    #[error("matrix must have at least one row and one column")]
    EmptyMatrix,
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("dictionary atom {0} is all zeros")]
    ZeroAtom(usize),
    #[error("atom index {index} out of range for {atoms} atoms")]
    AtomOutOfRange { index: usize, atoms: usize },
    #[error("support set contains atom {0} twice")]
    DuplicateAtom(usize),
    #[error("support set is empty")]
    EmptySupport,
    #[error("iteration count {requested} must be in 1..={atoms}")]
    InvalidIterations { requested: usize, atoms: usize },
    #[error("signal norm {0:e} is too small to score")]
    ZeroSignal(f64),
    #[error("{labels} atom labels for {atoms} atoms")]
    LabelCount { labels: usize, atoms: usize },
}

pub type Result<T> = std::result::Result<T, SparseError>;

fn check_finite(data: &DMatrix<f64>) -> Result<()> {
    for col in 0..data.ncols() {
        for row in 0..data.nrows() {
            if !data[(row, col)].is_finite() {
                return Err(SparseError::NonFinite { row, col });
            }
        }
    }
    Ok(())
}

/// Sample-by-dimension activation matrix (symbol `H`).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix(DMatrix<f64>);

impl SignalMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(SparseError::EmptyMatrix);
        }
        check_finite(&data)?;
        Ok(Self(data))
    }

    /// Builds from row-major values.
    pub fn from_rows(n: usize, d: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * d {
            return Err(SparseError::ShapeMismatch {
                expected: (n, d),
                actual: (values.len() / d.max(1), d),
            });
        }
        Self::new(DMatrix::from_row_slice(n, d, values))
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.0 * factor)
    }
}

/// Atom-by-dimension dictionary (symbol `D`), typically an unembedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    data: DMatrix<f64>,
    labels: Vec<String>,
}

impl Dictionary {
    /// Validates shape, finiteness and that no atom is identically zero.
    /// `labels` may be empty; otherwise it must name every atom.
    pub fn new(data: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(SparseError::EmptyMatrix);
        }
        check_finite(&data)?;
        if !labels.is_empty() && labels.len() != data.nrows() {
            return Err(SparseError::LabelCount {
                labels: labels.len(),
                atoms: data.nrows(),
            });
        }
        for (j, row) in data.row_iter().enumerate() {
            if row.iter().all(|&x| x == 0.0) {
                return Err(SparseError::ZeroAtom(j));
            }
        }
        Ok(Self { data, labels })
    }

    pub fn from_rows(v: usize, d: usize, values: &[f64], labels: Vec<String>) -> Result<Self> {
        if values.len() != v * d {
            return Err(SparseError::ShapeMismatch {
                expected: (v, d),
                actual: (values.len() / d.max(1), d),
            });
        }
        Self::new(DMatrix::from_row_slice(v, d, values), labels)
    }

    pub fn n_atoms(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Label of atom `j`, or `#j` when the dictionary is unlabeled.
    pub fn label(&self, j: usize) -> String {
        self.labels.get(j).cloned().unwrap_or_else(|| format!("#{j}"))
    }

    /// The sub-dictionary made of `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dictionary> {
        if rows.is_empty() {
            return Err(SparseError::EmptySupport);
        }
        for &r in rows {
            if r >= self.n_atoms() {
                return Err(SparseError::AtomOutOfRange {
                    index: r,
                    atoms: self.n_atoms(),
                });
            }
        }
        let data = self.data.select_rows(rows.iter());
        let labels = if self.labels.is_empty() {
            Vec::new()
        } else {
            rows.iter().map(|&r| self.labels[r].clone()).collect()
        };
        Ok(Dictionary { data, labels })
    }

    /// Copy with every atom scaled to unit Euclidean norm.
    pub fn normalized(&self) -> Dictionary {
        let mut data = self.data.clone();
        for mut row in data.row_iter_mut() {
            let norm = row.norm();
            row /= norm;
        }
        Dictionary {
            data,
            labels: self.labels.clone(),
        }
    }
}

/// Ordered set of selected atom indices (symbol `S`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SupportSet(Vec<usize>);

impl SupportSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn from_indices(indices: Vec<usize>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &i in &indices {
            if !seen.insert(i) {
                return Err(SparseError::DuplicateAtom(i));
            }
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    /// Appends `index`; returns false if it was already present.
    pub fn push(&mut self, index: usize) -> bool {
        if self.contains(index) {
            return false;
        }
        self.0.push(index);
        true
    }

    fn validate(&self, atoms: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(SparseError::EmptySupport);
        }
        let mut seen = vec![false; atoms];
        for &i in &self.0 {
            if i >= atoms {
                return Err(SparseError::AtomOutOfRange { index: i, atoms });
            }
            if seen[i] {
                return Err(SparseError::DuplicateAtom(i));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Tuning knobs for [`somp_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SompOptions {
    /// Divide each atom's correlation score by the atom norm during
    /// selection. Off by default: raw unembedding rows are used as-is.
    pub normalize_atoms: bool,
}

/// Output of the simultaneous pursuit.
#[derive(Debug, Clone, PartialEq)]
pub struct SompResult {
    pub support: SupportSet,
    /// n x |support|, columns in support order.
    pub coefficients: DMatrix<f64>,
    /// n x d.
    pub reconstruction: DMatrix<f64>,
    /// Residual Frobenius norm after each completed iteration.
    pub residual_norms: Vec<f64>,
    /// Explained variance after each completed iteration.
    pub explained_variance: Vec<f64>,
    /// Set when the residual vanished before the requested iteration count.
    pub early_stopped: bool,
    /// Set when any refit hit linearly dependent atoms.
    pub rank_deficient: bool,
}

impl SompResult {
    pub fn final_explained_variance(&self) -> Option<f64> {
        self.explained_variance.last().copied()
    }

    pub fn final_residual_norm(&self) -> Option<f64> {
        self.residual_norms.last().copied()
    }
}

/// Least-squares coefficients plus rank diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Refit {
    /// n x |support|.
    pub coefficients: DMatrix<f64>,
    /// Numerical rank of the selected atoms.
    pub rank: usize,
    /// True when the selected atoms are linearly dependent beyond
    /// [`RANK_TOL`]; the coefficients are then the minimum-norm solution.
    pub rank_deficient: bool,
}

fn check_columns(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(SparseError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Per-atom score `sum_i |<D[j], R[i]>|` (optionally divided by `||D[j]||`).
fn atom_scores(residual: &DMatrix<f64>, dict: &Dictionary, normalize: bool) -> Vec<f64> {
    let correlations = dict.data() * residual.transpose();
    correlations
        .row_iter()
        .enumerate()
        .map(|(j, row)| {
            let l1: f64 = row.iter().map(|x| x.abs()).sum();
            if normalize {
                l1 / dict.data().row(j).norm()
            } else {
                l1
            }
        })
        .collect()
}

fn argmax_excluding(scores: &[f64], excluded: &SupportSet) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in scores.iter().enumerate() {
        if excluded.contains(j) {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((j, s)),
        }
    }
    best.map(|(j, _)| j)
}

/// Picks the atom whose correlations with the residual rows have the largest
/// L1 norm, skipping `excluded`. Ties go to the lowest index.
pub fn select_atom(residual: &SignalMatrix, dict: &Dictionary, excluded: &SupportSet) -> Result<usize> {
    select_atom_with(residual.data(), dict, excluded, SompOptions::default())
}

fn select_atom_with(
    residual: &DMatrix<f64>,
    dict: &Dictionary,
    excluded: &SupportSet,
    options: SompOptions,
) -> Result<usize> {
    check_columns(dict.dim(), residual.ncols())?;
    let scores = atom_scores(residual, dict, options.normalize_atoms);
    argmax_excluding(&scores, excluded).ok_or(SparseError::AllAtomsExcluded(dict.n_atoms()))
}

/// One matching-pursuit step on a single sample: the atom with the largest
/// absolute inner product and that (signed) inner product.
pub fn mp_step(sample: &[f64], dict: &Dictionary) -> Result<(usize, f64)> {
    check_columns(dict.dim(), sample.len())?;
    let row = DMatrix::from_row_slice(1, sample.len(), sample);
    let scores = atom_scores(&row, dict, false);
    let index = argmax_excluding(&scores, &SupportSet::new()).ok_or(SparseError::AllAtomsExcluded(dict.n_atoms()))?;
    let inner = dict.data().row(index).dot(&row.row(0));
    Ok((index, inner))
}

/// Minimum-norm least squares `min_W ||H - W * D[support]||_F`.
///
/// Solved through the SVD of `D[support]^T` (d x k); singular values at or
/// below `RANK_TOL * sigma_max` are dropped.
pub fn refit(signal: &SignalMatrix, dict: &Dictionary, support: &SupportSet) -> Result<Refit> {
    check_columns(dict.dim(), signal.dim())?;
    support.validate(dict.n_atoms())?;
    Ok(refit_unchecked(signal.data(), dict, support.indices()))
}

fn refit_unchecked(signal: &DMatrix<f64>, dict: &Dictionary, support: &[usize]) -> Refit {
    // A = D_S^T (d x k), B = H^T (d x n); solve A X = B, W = X^T.
    let atoms_t = dict.data().select_rows(support.iter()).transpose();
    let k = atoms_t.ncols();
    let svd = atoms_t.svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let sigma_max = svd.singular_values.max();
    let cutoff = RANK_TOL * sigma_max;

    let inv_sigma = DVector::from_iterator(
        svd.singular_values.len(),
        svd.singular_values
            .iter()
            .map(|&s| if s > cutoff { 1.0 / s } else { 0.0 }),
    );
    let rank = inv_sigma.iter().filter(|&&s| s != 0.0).count();

    // X = V diag(1/s) U^T B
    let mut ut_b = u.transpose() * signal.transpose();
    for (mut row, &s) in ut_b.row_iter_mut().zip(inv_sigma.iter()) {
        row *= s;
    }
    let x = v_t.transpose() * ut_b;

    Refit {
        coefficients: x.transpose(),
        rank,
        rank_deficient: rank < k,
    }
}

/// `1 - ||H - H_r||_F^2 / ||H||_F^2`, clamped to `[0, 1]`.
pub fn explained_variance(signal: &SignalMatrix, reconstruction: &DMatrix<f64>) -> Result<f64> {
    let h = signal.data();
    if h.shape() != reconstruction.shape() {
        return Err(SparseError::ShapeMismatch {
            expected: h.shape(),
            actual: reconstruction.shape(),
        });
    }
    let energy = h.norm_squared();
    if energy.sqrt() <= ZERO_SIGNAL_TOL {
        return Err(SparseError::ZeroSignal(energy.sqrt()));
    }
    let residual = (h - reconstruction).norm_squared();
    Ok((1.0 - residual / energy).clamp(0.0, 1.0))
}

/// Simultaneous orthogonal matching pursuit with default options.
pub fn somp(signal: &SignalMatrix, dict: &Dictionary, n_iters: usize) -> Result<SompResult> {
    somp_with(signal, dict, n_iters, SompOptions::default())
}

pub fn somp_with(signal: &SignalMatrix, dict: &Dictionary, n_iters: usize, options: SompOptions) -> Result<SompResult> {
    check_columns(dict.dim(), signal.dim())?;
    if n_iters == 0 || n_iters > dict.n_atoms() {
        return Err(SparseError::InvalidIterations {
            requested: n_iters,
            atoms: dict.n_atoms(),
        });
    }

    let h = signal.data();
    let (n, d) = h.shape();
    let energy = h.norm_squared();
    let signal_norm = energy.sqrt();

    let mut support = SupportSet::new();
    let mut coefficients = DMatrix::zeros(n, 0);
    let mut reconstruction = DMatrix::zeros(n, d);
    let mut residual = h.clone();
    let mut residual_norms = Vec::with_capacity(n_iters);
    let mut explained = Vec::with_capacity(n_iters);
    let mut early_stopped = false;
    let mut rank_deficient = false;

    for _ in 0..n_iters {
        if residual.norm() <= EARLY_STOP_TOL * signal_norm {
            early_stopped = true;
            break;
        }
        let atom = select_atom_with(&residual, dict, &support, options)?;
        support.push(atom);

        let fit = refit_unchecked(h, dict, support.indices());
        rank_deficient |= fit.rank_deficient;
        reconstruction = &fit.coefficients * dict.data().select_rows(support.indices().iter());
        coefficients = fit.coefficients;
        residual = h - &reconstruction;

        let residual_energy = residual.norm_squared();
        residual_norms.push(residual_energy.sqrt());
        explained.push((1.0 - residual_energy / energy).clamp(0.0, 1.0));
    }

    Ok(SompResult {
        support,
        coefficients,
        reconstruction,
        residual_norms,
        explained_variance: explained,
        early_stopped,
        rank_deficient,
    })
}
