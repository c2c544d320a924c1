//! Client-side factor computation, coordinator-side aggregation, the
//! closed-form weight solve, and inference.
//!
//! A one-layer network `y = f(X^T w)` is trained by minimizing the squared
//! error before the activation, between `X^T w` and `f^-1(d)`, plus an L2
//! penalty. That cost is convex and its minimizer solves
//! `(X F F X^T + lambda I) w = X F F dbar` where `F` is diagonal with
//! `f'(dbar)` on the diagonal. With the economy SVD `X F = U S V^T` the
//! solution becomes `w = U (S S^T + lambda I)^-1 U^T m`, `m = X F F dbar`.
//!
//! Both ingredients split across column partitions of `X`: the `(U, S)`
//! factors merge through [`merge_svd`] and the `m` vectors simply add.
//! A client therefore ships only its `U S` product and `m` vector per
//! output neuron, and the coordinator can fold any number of clients, in
//! any order and at any time, into the exact centralized solution.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::activation::ActivationSpec;
use crate::error::{Error, Result};
use crate::svd::{economy_svd, merge_svd, SvdFactors};

/// One client-local batch, ready to fit: inputs with the bias row
/// prepended and targets already encoded into the activation band.
#[derive(Debug, Clone)]
pub struct DataBatch {
    inputs: Array2<f64>,
    targets: Array2<f64>,
}

impl DataBatch {
    /// Builds a batch from raw features (`num_features x n`) and encoded
    /// targets (`n x num_outputs`), prepending the bias row of ones.
    pub fn new(features: ArrayView2<'_, f64>, targets: Array2<f64>) -> Result<Self> {
        let n = features.ncols();
        if n == 0 {
            return Err(Error::Argument("batch contains zero samples".into()));
        }
        if targets.nrows() != n {
            return Err(Error::Shape(format!(
                "targets have {} rows but the batch has {} samples",
                targets.nrows(),
                n
            )));
        }
        if targets.ncols() == 0 {
            return Err(Error::Argument("batch has zero output columns".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("features contain a non-finite entry".into()));
        }
        let mut inputs = Array2::ones((features.nrows() + 1, n));
        inputs
            .slice_mut(ndarray::s![1.., ..])
            .assign(&features);
        Ok(Self { inputs, targets })
    }

    /// Inputs including the bias row (`(num_features + 1) x n`).
    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn sample_count(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Per-output factor pair: the scaled product `U S` and the `m` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFactor {
    /// `U diag(S)` of the weighted inputs, `num_features x rank`.
    pub us: Array2<f64>,
    /// `X F F dbar`, length `num_features`.
    pub m_vec: Array1<f64>,
}

/// Everything a client transmits: one factor pair per output neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    per_output: Vec<OutputFactor>,
    num_features: usize,
    sample_count: Option<usize>,
}

impl ClientUpdate {
    /// Validates and assembles an update. `sample_count` is diagnostic
    /// only and unknown (`None`) for updates decoded off the wire.
    pub fn new(per_output: Vec<OutputFactor>, sample_count: Option<usize>) -> Result<Self> {
        let first = per_output
            .first()
            .ok_or_else(|| Error::Argument("update has no outputs".into()))?;
        let num_features = first.us.nrows();
        if num_features == 0 {
            return Err(Error::Argument("update has zero feature rows".into()));
        }
        for (k, fac) in per_output.iter().enumerate() {
            if fac.us.nrows() != num_features || fac.m_vec.len() != num_features {
                return Err(Error::Shape(format!(
                    "output {k}: expected {num_features} feature rows, got us {}x{} and m {}",
                    fac.us.nrows(),
                    fac.us.ncols(),
                    fac.m_vec.len()
                )));
            }
            let rank_cap = sample_count.map_or(num_features, |n| n.min(num_features));
            if fac.us.ncols() > rank_cap {
                return Err(Error::Shape(format!(
                    "output {k}: rank {} exceeds bound {rank_cap}",
                    fac.us.ncols()
                )));
            }
            if fac.us.iter().any(|v| !v.is_finite()) || fac.m_vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "output {k}: factor contains a non-finite entry"
                )));
            }
        }
        Ok(Self {
            per_output,
            num_features,
            sample_count,
        })
    }

    pub fn per_output(&self) -> &[OutputFactor] {
        &self.per_output
    }

    pub fn num_outputs(&self) -> usize {
        self.per_output.len()
    }

    /// Feature-row count, bias row included.
    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn sample_count(&self) -> Option<usize> {
        self.sample_count
    }
}

/// Computes a client's local update from its batch.
///
/// Per output `k`: `dbar = f^-1(targets_k)`, `fvec = f'(dbar)`, the factors
/// are the economy SVD of `X diag(fvec)`, and `m = X (fvec * fvec * dbar)`
/// with `*` elementwise.
pub fn fit_client(batch: &DataBatch, act: &ActivationSpec) -> Result<ClientUpdate> {
    let x = batch.inputs();
    let n = batch.sample_count();
    let mut per_output = Vec::with_capacity(batch.targets().ncols());
    for target_col in batch.targets().axis_iter(Axis(1)) {
        let dbar = act.inverse(target_col)?;
        let fvec = act.derivative_at(dbar.view())?;

        let mut weighted = x.clone();
        for (j, mut col) in weighted.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * fvec[j]);
        }
        let factors = economy_svd(weighted.view())?;

        let m_vec = x.dot(&(&fvec * &fvec * &dbar));
        per_output.push(OutputFactor {
            us: factors.product(),
            m_vec,
        });
    }
    ClientUpdate::new(per_output, Some(n))
}

/// The coordinator's running aggregate: per output, the merged `U S`
/// product and the summed `m` vector.
#[derive(Debug, Clone, Default)]
pub struct AggregateState {
    per_output: Vec<OutputFactor>,
    clients_incorporated: usize,
}

impl AggregateState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn per_output(&self) -> &[OutputFactor] {
        &self.per_output
    }

    pub fn clients_incorporated(&self) -> usize {
        self.clients_incorporated
    }

    pub fn is_empty(&self) -> bool {
        self.clients_incorporated == 0
    }

    pub fn num_features(&self) -> Option<usize> {
        self.per_output.first().map(|f| f.us.nrows())
    }

    /// Folds one client update into the aggregate. The first update seeds
    /// the state verbatim; later ones must match its shape. The state is
    /// untouched if any part of the update fails to merge.
    pub fn incorporate(&mut self, update: &ClientUpdate) -> Result<()> {
        if self.is_empty() {
            self.per_output = update.per_output().to_vec();
            self.clients_incorporated = 1;
            return Ok(());
        }
        if update.num_outputs() != self.per_output.len() {
            return Err(Error::Shape(format!(
                "update has {} outputs, aggregate has {}",
                update.num_outputs(),
                self.per_output.len()
            )));
        }
        let rows = self.num_features().unwrap();
        if update.num_features() != rows {
            return Err(Error::Shape(format!(
                "update has {} feature rows, aggregate has {rows}",
                update.num_features()
            )));
        }

        // Merge into a scratch vector first so a mid-way failure cannot
        // leave the aggregate partially updated.
        let mut merged = Vec::with_capacity(self.per_output.len());
        for (k, (acc, upd)) in self
            .per_output
            .iter()
            .zip(update.per_output())
            .enumerate()
        {
            let left = SvdFactors::from_scaled_columns(acc.us.view())
                .map_err(|e| Error::Shape(format!("output {k}: {e}")))?;
            let right = SvdFactors::from_scaled_columns(upd.us.view())
                .map_err(|e| Error::Shape(format!("output {k}: {e}")))?;
            let factors = merge_svd(&left, &right)
                .map_err(|e| Error::Shape(format!("output {k}: {e}")))?;
            merged.push(OutputFactor {
                us: factors.product(),
                m_vec: &acc.m_vec + &upd.m_vec,
            });
        }
        self.per_output = merged;
        self.clients_incorporated += 1;
        Ok(())
    }
}

/// The trained global model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    w: Array2<f64>,
    activation: ActivationSpec,
    lambda_used: f64,
}

impl ModelWeights {
    pub fn new(w: Array2<f64>, activation: ActivationSpec, lambda_used: f64) -> Result<Self> {
        if w.nrows() < 2 || w.ncols() == 0 {
            return Err(Error::Argument(format!(
                "weight matrix {}x{} is degenerate",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("weights contain a non-finite entry".into()));
        }
        if lambda_used < 0.0 {
            return Err(Error::Argument(format!(
                "lambda must be non-negative, got {lambda_used}"
            )));
        }
        Ok(Self {
            w,
            activation,
            lambda_used,
        })
    }

    /// Weight matrix, `(num_features + 1) x num_classes`, bias row first.
    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.activation
    }

    pub fn lambda_used(&self) -> f64 {
        self.lambda_used
    }

    pub fn num_classes(&self) -> usize {
        self.w.ncols()
    }

    /// Raw feature count expected by [`predict`], bias excluded.
    pub fn num_raw_features(&self) -> usize {
        self.w.nrows() - 1
    }
}

/// Solves the global weights from an aggregate.
///
/// Per output: `w = U (S S^T + lambda I)^-1 U^T m` over the retained rank,
/// materialized right-to-left as two matrix-vector products and a diagonal
/// scale. With `lambda = 0` the inversion skips singular values at or
/// below the truncation threshold (pseudo-inverse semantics).
pub fn solve_weights(
    state: &AggregateState,
    lambda: f64,
    act: &ActivationSpec,
) -> Result<ModelWeights> {
    if lambda < 0.0 {
        return Err(Error::Argument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    if state.is_empty() {
        return Err(Error::Argument(
            "cannot solve weights from an empty aggregate".into(),
        ));
    }
    let rows = state.num_features().unwrap();
    let mut w = Array2::zeros((rows, state.per_output().len()));
    for (k, fac) in state.per_output().iter().enumerate() {
        let factors = SvdFactors::from_scaled_columns(fac.us.view())?;
        let coeffs = factors.u().t().dot(&fac.m_vec);
        let s = factors.singular_values();
        let s_max = s.first().copied().unwrap_or(0.0);
        let tau = rows as f64 * f64::EPSILON * s_max;
        let scaled = Array1::from_iter(s.iter().zip(coeffs.iter()).map(|(&si, &ci)| {
            if lambda == 0.0 && si <= tau {
                0.0
            } else {
                ci / (si * si + lambda)
            }
        }));
        let wk = factors.u().dot(&scaled);
        w.column_mut(k).assign(&wk);
    }
    ModelWeights::new(w, *act, lambda)
}

/// Network outputs `f(X^T w)` for raw inputs without the bias row.
/// Returns an `n x num_classes` matrix.
pub fn predict(x: ArrayView2<'_, f64>, weights: &ModelWeights) -> Result<Array2<f64>> {
    if x.nrows() != weights.num_raw_features() {
        return Err(Error::Shape(format!(
            "input has {} features but the model expects {}",
            x.nrows(),
            weights.num_raw_features()
        )));
    }
    let mut xb = Array2::ones((x.nrows() + 1, x.ncols()));
    xb.slice_mut(ndarray::s![1.., ..]).assign(&x);
    let z = xb.t().dot(weights.weights());
    Ok(weights.activation().forward_map(z.view()))
}

/// Index of the strongest output per sample; ties go to the lowest index.
pub fn predict_class_indices(x: ArrayView2<'_, f64>, weights: &ModelWeights) -> Result<Vec<usize>> {
    let outputs = predict(x, weights)?;
    Ok(outputs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Argmax classification mapped through a class-label list.
pub fn classify<L: Clone>(
    x: ArrayView2<'_, f64>,
    weights: &ModelWeights,
    classes: &[L],
) -> Result<Vec<L>> {
    if classes.len() != weights.num_classes() {
        return Err(Error::Shape(format!(
            "class list has {} entries but the model has {} outputs",
            classes.len(),
            weights.num_classes()
        )));
    }
    let indices = predict_class_indices(x, weights)?;
    Ok(indices.into_iter().map(|i| classes[i].clone()).collect())
}

/// Fraction of samples whose predicted class index matches `label_ids`.
pub fn accuracy(
    x: ArrayView2<'_, f64>,
    label_ids: &[u32],
    weights: &ModelWeights,
) -> Result<f64> {
    if label_ids.len() != x.ncols() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            label_ids.len(),
            x.ncols()
        )));
    }
    if label_ids.is_empty() {
        return Err(Error::Argument("cannot score an empty sample set".into()));
    }
    let predicted = predict_class_indices(x, weights)?;
    let correct = predicted
        .iter()
        .zip(label_ids)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    Ok(correct as f64 / label_ids.len() as f64)
}
