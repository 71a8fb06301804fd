//! Training that is robust to missing values in inputs and targets.
//!
//! The central idea: missing inputs are stored as zeros, missing targets
//! backpropagate zero error, and the squared-error loss and its gradients are
//! rescaled by per-subject availability factors so that sparsely observed
//! subjects and nodes contribute proportionally:
//!
//! * `beta_x[j]`    — observed fraction of the whole T×N input grid,
//! * `beta_m[j][m]` — observed fraction of target node m over T steps,
//! * `beta_n[j][n]` — observed fraction of input node n over T steps.
//!
//! Per output node m the loss is
//! `L(m) = 1/(2JT) Σ_{j,t observed} (y - s)^2 / (beta_x[j] beta_m[j][m])`
//! and the trained scalar objective is the sum over m. Input-weight gradients
//! additionally divide subject j's contribution to column n by `beta_n[j][n]`.
//! With nothing missing every factor is exactly 1 and the whole scheme reduces
//! bit-for-bit to standard full-gradient peephole-LSTM backpropagation through
//! time.

use rayon::prelude::*;

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::lstm::{
    forward_sequence, forward_subject, init_params, ForwardCache, LstmParams, ParamId, Prediction,
    StepCache, PARAM_IDS,
};
use crate::math::{sigmoid_deriv, tanh_deriv, Matrix, Rng};

/// Per-subject availability normalization factors, computed from masks only.
/// A node with zero observed points gets the sentinel value 1 and contributes
/// nothing (its error terms are identically zero).
#[derive(Debug, Clone, PartialEq)]
pub struct NormFactors {
    pub beta_x: Vec<f64>,
    pub beta_m: Vec<Vec<f64>>,
    pub beta_n: Vec<Vec<f64>>,
}

impl NormFactors {
    /// All factors forced to 1: the standard (imputed, fully observed) path.
    pub fn ones(n_subjects: usize, t_dim: usize, n_dim: usize) -> Self {
        let _ = t_dim;
        NormFactors {
            beta_x: vec![1.0; n_subjects],
            beta_m: vec![vec![1.0; n_dim]; n_subjects],
            beta_n: vec![vec![1.0; n_dim]; n_subjects],
        }
    }
}

/// Availability factors of a batch: `beta_x = |x_j| / (T N)`,
/// `beta_m(m) = |s_j(m)| / T`, `beta_n(n) = |x_j(n)| / T`.
pub fn compute_norm_factors(batch: &MaskedBatch) -> NormFactors {
    let t_len = batch.t_len() as f64;
    let n_dim = batch.input_dim();
    let m_dim = batch.target_dim();

    let mut beta_x = Vec::with_capacity(batch.n_subjects());
    let mut beta_m = Vec::with_capacity(batch.n_subjects());
    let mut beta_n = Vec::with_capacity(batch.n_subjects());

    for j in 0..batch.n_subjects() {
        let mut x_total = 0usize;
        let mut x_per_node = vec![0usize; n_dim];
        for row in &batch.x_mask[j] {
            for (n, &m) in row.iter().enumerate() {
                if m {
                    x_total += 1;
                    x_per_node[n] += 1;
                }
            }
        }
        let mut s_per_node = vec![0usize; m_dim];
        for row in &batch.s_mask[j] {
            for (m, &mk) in row.iter().enumerate() {
                if mk {
                    s_per_node[m] += 1;
                }
            }
        }
        beta_x.push(if x_total == 0 {
            1.0
        } else {
            x_total as f64 / (t_len * n_dim as f64)
        });
        beta_n.push(
            x_per_node
                .iter()
                .map(|&c| if c == 0 { 1.0 } else { c as f64 / t_len })
                .collect(),
        );
        beta_m.push(
            s_per_node
                .iter()
                .map(|&c| if c == 0 { 1.0 } else { c as f64 / t_len })
                .collect(),
        );
    }

    NormFactors {
        beta_x,
        beta_m,
        beta_n,
    }
}

/// Scalar loss and its gradient at the network output.
///
/// Missing targets contribute nothing and receive exactly zero gradient.
pub fn loss_and_output_grad(
    pred: &Prediction,
    batch: &MaskedBatch,
    nf: &NormFactors,
) -> (f64, Vec<Vec<Vec<f64>>>) {
    let n_subj = batch.n_subjects();
    let t_len = batch.t_len();
    let m_dim = batch.target_dim();
    let jt = (n_subj * t_len) as f64;

    let mut loss = 0.0;
    let mut delta_y = vec![vec![vec![0.0; m_dim]; t_len]; n_subj];
    for j in 0..n_subj {
        for t in 0..t_len {
            for m in 0..m_dim {
                if batch.s_mask[j][t][m] {
                    let w = 1.0 / (nf.beta_x[j] * nf.beta_m[j][m]);
                    let r = pred.y[j][t][m] - batch.s[j][t][m];
                    loss += w * r * r / (2.0 * jt);
                    delta_y[j][t][m] = w * r / jt;
                }
            }
        }
    }
    (loss, delta_y)
}

/// Gradients of the scalar loss, mirroring the parameter arrays. `delta_x`
/// (loss sensitivity to the input vectors) is filled only on request; the
/// optimizer never uses it.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub u_f: Matrix,
    pub u_i: Matrix,
    pub u_c: Matrix,
    pub u_o: Matrix,
    pub v_f: Vec<f64>,
    pub v_i: Vec<f64>,
    pub v_o: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
    pub delta_x: Option<Vec<Vec<Vec<f64>>>>,
}

impl Gradients {
    fn zeros(n: usize, m: usize) -> Self {
        Gradients {
            w_f: Matrix::zeros(m, n),
            w_i: Matrix::zeros(m, n),
            w_c: Matrix::zeros(m, n),
            w_o: Matrix::zeros(m, n),
            u_f: Matrix::zeros(m, m),
            u_i: Matrix::zeros(m, m),
            u_c: Matrix::zeros(m, m),
            u_o: Matrix::zeros(m, m),
            v_f: vec![0.0; m],
            v_i: vec![0.0; m],
            v_o: vec![0.0; m],
            b_f: vec![0.0; m],
            b_i: vec![0.0; m],
            b_c: vec![0.0; m],
            b_o: vec![0.0; m],
            delta_x: None,
        }
    }

    pub fn array(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::Wf => self.w_f.data(),
            ParamId::Wi => self.w_i.data(),
            ParamId::Wc => self.w_c.data(),
            ParamId::Wo => self.w_o.data(),
            ParamId::Uf => self.u_f.data(),
            ParamId::Ui => self.u_i.data(),
            ParamId::Uc => self.u_c.data(),
            ParamId::Uo => self.u_o.data(),
            ParamId::Vf => &self.v_f,
            ParamId::Vi => &self.v_i,
            ParamId::Vo => &self.v_o,
            ParamId::Bf => &self.b_f,
            ParamId::Bi => &self.b_i,
            ParamId::Bc => &self.b_c,
            ParamId::Bo => &self.b_o,
        }
    }

    pub fn array_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id {
            ParamId::Wf => self.w_f.data_mut(),
            ParamId::Wi => self.w_i.data_mut(),
            ParamId::Wc => self.w_c.data_mut(),
            ParamId::Wo => self.w_o.data_mut(),
            ParamId::Uf => self.u_f.data_mut(),
            ParamId::Ui => self.u_i.data_mut(),
            ParamId::Uc => self.u_c.data_mut(),
            ParamId::Uo => self.u_o.data_mut(),
            ParamId::Vf => &mut self.v_f,
            ParamId::Vi => &mut self.v_i,
            ParamId::Vo => &mut self.v_o,
            ParamId::Bf => &mut self.b_f,
            ParamId::Bi => &mut self.b_i,
            ParamId::Bc => &mut self.b_c,
            ParamId::Bo => &mut self.b_o,
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for id in PARAM_IDS {
            let dst = self.array_mut(id);
            let src = other.array(id);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

fn hadamard_into(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d = x * y;
    }
}

/// Backward pass for one subject; returns its (already availability-scaled)
/// gradient contribution.
fn backward_subject(
    params: &LstmParams,
    steps: &[StepCache],
    delta_y: &[Vec<f64>],
    xs: &[Vec<f64>],
    beta_n: &[f64],
    want_input_grads: bool,
) -> Result<(Gradients, Option<Vec<Vec<f64>>>)> {
    let n = params.input_dim;
    let m = params.hidden_dim;
    let t_len = steps.len();
    let mut g = Gradients::zeros(n, m);
    // input-weight grads accumulate unscaled; columns are divided by beta_n
    // once at the end
    let mut dx = if want_input_grads {
        Some(vec![vec![0.0; n]; t_len])
    } else {
        None
    };

    let zeros = vec![0.0; m];
    let mut d_f_next = vec![0.0; m];
    let mut d_i_next = vec![0.0; m];
    let mut d_z_next = vec![0.0; m];
    let mut d_o_next = vec![0.0; m];
    let mut d_c_next = vec![0.0; m];
    let mut ft_next = vec![0.0; m];

    let mut d_f = vec![0.0; m];
    let mut d_i = vec![0.0; m];
    let mut d_z = vec![0.0; m];
    let mut d_o = vec![0.0; m];

    for t in (0..t_len).rev() {
        let step = &steps[t];
        let c_prev = if t > 0 { &steps[t - 1].c } else { &zeros };
        let h_prev = if t > 0 { &steps[t - 1].h } else { &zeros };

        // delta h: recurrent contributions from t+1 plus the output error
        let mut d_h = delta_y[t].clone();
        if t + 1 < t_len {
            let uf = params.u_f.matvec_transpose(&d_f_next)?;
            let ui = params.u_i.matvec_transpose(&d_i_next)?;
            let uc = params.u_c.matvec_transpose(&d_z_next)?;
            let uo = params.u_o.matvec_transpose(&d_o_next)?;
            for k in 0..m {
                d_h[k] += uf[k] + ui[k] + uc[k] + uo[k];
            }
        }

        // output gate, then cell (the output peephole feeds d_c at the same t)
        let mut d_ot = vec![0.0; m];
        hadamard_into(&mut d_ot, &d_h, &step.ct);
        for k in 0..m {
            d_o[k] = d_ot[k] * sigmoid_deriv(step.o[k]);
        }

        let mut d_c = vec![0.0; m];
        for k in 0..m {
            let mut v = d_h[k] * step.ot[k] * tanh_deriv(step.c[k]); // via c~
            v += params.v_o[k] * d_o[k]; // output peephole, same step
            v += params.v_f[k] * d_f_next[k] + params.v_i[k] * d_i_next[k]; // gate peepholes from t+1
            v += d_c_next[k] * ft_next[k]; // forget path from t+1
            d_c[k] = v;
        }

        for k in 0..m {
            d_z[k] = d_c[k] * step.it[k] * tanh_deriv(step.z[k]);
            d_i[k] = d_c[k] * step.zt[k] * sigmoid_deriv(step.i[k]);
            d_f[k] = d_c[k] * c_prev[k] * sigmoid_deriv(step.f[k]);
        }

        if let Some(dx) = dx.as_mut() {
            let wf = params.w_f.matvec_transpose(&d_f)?;
            let wi = params.w_i.matvec_transpose(&d_i)?;
            let wc = params.w_c.matvec_transpose(&d_z)?;
            let wo = params.w_o.matvec_transpose(&d_o)?;
            for nn in 0..n {
                dx[t][nn] = wf[nn] + wi[nn] + wc[nn] + wo[nn];
            }
        }

        // weight gradient accumulation
        g.w_f.add_outer_scaled(&d_f, &xs[t], 1.0);
        g.w_i.add_outer_scaled(&d_i, &xs[t], 1.0);
        g.w_c.add_outer_scaled(&d_z, &xs[t], 1.0);
        g.w_o.add_outer_scaled(&d_o, &xs[t], 1.0);
        g.u_f.add_outer_scaled(&d_f, h_prev, 1.0);
        g.u_i.add_outer_scaled(&d_i, h_prev, 1.0);
        g.u_c.add_outer_scaled(&d_z, h_prev, 1.0);
        g.u_o.add_outer_scaled(&d_o, h_prev, 1.0);
        for k in 0..m {
            g.v_f[k] += d_f[k] * c_prev[k];
            g.v_i[k] += d_i[k] * c_prev[k];
            g.v_o[k] += d_o[k] * step.c[k];
            g.b_f[k] += d_f[k];
            g.b_i[k] += d_i[k];
            g.b_c[k] += d_z[k];
            g.b_o[k] += d_o[k];
        }

        std::mem::swap(&mut d_f_next, &mut d_f);
        std::mem::swap(&mut d_i_next, &mut d_i);
        std::mem::swap(&mut d_z_next, &mut d_z);
        std::mem::swap(&mut d_o_next, &mut d_o);
        d_c_next = d_c;
        ft_next = step.ft.clone();
    }

    // per-input-node availability normalization of the input weights
    for w in [&mut g.w_f, &mut g.w_i, &mut g.w_c, &mut g.w_o] {
        for r in 0..m {
            for c in 0..n {
                let v = w.get(r, c) / beta_n[c];
                w.set(r, c, v);
            }
        }
    }

    Ok((g, dx))
}

/// Full-gradient backpropagation through time over a batch.
///
/// Subjects are processed in parallel; their contributions are reduced in the
/// fixed sorted-subject order so results are bit-identical to sequential
/// execution.
pub fn backward(
    params: &LstmParams,
    cache: &ForwardCache,
    delta_y: &[Vec<Vec<f64>>],
    batch: &MaskedBatch,
    nf: &NormFactors,
    want_input_grads: bool,
) -> Result<Gradients> {
    let n_subj = batch.n_subjects();
    debug_assert_eq!(cache.steps.len(), n_subj);
    debug_assert_eq!(delta_y.len(), n_subj);

    let per_subject: Vec<(Gradients, Option<Vec<Vec<f64>>>)> = (0..n_subj)
        .into_par_iter()
        .map(|j| {
            backward_subject(
                params,
                &cache.steps[j],
                &delta_y[j],
                &batch.x[j],
                &nf.beta_n[j],
                want_input_grads,
            )
        })
        .collect::<Result<_>>()?;

    let mut total = Gradients::zeros(params.input_dim, params.hidden_dim);
    let mut all_dx = want_input_grads.then(Vec::new);
    for (g, dx) in per_subject {
        total.add_assign(&g);
        if let (Some(all), Some(dx)) = (all_dx.as_mut(), dx) {
            all.push(dx);
        }
    }
    total.delta_x = all_dx;

    for id in PARAM_IDS {
        if total.array(id).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", id.name()),
                context: None,
            });
        }
    }
    Ok(total)
}

/// Momentum buffers and hyperparameters of batch gradient descent with L2
/// regularization: `v <- mu v - alpha (g + gamma w)`, `w <- w + v`.
#[derive(Debug, Clone)]
pub struct OptState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Apply L2 decay to bias vectors (off by default).
    pub decay_biases: bool,
    /// Apply L2 decay to peephole vectors (on by default).
    pub decay_peepholes: bool,
    velocity: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(params: &LstmParams, learning_rate: f64, weight_decay: f64, momentum: f64) -> Self {
        OptState {
            learning_rate,
            weight_decay,
            momentum,
            decay_biases: false,
            decay_peepholes: true,
            velocity: PARAM_IDS
                .iter()
                .map(|&id| vec![0.0; params.array(id).len()])
                .collect(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> &[f64] {
        let idx = PARAM_IDS.iter().position(|&p| p == id).unwrap();
        &self.velocity[idx]
    }
}

/// One momentum update applied to every weight array.
pub fn optimizer_step(params: &mut LstmParams, grads: &Gradients, opt: &mut OptState) {
    for (idx, &id) in PARAM_IDS.iter().enumerate() {
        let decay = if id.is_bias() {
            if opt.decay_biases { opt.weight_decay } else { 0.0 }
        } else if id.is_peephole() {
            if opt.decay_peepholes { opt.weight_decay } else { 0.0 }
        } else {
            opt.weight_decay
        };
        let vel = &mut opt.velocity[idx];
        let w = params.array_mut(id);
        let g = grads.array(id);
        for k in 0..w.len() {
            vel[k] = opt.momentum * vel[k] - opt.learning_rate * (g[k] + decay * w[k]);
            w[k] += vel[k];
        }
    }
}

/// Per-biomarker mean and median over the observed grid slots of a batch;
/// by contract computed on the training split only.
#[derive(Debug, Clone)]
pub struct ImputeStats {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
}

impl ImputeStats {
    pub fn from_batch(batch: &MaskedBatch) -> Result<Self> {
        let n = batch.input_dim();
        let slots = batch.t_len() + 1;
        let mut mean = Vec::with_capacity(n);
        let mut median = Vec::with_capacity(n);
        for node in 0..n {
            let mut vals: Vec<f64> = Vec::new();
            for j in 0..batch.n_subjects() {
                for slot in 0..slots {
                    let (v, observed) = batch.slot_value(j, slot, node);
                    if observed {
                        vals.push(v);
                    }
                }
            }
            if vals.is_empty() {
                return Err(Error::InvalidArgument {
                    what: "ImputeStats",
                    why: format!(
                        "biomarker `{}` has no observed values in the training batch",
                        batch.biomarkers[node]
                    ),
                });
            }
            mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = vals.len() / 2;
            median.push(if vals.len() % 2 == 1 {
                vals[mid]
            } else {
                0.5 * (vals[mid - 1] + vals[mid])
            });
        }
        Ok(ImputeStats { mean, median })
    }
}

/// Replace every missing cell with the training mean of its biomarker; the
/// result is fully observed (all masks true).
pub fn impute_mean(batch: &MaskedBatch, stats: &ImputeStats) -> MaskedBatch {
    let mut out = batch.clone();
    let slots = batch.t_len() + 1;
    let n = batch.input_dim();
    for j in 0..batch.n_subjects() {
        let mut vals = vec![vec![0.0; n]; slots];
        let masks = vec![vec![true; n]; slots];
        for slot in 0..slots {
            for node in 0..n {
                let (v, observed) = batch.slot_value(j, slot, node);
                vals[slot][node] = if observed { v } else { stats.mean[node] };
            }
        }
        out.set_subject_slots(j, &vals, &masks);
    }
    out
}

/// Carry the last observed value forward within each subject; leading missing
/// runs take the training median. The result is fully observed.
pub fn impute_forward(batch: &MaskedBatch, stats: &ImputeStats) -> MaskedBatch {
    let mut out = batch.clone();
    let slots = batch.t_len() + 1;
    let n = batch.input_dim();
    for j in 0..batch.n_subjects() {
        let mut vals = vec![vec![0.0; n]; slots];
        let masks = vec![vec![true; n]; slots];
        for node in 0..n {
            let mut last: Option<f64> = None;
            for slot in 0..slots {
                let (v, observed) = batch.slot_value(j, slot, node);
                let filled = if observed {
                    last = Some(v);
                    v
                } else {
                    last.unwrap_or(stats.median[node])
                };
                vals[slot][node] = filled;
            }
        }
        out.set_subject_slots(j, &vals, &masks);
    }
    out
}

/// Which training path to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Availability-normalized loss and gradients on the masked batch.
    Robust,
    /// Standard path on a mean-imputed batch.
    MeanImpute,
    /// Standard path on a forward-imputed batch.
    ForwardImpute,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Robust, TrainMode::MeanImpute, TrainMode::ForwardImpute];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Robust => "robust",
            TrainMode::MeanImpute => "mean-impute",
            TrainMode::ForwardImpute => "forward-impute",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMode> {
        match s {
            "robust" => Some(TrainMode::Robust),
            "mean-impute" => Some(TrainMode::MeanImpute),
            "forward-impute" => Some(TrainMode::ForwardImpute),
            _ => None,
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training hyperparameters. Defaults are the tuned full-batch settings:
/// learning rate 0.1, momentum 0.9, weight decay 1e-4, 1000 epochs, weights
/// initialized uniformly in [-0.05, 0.05].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub init_lo: f64,
    pub init_hi: f64,
    pub decay_biases: bool,
    pub decay_peepholes: bool,
    /// Optional early stopping on validation MAE; off by default.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            learning_rate: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
            mode: TrainMode::Robust,
            init_lo: -0.05,
            init_hi: 0.05,
            decay_biases: false,
            decay_peepholes: true,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Error::InvalidArgument {
            what: "TrainConfig",
            why,
        };
        if self.epochs == 0 {
            return Err(bad("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(bad(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.weight_decay < 0.0 {
            return Err(bad(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.init_lo < self.init_hi) {
            return Err(bad(format!(
                "init range must satisfy lo < hi, got [{}, {}]",
                self.init_lo, self.init_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Per-biomarker validation MAE in scaled units, when a validation batch
    /// is supplied. `None` entries mark biomarkers with no observed targets.
    pub val_mae: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
    /// Epoch at which early stopping triggered, if it did.
    pub stopped_at: Option<usize>,
}

/// Scaled-space per-biomarker MAE over observed targets.
fn scaled_mae(pred: &Prediction, batch: &MaskedBatch) -> Vec<Option<f64>> {
    let m_dim = batch.target_dim();
    let mut sums = vec![0.0; m_dim];
    let mut counts = vec![0usize; m_dim];
    for j in 0..batch.n_subjects() {
        for t in 0..batch.t_len() {
            for m in 0..m_dim {
                if batch.s_mask[j][t][m] {
                    sums[m] += (pred.y[j][t][m] - batch.s[j][t][m]).abs();
                    counts[m] += 1;
                }
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect()
}

fn mean_of_available(maes: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = maes.iter().filter_map(|v| *v).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Full-batch training: every epoch runs forward, loss, backward, and one
/// momentum step. Deterministic given the seed. In the imputation modes the
/// batch must already be imputed (fully observed) and the availability
/// factors are forced to 1.
pub fn train(
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    val_batch: Option<&MaskedBatch>,
) -> Result<(LstmParams, TrainHistory)> {
    cfg.validate()?;
    let n = batch.input_dim();
    let m = batch.target_dim();
    if batch.n_subjects() == 0 || batch.t_len() == 0 {
        return Err(Error::InvalidArgument {
            what: "train",
            why: "empty batch".into(),
        });
    }

    let nf = match cfg.mode {
        TrainMode::Robust => compute_norm_factors(batch),
        _ => {
            let fully_observed = batch
                .x_mask
                .iter()
                .all(|s| s.iter().all(|t| t.iter().all(|&b| b)))
                && batch.s_mask.iter().all(|s| s.iter().all(|t| t.iter().all(|&b| b)));
            if !fully_observed {
                return Err(Error::InvalidArgument {
                    what: "train",
                    why: format!("mode {} requires a pre-imputed (fully observed) batch", cfg.mode),
                });
            }
            NormFactors::ones(batch.n_subjects(), batch.t_len(), n)
        }
    };

    let mut rng = Rng::new(cfg.seed);
    let mut params = init_params(&mut rng, n, m, cfg.init_lo, cfg.init_hi)?;
    let mut opt = OptState::new(&params, cfg.learning_rate, cfg.weight_decay, cfg.momentum);
    opt.decay_biases = cfg.decay_biases;
    opt.decay_peepholes = cfg.decay_peepholes;

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, LstmParams, usize)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let (pred, cache) = forward_sequence(&params, batch)?;
        let (loss, delta_y) = loss_and_output_grad(&pred, batch, &nf);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let grads = backward(&params, &cache, &delta_y, batch, &nf, false)?;
        optimizer_step(&mut params, &grads, &mut opt);

        let val_mae = match val_batch {
            Some(vb) => {
                let (vp, _) = forward_sequence(&params, vb)?;
                Some(scaled_mae(&vp, vb))
            }
            None => None,
        };

        if let (Some(patience), Some(maes)) = (cfg.patience, val_mae.as_ref()) {
            if let Some(avg) = mean_of_available(maes) {
                let improved = best.as_ref().map_or(true, |(b, _, _)| avg < *b);
                if improved {
                    best = Some((avg, params.clone(), epoch));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                if since_best >= patience {
                    history.rows.push(EpochRow {
                        epoch,
                        train_loss: loss,
                        val_mae,
                    });
                    history.stopped_at = Some(epoch);
                    let (_, best_params, _) = best.unwrap();
                    return Ok((best_params, history));
                }
            }
        }

        history.rows.push(EpochRow {
            epoch,
            train_loss: loss,
            val_mae,
        });
    }

    Ok((params, history))
}

/// Loss restricted to one subject (the batch loss decomposes additively over
/// subjects); `total_j` keeps the 1/(2JT) convention of the full batch.
fn subject_loss(
    params: &LstmParams,
    batch: &MaskedBatch,
    nf: &NormFactors,
    j: usize,
    total_j: usize,
) -> Result<f64> {
    let steps = forward_subject(params, &batch.x[j])?;
    let t_len = batch.t_len();
    let jt = (total_j * t_len) as f64;
    let mut loss = 0.0;
    for t in 0..t_len {
        for m in 0..batch.target_dim() {
            if batch.s_mask[j][t][m] {
                let w = 1.0 / (nf.beta_x[j] * nf.beta_m[j][m]);
                let r = steps[t].h[m] - batch.s[j][t][m];
                loss += w * r * r / (2.0 * jt);
            }
        }
    }
    Ok(loss)
}

/// Configuration for the finite-difference gradient checker.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub t_len: usize,
    pub subjects: usize,
    /// Probability that an input / target cell is missing.
    pub x_missing: f64,
    pub s_missing: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Debug switch: corrupt the analytic output-peephole gradient to verify
    /// the checker catches it.
    pub corrupt_v_o: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            input_dim: 4,
            hidden_dim: 3,
            t_len: 5,
            subjects: 3,
            x_missing: 0.4,
            s_missing: 0.4,
            seed: 1,
            epsilon: 1e-5,
            tolerance: 1e-4,
            corrupt_v_o: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error)
    pub per_param: Vec<(&'static str, f64)>,
    pub max_rel_err: f64,
    pub loss: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.per_param {
            writeln!(f, "{name:5} max relative error {err:.3e}")?;
        }
        writeln!(
            f,
            "overall: {} (max {:.3e}, tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Build a random masked batch for verification purposes. Input and target
/// dimensions are independent so checks can exercise rectangular weights.
pub fn random_masked_batch(
    rng: &mut Rng,
    n_subjects: usize,
    t_len: usize,
    n_dim: usize,
    m_dim: usize,
    x_missing: f64,
    s_missing: f64,
) -> MaskedBatch {
    let mut x = Vec::new();
    let mut x_mask = Vec::new();
    let mut s = Vec::new();
    let mut s_mask = Vec::new();
    for _ in 0..n_subjects {
        let mut xs = vec![vec![0.0; n_dim]; t_len];
        let mut xm = vec![vec![false; n_dim]; t_len];
        let mut ss = vec![vec![0.0; m_dim]; t_len];
        let mut sm = vec![vec![false; m_dim]; t_len];
        for t in 0..t_len {
            for n in 0..n_dim {
                if rng.next_f64() >= x_missing {
                    xm[t][n] = true;
                    xs[t][n] = rng.uniform(-1.0, 1.0);
                }
            }
            for m in 0..m_dim {
                if rng.next_f64() >= s_missing {
                    sm[t][m] = true;
                    ss[t][m] = rng.uniform(-1.0, 1.0);
                }
            }
        }
        x.push(xs);
        x_mask.push(xm);
        s.push(ss);
        s_mask.push(sm);
    }
    MaskedBatch {
        subject_ids: (0..n_subjects).map(|j| format!("j{j:03}")).collect(),
        biomarkers: (0..n_dim).map(|n| format!("x{n}")).collect(),
        x,
        x_mask,
        s,
        s_mask,
        interval_months: 12,
    }
}

/// Compare analytic gradients against central finite differences of the loss
/// on a random masked instance.
///
/// The loss decomposes over subjects, so each parameter's reference value is
/// the per-subject finite difference, recombined with the same per-subject
/// input-node weighting the analytic input-weight gradients use. Relative
/// errors are measured against max(|analytic|, |numeric|) with a floor of
/// 1e-6 * max(1, |loss|).
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::derive(cfg.seed, 0xC11EC);
    let batch = random_masked_batch(
        &mut rng,
        cfg.subjects,
        cfg.t_len,
        cfg.input_dim,
        cfg.hidden_dim,
        cfg.x_missing,
        cfg.s_missing,
    );
    let mut params = init_params(&mut rng, cfg.input_dim, cfg.hidden_dim, -0.5, 0.5)?;
    let nf = compute_norm_factors(&batch);

    let (pred, cache) = forward_sequence(&params, &batch)?;
    let (loss, delta_y) = loss_and_output_grad(&pred, &batch, &nf);
    let mut grads = backward(&params, &cache, &delta_y, &batch, &nf, false)?;
    if cfg.corrupt_v_o {
        grads.v_o[0] += 0.1 * grads.v_o[0].abs() + 1e-3;
    }

    let floor = 1e-6 * loss.abs().max(1.0);
    let mut per_param = Vec::new();
    let mut max_rel: f64 = 0.0;

    for id in PARAM_IDS {
        let len = grads.array(id).len();
        let mut worst: f64 = 0.0;
        for idx in 0..len {
            let orig = params.array(id)[idx];
            let mut fd = 0.0;
            for j in 0..cfg.subjects {
                params.array_mut(id)[idx] = orig + cfg.epsilon;
                let plus = subject_loss(&params, &batch, &nf, j, cfg.subjects)?;
                params.array_mut(id)[idx] = orig - cfg.epsilon;
                let minus = subject_loss(&params, &batch, &nf, j, cfg.subjects)?;
                let mut d = (plus - minus) / (2.0 * cfg.epsilon);
                if id.is_input_weight() {
                    d /= nf.beta_n[j][idx % cfg.input_dim];
                }
                fd += d;
            }
            params.array_mut(id)[idx] = orig;

            let a = grads.array(id)[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
        per_param.push((id.name(), worst));
        max_rel = max_rel.max(worst);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        loss,
        tolerance: cfg.tolerance,
        passed: max_rel < cfg.tolerance,
    })
}
