//! Vanilla peephole LSTM cell: parameters, sequence feedforward with full
//! state caching, and plain-text model (de)serialization.
//!
//! Gate equations per step (h and c start at zero):
//!
//! ```text
//! f = W_f x + U_f h_prev + V_f ⊙ c_prev + b_f        f~ = σ(f)
//! i = W_i x + U_i h_prev + V_i ⊙ c_prev + b_i        i~ = σ(i)
//! z = W_c x + U_c h_prev           + b_c             z~ = tanh(z)
//! c = f~ ⊙ c_prev + i~ ⊙ z~                          c~ = tanh(c)
//! o = W_o x + U_o h_prev + V_o ⊙ c      + b_o        o~ = σ(o)
//! h = o~ ⊙ c~
//! ```
//!
//! Note the peephole asymmetry: the forget and input gates read the previous
//! cell state, the output gate reads the freshly computed one.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::math::{sigmoid, uniform_init, uniform_init_vec, Matrix, Rng};

/// Identifies one of the 15 weight arrays; the order here is also the block
/// order of the model file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Wf,
    Wi,
    Wc,
    Wo,
    Uf,
    Ui,
    Uc,
    Uo,
    Vf,
    Vi,
    Vo,
    Bf,
    Bi,
    Bc,
    Bo,
}

pub const PARAM_IDS: [ParamId; 15] = [
    ParamId::Wf,
    ParamId::Wi,
    ParamId::Wc,
    ParamId::Wo,
    ParamId::Uf,
    ParamId::Ui,
    ParamId::Uc,
    ParamId::Uo,
    ParamId::Vf,
    ParamId::Vi,
    ParamId::Vo,
    ParamId::Bf,
    ParamId::Bi,
    ParamId::Bc,
    ParamId::Bo,
];

impl ParamId {
    pub fn name(self) -> &'static str {
        match self {
            ParamId::Wf => "W_f",
            ParamId::Wi => "W_i",
            ParamId::Wc => "W_c",
            ParamId::Wo => "W_o",
            ParamId::Uf => "U_f",
            ParamId::Ui => "U_i",
            ParamId::Uc => "U_c",
            ParamId::Uo => "U_o",
            ParamId::Vf => "V_f",
            ParamId::Vi => "V_i",
            ParamId::Vo => "V_o",
            ParamId::Bf => "b_f",
            ParamId::Bi => "b_i",
            ParamId::Bc => "b_c",
            ParamId::Bo => "b_o",
        }
    }

    /// True for the input weight matrices W_*, whose gradients carry the
    /// per-input-node availability normalization.
    pub fn is_input_weight(self) -> bool {
        matches!(self, ParamId::Wf | ParamId::Wi | ParamId::Wc | ParamId::Wo)
    }

    pub fn is_peephole(self) -> bool {
        matches!(self, ParamId::Vf | ParamId::Vi | ParamId::Vo)
    }

    pub fn is_bias(self) -> bool {
        matches!(self, ParamId::Bf | ParamId::Bi | ParamId::Bc | ParamId::Bo)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All weights of one peephole LSTM cell.
///
/// W_* are M×N (input to gates), U_* are M×M (recurrent), V_* are M-vectors
/// (cell-to-gate peepholes), b_* are M-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
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
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (n, m) = (input_dim, hidden_dim);
        LstmParams {
            input_dim: n,
            hidden_dim: m,
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
        }
    }

    /// Flat view over all weight arrays in the fixed `PARAM_IDS` order.
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

    pub fn is_finite(&self) -> bool {
        PARAM_IDS
            .iter()
            .all(|&id| self.array(id).iter().all(|v| v.is_finite()))
    }
}

/// Uniform random initialization of every weight and bias in [lo, hi].
pub fn init_params(rng: &mut Rng, input_dim: usize, hidden_dim: usize, lo: f64, hi: f64) -> Result<LstmParams> {
    let (n, m) = (input_dim, hidden_dim);
    Ok(LstmParams {
        input_dim: n,
        hidden_dim: m,
        w_f: uniform_init(rng, m, n, lo, hi)?,
        w_i: uniform_init(rng, m, n, lo, hi)?,
        w_c: uniform_init(rng, m, n, lo, hi)?,
        w_o: uniform_init(rng, m, n, lo, hi)?,
        u_f: uniform_init(rng, m, m, lo, hi)?,
        u_i: uniform_init(rng, m, m, lo, hi)?,
        u_c: uniform_init(rng, m, m, lo, hi)?,
        u_o: uniform_init(rng, m, m, lo, hi)?,
        v_f: uniform_init_vec(rng, m, lo, hi)?,
        v_i: uniform_init_vec(rng, m, lo, hi)?,
        v_o: uniform_init_vec(rng, m, lo, hi)?,
        b_f: uniform_init_vec(rng, m, lo, hi)?,
        b_i: uniform_init_vec(rng, m, lo, hi)?,
        b_c: uniform_init_vec(rng, m, lo, hi)?,
        b_o: uniform_init_vec(rng, m, lo, hi)?,
    })
}

/// Everything one time step produces, pre- and post-activation. `f,i,z,o` are
/// pre-activations, `ft,it,zt,ct,ot` their activated (tilded) counterparts,
/// `c` the cell state and `h` the hidden output.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub z: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub ft: Vec<f64>,
    pub it: Vec<f64>,
    pub zt: Vec<f64>,
    pub ct: Vec<f64>,
    pub ot: Vec<f64>,
    pub h: Vec<f64>,
}

/// Per-subject, per-step forward state retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `steps[j][t]`
    pub steps: Vec<Vec<StepCache>>,
}

/// Network outputs; `y[j][t]` is the hidden output at step `t` of subject `j`.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub y: Vec<Vec<Vec<f64>>>,
}

fn check_finite(gate: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("forward pass, gate {gate}"),
            context: None,
        });
    }
    Ok(())
}

/// One LSTM step. `x_t` must already have missing entries zeroed.
pub fn forward_step(
    params: &LstmParams,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<StepCache> {
    let m = params.hidden_dim;

    let mut f = params.w_f.matvec(x_t)?;
    let uf = params.u_f.matvec(h_prev)?;
    let mut i = params.w_i.matvec(x_t)?;
    let ui = params.u_i.matvec(h_prev)?;
    let mut z = params.w_c.matvec(x_t)?;
    let uc = params.u_c.matvec(h_prev)?;
    let mut o = params.w_o.matvec(x_t)?;
    let uo = params.u_o.matvec(h_prev)?;

    for k in 0..m {
        f[k] += uf[k] + params.v_f[k] * c_prev[k] + params.b_f[k];
        i[k] += ui[k] + params.v_i[k] * c_prev[k] + params.b_i[k];
        z[k] += uc[k] + params.b_c[k];
    }
    check_finite("f", &f)?;
    check_finite("i", &i)?;
    check_finite("z", &z)?;

    let ft: Vec<f64> = f.iter().map(|&v| sigmoid(v)).collect();
    let it: Vec<f64> = i.iter().map(|&v| sigmoid(v)).collect();
    let zt: Vec<f64> = z.iter().map(|&v| v.tanh()).collect();

    let mut c = vec![0.0; m];
    for k in 0..m {
        c[k] = ft[k] * c_prev[k] + it[k] * zt[k];
    }
    check_finite("c", &c)?;
    let ct: Vec<f64> = c.iter().map(|&v| v.tanh()).collect();

    for k in 0..m {
        o[k] += uo[k] + params.v_o[k] * c[k] + params.b_o[k];
    }
    check_finite("o", &o)?;
    let ot: Vec<f64> = o.iter().map(|&v| sigmoid(v)).collect();

    let mut h = vec![0.0; m];
    for k in 0..m {
        h[k] = ot[k] * ct[k];
    }

    Ok(StepCache {
        f,
        i,
        z,
        o,
        c,
        ft,
        it,
        zt,
        ct,
        ot,
        h,
    })
}

/// Run one subject's sequence from zero initial state.
pub fn forward_subject(params: &LstmParams, xs: &[Vec<f64>]) -> Result<Vec<StepCache>> {
    let m = params.hidden_dim;
    let mut steps = Vec::with_capacity(xs.len());
    let mut h_prev = vec![0.0; m];
    let mut c_prev = vec![0.0; m];
    for x_t in xs {
        let step = forward_step(params, x_t, &h_prev, &c_prev)?;
        h_prev = step.h.clone();
        c_prev = step.c.clone();
        steps.push(step);
    }
    Ok(steps)
}

/// Unrolled forward over a whole batch. Subjects are independent; they are
/// processed in parallel but the result is identical to sequential execution.
pub fn forward_sequence(params: &LstmParams, batch: &MaskedBatch) -> Result<(Prediction, ForwardCache)> {
    use rayon::prelude::*;

    debug_assert!(batch.masked_cells_are_zero());

    let steps: Vec<Vec<StepCache>> = batch
        .x
        .par_iter()
        .map(|xs| forward_subject(params, xs))
        .collect::<Result<_>>()?;

    let y = steps
        .iter()
        .map(|subj| subj.iter().map(|s| s.h.clone()).collect())
        .collect();

    Ok((Prediction { y }, ForwardCache { steps }))
}

const MODEL_MAGIC: &str = "MLSTM";
const MODEL_VERSION: u32 = 1;

/// Write a model as versioned plain text: header `MLSTM 1 <N> <M>`, then one
/// named block per weight array, one row per line, floats formatted so that
/// parsing them back reproduces the exact bit pattern.
pub fn save_model(params: &LstmParams, path: &Path) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::NonFinite {
            what: "model parameters".into(),
            context: Some("refusing to save".into()),
        });
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{MODEL_MAGIC} {MODEL_VERSION} {} {}\n",
        params.input_dim, params.hidden_dim
    ));
    for id in PARAM_IDS {
        out.push_str(id.name());
        out.push('\n');
        let (rows, cols) = block_shape(id, params.input_dim, params.hidden_dim);
        let data = params.array(id);
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn block_shape(id: ParamId, n: usize, m: usize) -> (usize, usize) {
    match id {
        ParamId::Wf | ParamId::Wi | ParamId::Wc | ParamId::Wo => (m, n),
        ParamId::Uf | ParamId::Ui | ParamId::Uc | ParamId::Uo => (m, m),
        _ => (1, m),
    }
}

pub fn load_model(path: &Path) -> Result<LstmParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let bad = |why: String| Error::ModelFormat {
        path: path.display().to_string(),
        why,
    };

    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != MODEL_MAGIC {
        return Err(bad(format!("bad header `{header}`; expected `{MODEL_MAGIC} {MODEL_VERSION} <N> <M>`")));
    }
    let version: u32 = fields[1]
        .parse()
        .map_err(|_| bad(format!("unparseable version `{}`", fields[1])))?;
    if version != MODEL_VERSION {
        return Err(bad(format!("unsupported version {version}; this build reads version {MODEL_VERSION}")));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|_| bad(format!("unparseable input dim `{}`", fields[2])))?;
    let m: usize = fields[3]
        .parse()
        .map_err(|_| bad(format!("unparseable hidden dim `{}`", fields[3])))?;
    if n == 0 || m == 0 {
        return Err(bad(format!("dims must be positive, got N={n} M={m}")));
    }

    let mut params = LstmParams::zeros(n, m);
    for id in PARAM_IDS {
        let name_line = lines
            .next()
            .ok_or_else(|| bad(format!("missing section {}", id.name())))?;
        if name_line.trim() != id.name() {
            return Err(bad(format!(
                "expected section {} but found `{}`",
                id.name(),
                name_line.trim()
            )));
        }
        let (rows, cols) = block_shape(id, n, m);
        let dst = params.array_mut(id);
        for r in 0..rows {
            let row_line = lines
                .next()
                .ok_or_else(|| bad(format!("section {} truncated at row {r}", id.name())))?;
            let vals: Vec<&str> = row_line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(bad(format!(
                    "section {} row {r}: expected {cols} values, got {}",
                    id.name(),
                    vals.len()
                )));
            }
            for (c, v) in vals.iter().enumerate() {
                dst[r * cols + c] = v.parse::<f64>().map_err(|_| {
                    bad(format!("section {} row {r}: unparseable value `{v}`", id.name()))
                })?;
            }
        }
    }
    if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
        return Err(bad(format!("trailing content after last section: `{extra}`")));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter value".into()));
    }
    Ok(params)
}
