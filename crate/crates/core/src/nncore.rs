//! Dense 64-bit tensors, hand-written forward/backward passes for the layers
//! used by the predictors, Adam, Xavier initialization and a finite-difference
//! gradient checker.
//!
//! Matrices are row-major `rows x cols` slices. Batched layers treat every row
//! independently, so a row's output never depends on other rows (batch norm in
//! training mode is the one exception).

use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::netgraph::Graph;
use crate::{seeds, Error, Result};

/// Slope of LeakyReLU inside attention scoring.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)`
/// is `k x n`. `a_t`/`b_t` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor data")?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        check_finite(&self.data, what)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }
}

/// Named tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    /// Same names in the same order with the same shapes.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter names differ"));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape != b.shape {
                return Err(Error::shape(format!(
                    "parameter `{n}`: shape {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += alpha * y);
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors.iter_mut().for_each(|t| t.data.fill(value));
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.data.iter_mut().for_each(|x| *x *= alpha));
    }

    /// `‖self - other‖²`.
    pub fn distance_sq(&self, other: &ParamSet) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| (x - y) * (x - y))
            .sum())
    }

    pub fn check_finite(&self) -> Result<()> {
        self.tensors
            .iter()
            .try_for_each(|t| t.check_finite("parameter values"))
    }

    /// Binary layout, all integers little-endian:
    /// `u32 count`, then per tensor `u32 name_len, name (UTF-8), u32 ndim,
    /// u64 dims[ndim], f64 values[prod(dims)]`.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &t.data {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let count = u32_of(&mut input)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = u32_of(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::invalid("parameter name is not UTF-8"))?;
            let ndim = u32_of(&mut input)? as usize;
            let shape = (0..ndim)
                .map(|_| u64_of(&mut input).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| u64_of(&mut input).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }
}

// ---------------------------------------------------------------- activations

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

// ------------------------------------------------------------------ embedding

/// Gathers one row of `table` per code. Output is `codes.len() x d`.
pub fn embedding_forward(table: &Tensor, codes: &[u8]) -> Result<Vec<f64>> {
    let (c, d) = table.dims2()?;
    let mut out = Vec::with_capacity(codes.len() * d);
    for &k in codes {
        let k = k as usize;
        if k >= c {
            return Err(Error::invalid(format!("state code {k} outside table of {c} rows")));
        }
        out.extend_from_slice(&table.data[k * d..(k + 1) * d]);
    }
    Ok(out)
}

/// Scatter-adds `grad_out` rows into the rows of `grad_table` named by `codes`.
pub fn embedding_backward(codes: &[u8], grad_out: &[f64], grad_table: &mut Tensor) {
    let d = grad_table.shape[1];
    for (r, &k) in codes.iter().enumerate() {
        let row = &mut grad_table.data[k as usize * d..(k as usize + 1) * d];
        row.iter_mut()
            .zip(&grad_out[r * d..(r + 1) * d])
            .for_each(|(g, x)| *g += x);
    }
}

// --------------------------------------------------------------------- linear

/// `x W + b` for `x` of `rows x in`, `W` of `in x out`.
pub fn linear_forward(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (i, o) = w.dims2()?;
    if x.len() != rows * i || b.len() != o {
        return Err(Error::shape(format!(
            "linear: input {} values for {rows} x {i}, bias {} for {o}",
            x.len(),
            b.len()
        )));
    }
    let mut y = Vec::with_capacity(rows * o);
    for _ in 0..rows {
        y.extend_from_slice(&b.data);
    }
    gemm(rows, i, o, 1.0, x, false, &w.data, false, 1.0, &mut y);
    check_finite(&y, "linear output")?;
    Ok(y)
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &Tensor,
    dy: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let (i, o) = (w.shape[0], w.shape[1]);
    gemm(i, rows, o, 1.0, x, true, dy, false, 1.0, &mut dw.data);
    for r in 0..rows {
        db.data
            .iter_mut()
            .zip(&dy[r * o..(r + 1) * o])
            .for_each(|(g, d)| *g += d);
    }
    let mut dx = vec![0.0; rows * i];
    gemm(rows, o, i, 1.0, dy, false, &w.data, true, 0.0, &mut dx);
    dx
}

// ----------------------------------------------------------------------- LSTM

/// Gate order used for parameter names and the fused layout.
pub const LSTM_GATES: [&str; 4] = ["f", "i", "c", "o"];

/// LSTM weights with the four gates fused column-wise.
///
/// Each gate matrix acts on the row vector `[h_prev, x]` (hidden part first),
/// so `w` is `(hidden + input) x 4·hidden` and `b` has `4·hidden` entries.
/// The same layout holds accumulated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub input: usize,
    pub hidden: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LstmWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmWeights {
            input,
            hidden,
            w: vec![0.0; (hidden + input) * 4 * hidden],
            b: vec![0.0; 4 * hidden],
        }
    }

    /// Names of the per-gate tensors: `{prefix}.w_f`, `{prefix}.b_f`, ...
    pub fn param_names(prefix: &str) -> Vec<String> {
        LSTM_GATES
            .iter()
            .flat_map(|g| [format!("{prefix}.w_{g}"), format!("{prefix}.b_{g}")])
            .collect()
    }

    /// Adds Xavier-initialized gate weights and zero biases to `params`.
    pub fn init_params<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        for g in LSTM_GATES {
            params.insert(format!("{prefix}.w_{g}"), xavier_uniform(&[hidden + input, hidden], rng)?)?;
            params.insert(format!("{prefix}.b_{g}"), Tensor::zeros(&[hidden]))?;
        }
        Ok(())
    }

    pub fn gather(params: &ParamSet, prefix: &str) -> Result<Self> {
        let w0 = params.get(&format!("{prefix}.w_f"))?;
        let (rows, hidden) = w0.dims2()?;
        if rows < hidden {
            return Err(Error::shape(format!("{prefix}: gate matrix {rows} x {hidden}")));
        }
        let mut out = LstmWeights::zeros(rows - hidden, hidden);
        let g4 = 4 * hidden;
        for (gi, g) in LSTM_GATES.iter().enumerate() {
            let w = params.get(&format!("{prefix}.w_{g}"))?;
            let b = params.get(&format!("{prefix}.b_{g}"))?;
            if w.shape != [rows, hidden] || b.shape != [hidden] {
                return Err(Error::shape(format!("{prefix}: gate `{g}` shapes disagree")));
            }
            for r in 0..rows {
                out.w[r * g4 + gi * hidden..r * g4 + (gi + 1) * hidden]
                    .copy_from_slice(&w.data[r * hidden..(r + 1) * hidden]);
            }
            out.b[gi * hidden..(gi + 1) * hidden].copy_from_slice(&b.data);
        }
        Ok(out)
    }

    /// Adds this (gradient) layout into the per-gate tensors of `grads`.
    pub fn scatter_add(&self, grads: &mut ParamSet, prefix: &str) -> Result<()> {
        let (h, rows) = (self.hidden, self.hidden + self.input);
        let g4 = 4 * h;
        for (gi, g) in LSTM_GATES.iter().enumerate() {
            let w = grads.get_mut(&format!("{prefix}.w_{g}"))?;
            for r in 0..rows {
                w.data[r * h..(r + 1) * h]
                    .iter_mut()
                    .zip(&self.w[r * g4 + gi * h..r * g4 + (gi + 1) * h])
                    .for_each(|(a, b)| *a += b);
            }
            let b = grads.get_mut(&format!("{prefix}.b_{g}"))?;
            b.data
                .iter_mut()
                .zip(&self.b[gi * h..(gi + 1) * h])
                .for_each(|(a, x)| *a += x);
        }
        Ok(())
    }
}

/// Saved activations of one LSTM step.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    rows: usize,
    z: Vec<f64>,
    /// Activated gates `[f, i, c̃, o]` per row.
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    c: Vec<f64>,
}

impl LstmStepCache {
    pub fn cell_state(&self) -> &[f64] {
        &self.c
    }
}

/// One LSTM step over `rows` independent sequences.
///
/// `f = σ(W_f[h,x] + b_f)`, `i = σ(..)`, `c̃ = tanh(..)`, `o = σ(..)`,
/// `c = f ⊙ c_prev + i ⊙ c̃`, `h = o ⊙ tanh(c)`.
pub fn lstm_cell_forward(
    w: &LstmWeights,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    rows: usize,
) -> Result<(Vec<f64>, LstmStepCache)> {
    let (d, h) = (w.input, w.hidden);
    if x.len() != rows * d || h_prev.len() != rows * h || c_prev.len() != rows * h {
        return Err(Error::shape(format!(
            "lstm cell: x {} / h {} / c {} values for {rows} rows (input {d}, hidden {h})",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let (zc, g4) = (h + d, 4 * h);
    let mut z = vec![0.0; rows * zc];
    for r in 0..rows {
        z[r * zc..r * zc + h].copy_from_slice(&h_prev[r * h..(r + 1) * h]);
        z[r * zc + h..(r + 1) * zc].copy_from_slice(&x[r * d..(r + 1) * d]);
    }
    let mut gates = Vec::with_capacity(rows * g4);
    for _ in 0..rows {
        gates.extend_from_slice(&w.b);
    }
    gemm(rows, zc, g4, 1.0, &z, false, &w.w, false, 1.0, &mut gates);
    let mut c = vec![0.0; rows * h];
    let mut h_out = vec![0.0; rows * h];
    for r in 0..rows {
        let gr = &mut gates[r * g4..(r + 1) * g4];
        for j in 0..h {
            let f = sigmoid(gr[j]);
            let i = sigmoid(gr[h + j]);
            let g = gr[2 * h + j].tanh();
            let o = sigmoid(gr[3 * h + j]);
            gr[j] = f;
            gr[h + j] = i;
            gr[2 * h + j] = g;
            gr[3 * h + j] = o;
            let cv = f * c_prev[r * h + j] + i * g;
            c[r * h + j] = cv;
            h_out[r * h + j] = o * cv.tanh();
        }
    }
    check_finite(&h_out, "lstm hidden state")?;
    let cache = LstmStepCache { rows, z, gates, c_prev: c_prev.to_vec(), c };
    Ok((h_out, cache))
}

/// Backward through one step. `dh` and `dc` are gradients w.r.t. this step's
/// outputs (an empty slice means zero). Returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    w: &LstmWeights,
    cache: &LstmStepCache,
    dh: &[f64],
    dc: &[f64],
    grad: &mut LstmWeights,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (d, h, rows) = (w.input, w.hidden, cache.rows);
    let (zc, g4) = (h + d, 4 * h);
    let at = |v: &[f64], k: usize| if v.is_empty() { 0.0 } else { v[k] };
    let mut dpre = vec![0.0; rows * g4];
    let mut dc_prev = vec![0.0; rows * h];
    for r in 0..rows {
        let gr = &cache.gates[r * g4..(r + 1) * g4];
        let dr = &mut dpre[r * g4..(r + 1) * g4];
        for j in 0..h {
            let k = r * h + j;
            let (f, i, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
            let tc = cache.c[k].tanh();
            let dhv = at(dh, k);
            let dcv = at(dc, k) + dhv * o * (1.0 - tc * tc);
            dc_prev[k] = dcv * f;
            dr[j] = dcv * cache.c_prev[k] * f * (1.0 - f);
            dr[h + j] = dcv * g * i * (1.0 - i);
            dr[2 * h + j] = dcv * i * (1.0 - g * g);
            dr[3 * h + j] = dhv * tc * o * (1.0 - o);
        }
    }
    gemm(zc, rows, g4, 1.0, &cache.z, true, &dpre, false, 1.0, &mut grad.w);
    for r in 0..rows {
        grad.b
            .iter_mut()
            .zip(&dpre[r * g4..(r + 1) * g4])
            .for_each(|(a, b)| *a += b);
    }
    let mut dz = vec![0.0; rows * zc];
    gemm(rows, g4, zc, 1.0, &dpre, false, &w.w, true, 0.0, &mut dz);
    let mut dh_prev = vec![0.0; rows * h];
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        dh_prev[r * h..(r + 1) * h].copy_from_slice(&dz[r * zc..r * zc + h]);
        dx[r * d..(r + 1) * d].copy_from_slice(&dz[r * zc + h..(r + 1) * zc]);
    }
    (dx, dh_prev, dc_prev)
}

#[derive(Debug, Clone)]
pub struct LstmSeqCache {
    steps: Vec<LstmStepCache>,
    /// Hidden state after every step.
    pub hs: Vec<Vec<f64>>,
}

impl LstmSeqCache {
    pub fn last_hidden(&self) -> &[f64] {
        self.hs.last().map_or(&[], Vec::as_slice)
    }
}

/// Runs the LSTM over `xs` (one `rows x input` matrix per step) from zero state.
pub fn lstm_sequence_forward(w: &LstmWeights, xs: &[Vec<f64>], rows: usize) -> Result<LstmSeqCache> {
    let mut h = vec![0.0; rows * w.hidden];
    let mut c = vec![0.0; rows * w.hidden];
    let mut steps = Vec::with_capacity(xs.len());
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        let (h_next, cache) = lstm_cell_forward(w, x, &h, &c, rows)?;
        c.clone_from(&cache.c);
        h = h_next;
        hs.push(h.clone());
        steps.push(cache);
    }
    Ok(LstmSeqCache { steps, hs })
}

/// Backward through time. `dhs[s]` is the gradient w.r.t. the hidden state
/// emitted at step `s` (empty means zero). Returns per-step input gradients.
pub fn lstm_sequence_backward(
    w: &LstmWeights,
    cache: &LstmSeqCache,
    dhs: &[Vec<f64>],
    grad: &mut LstmWeights,
) -> Vec<Vec<f64>> {
    let t = cache.steps.len();
    let mut dxs = vec![Vec::new(); t];
    let mut dh_carry: Vec<f64> = Vec::new();
    let mut dc_carry: Vec<f64> = Vec::new();
    for s in (0..t).rev() {
        let dh = match (dh_carry.is_empty(), dhs[s].is_empty()) {
            (true, _) => dhs[s].clone(),
            (false, true) => dh_carry,
            (false, false) => dh_carry.iter().zip(&dhs[s]).map(|(a, b)| a + b).collect(),
        };
        let (dx, dhp, dcp) = lstm_cell_backward(w, &cache.steps[s], &dh, &dc_carry, grad);
        dxs[s] = dx;
        dh_carry = dhp;
        dc_carry = dcp;
    }
    dxs
}

// ------------------------------------------------------------------------ GAT

/// Neighbor lists with a self-loop on every node, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatGraph {
    n: usize,
    offsets: Vec<usize>,
    nbrs: Vec<usize>,
}

impl GatGraph {
    pub fn from_graph(g: &Graph) -> Self {
        let n = g.n_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut nbrs = Vec::with_capacity(2 * g.n_edges() + n);
        offsets.push(0);
        for v in 0..n {
            let start = nbrs.len();
            nbrs.extend_from_slice(g.neighbors(v));
            nbrs.push(v);
            nbrs[start..].sort_unstable();
            offsets.push(nbrs.len());
        }
        GatGraph { n, offsets, nbrs }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// `N(i) ∪ {i}`.
    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.nbrs[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatDims {
    pub f_in: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl GatDims {
    pub fn out(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone)]
pub struct GatCache {
    blocks: usize,
    x: Vec<f64>,
    wh: Vec<f64>,
    /// Pre-LeakyReLU scores, `[block][edge][head]`.
    pre: Vec<f64>,
    /// Attention weights, same layout as `pre`.
    alpha: Vec<f64>,
    /// Aggregated features before ELU.
    agg: Vec<f64>,
}

impl GatCache {
    /// Attention weights of node `i` in `block` for `head`, aligned with
    /// `GatGraph::neighborhood(i)`.
    pub fn attention(&self, graph: &GatGraph, block: usize, i: usize, head: usize) -> Vec<f64> {
        let heads = self.alpha.len() / (self.blocks * graph.nbrs.len());
        let base = block * graph.nbrs.len();
        (graph.offsets[i]..graph.offsets[i + 1])
            .map(|e| self.alpha[(base + e) * heads + head])
            .collect()
    }
}

fn gat_dims(weight: &Tensor, attn: &Tensor) -> Result<GatDims> {
    let (f_in, kf) = weight.dims2()?;
    let (heads, two_f) = attn.dims2()?;
    if heads == 0 || two_f % 2 != 0 || kf != heads * (two_f / 2) {
        return Err(Error::shape(format!(
            "gat: weight {:?} incompatible with attention {:?}",
            weight.shape, attn.shape
        )));
    }
    Ok(GatDims { f_in, heads, head_dim: two_f / 2 })
}

/// Multi-head graph attention over `blocks` stacked copies of `graph`.
///
/// `x` is `(blocks·N) x F_in` with row `b·N + v` holding node `v` of copy `b`.
/// `weight` is `F_in x K·F'` (head `k` owns columns `kF'..(k+1)F'`) and `attn`
/// is `K x 2F'` with the centre-node half first. Per head,
/// `e_ij = LeakyReLU(a·[φh_i ‖ φh_j])`, `α_ij = softmax_j e_ij` over
/// `N(i) ∪ {i}`, `out_i = ELU(Σ_j α_ij φh_j)`; heads are concatenated.
pub fn gat_forward(
    graph: &GatGraph,
    weight: &Tensor,
    attn: &Tensor,
    x: &[f64],
    blocks: usize,
) -> Result<(Vec<f64>, GatCache)> {
    let dims = gat_dims(weight, attn)?;
    let (n, k_heads, fh, kf) = (graph.n, dims.heads, dims.head_dim, dims.out());
    let rows = blocks * n;
    if x.len() != rows * dims.f_in {
        return Err(Error::shape(format!(
            "gat: input has {} values, expected {rows} x {}",
            x.len(),
            dims.f_in
        )));
    }
    let mut wh = vec![0.0; rows * kf];
    gemm(rows, dims.f_in, kf, 1.0, x, false, &weight.data, false, 0.0, &mut wh);

    let a = &attn.data;
    let mut s_l = vec![0.0; rows * k_heads];
    let mut s_r = vec![0.0; rows * k_heads];
    for r in 0..rows {
        for k in 0..k_heads {
            let hrow = &wh[r * kf + k * fh..r * kf + (k + 1) * fh];
            let al = &a[k * 2 * fh..k * 2 * fh + fh];
            let ar = &a[k * 2 * fh + fh..(k + 1) * 2 * fh];
            s_l[r * k_heads + k] = hrow.iter().zip(al).map(|(p, q)| p * q).sum();
            s_r[r * k_heads + k] = hrow.iter().zip(ar).map(|(p, q)| p * q).sum();
        }
    }

    let n_e = graph.nbrs.len();
    let mut pre = vec![0.0; blocks * n_e * k_heads];
    let mut alpha = vec![0.0; blocks * n_e * k_heads];
    let mut agg = vec![0.0; rows * kf];
    for b in 0..blocks {
        for i in 0..n {
            let ri = b * n + i;
            let (lo, hi) = (graph.offsets[i], graph.offsets[i + 1]);
            for k in 0..k_heads {
                let mut max = f64::NEG_INFINITY;
                for e in lo..hi {
                    let rj = b * n + graph.nbrs[e];
                    let p = s_l[ri * k_heads + k] + s_r[rj * k_heads + k];
                    pre[(b * n_e + e) * k_heads + k] = p;
                    max = max.max(leaky(p));
                }
                let mut total = 0.0;
                for e in lo..hi {
                    let idx = (b * n_e + e) * k_heads + k;
                    let w = (leaky(pre[idx]) - max).exp();
                    alpha[idx] = w;
                    total += w;
                }
                for e in lo..hi {
                    let idx = (b * n_e + e) * k_heads + k;
                    alpha[idx] /= total;
                    let rj = b * n + graph.nbrs[e];
                    let src = &wh[rj * kf + k * fh..rj * kf + (k + 1) * fh];
                    let dst = &mut agg[ri * kf + k * fh..ri * kf + (k + 1) * fh];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += alpha[idx] * s);
                }
            }
        }
    }
    let out: Vec<f64> = agg.iter().map(|&v| elu(v)).collect();
    check_finite(&out, "gat output")?;
    Ok((out, GatCache { blocks, x: x.to_vec(), wh, pre, alpha, agg }))
}

/// Accumulates `dweight`, `dattn`; returns the input gradient.
pub fn gat_backward(
    graph: &GatGraph,
    weight: &Tensor,
    attn: &Tensor,
    cache: &GatCache,
    dout: &[f64],
    dweight: &mut Tensor,
    dattn: &mut Tensor,
) -> Result<Vec<f64>> {
    let dims = gat_dims(weight, attn)?;
    let (n, k_heads, fh, kf) = (graph.n, dims.heads, dims.head_dim, dims.out());
    let blocks = cache.blocks;
    let rows = blocks * n;
    let n_e = graph.nbrs.len();
    let a = &attn.data;

    let dagg: Vec<f64> = cache
        .agg
        .iter()
        .zip(dout)
        .map(|(&v, &g)| if v > 0.0 { g } else { g * v.exp() })
        .collect();
    let mut dwh = vec![0.0; rows * kf];
    let mut ds_l = vec![0.0; rows * k_heads];
    let mut ds_r = vec![0.0; rows * k_heads];
    let mut dalpha = Vec::new();
    for b in 0..blocks {
        for i in 0..n {
            let ri = b * n + i;
            let (lo, hi) = (graph.offsets[i], graph.offsets[i + 1]);
            for k in 0..k_heads {
                let gi = &dagg[ri * kf + k * fh..ri * kf + (k + 1) * fh];
                dalpha.clear();
                let mut weighted = 0.0;
                for e in lo..hi {
                    let idx = (b * n_e + e) * k_heads + k;
                    let rj = b * n + graph.nbrs[e];
                    let hj = &cache.wh[rj * kf + k * fh..rj * kf + (k + 1) * fh];
                    let da: f64 = gi.iter().zip(hj).map(|(p, q)| p * q).sum();
                    dalpha.push(da);
                    weighted += cache.alpha[idx] * da;
                    let dst = &mut dwh[rj * kf + k * fh..rj * kf + (k + 1) * fh];
                    dst.iter_mut()
                        .zip(gi)
                        .for_each(|(o, g)| *o += cache.alpha[idx] * g);
                }
                for (off, e) in (lo..hi).enumerate() {
                    let idx = (b * n_e + e) * k_heads + k;
                    let de = cache.alpha[idx] * (dalpha[off] - weighted);
                    let dp = if cache.pre[idx] > 0.0 { de } else { LEAKY_SLOPE * de };
                    let rj = b * n + graph.nbrs[e];
                    ds_l[ri * k_heads + k] += dp;
                    ds_r[rj * k_heads + k] += dp;
                }
            }
        }
    }
    for r in 0..rows {
        for k in 0..k_heads {
            let (gl, gr) = (ds_l[r * k_heads + k], ds_r[r * k_heads + k]);
            let base = k * 2 * fh;
            for f in 0..fh {
                let hv = cache.wh[r * kf + k * fh + f];
                dattn.data[base + f] += gl * hv;
                dattn.data[base + fh + f] += gr * hv;
                dwh[r * kf + k * fh + f] += gl * a[base + f] + gr * a[base + fh + f];
            }
        }
    }
    gemm(dims.f_in, rows, kf, 1.0, &cache.x, true, &dwh, false, 1.0, &mut dweight.data);
    let mut dx = vec![0.0; rows * dims.f_in];
    gemm(rows, kf, dims.f_in, 1.0, &dwh, false, &weight.data, true, 0.0, &mut dx);
    Ok(dx)
}

// ----------------------------------------------------------------- batch norm

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    rows: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn bn_shapes(x: &[f64], rows: usize, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let f = gamma.len();
    if beta.len() != f || x.len() != rows * f {
        return Err(Error::shape(format!(
            "batch norm: {} inputs for {rows} rows of {f} features",
            x.len()
        )));
    }
    Ok(f)
}

/// Normalizes each feature over the rows of the batch and updates the running
/// statistics as `running = m·running + (1 - m)·batch` with the unbiased
/// batch variance.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train(
    x: &[f64],
    rows: usize,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut [f64],
    running_var: &mut [f64],
    momentum: f64,
    eps: f64,
) -> Result<(Vec<f64>, BatchNormCache)> {
    let f = bn_shapes(x, rows, gamma, beta)?;
    if rows == 0 {
        return Err(Error::Empty("batch norm over zero rows".into()));
    }
    let mut mean = vec![0.0; f];
    for r in 0..rows {
        mean.iter_mut().zip(&x[r * f..(r + 1) * f]).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; f];
    for r in 0..rows {
        for j in 0..f {
            let d = x[r * f + j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; rows * f];
    let mut y = vec![0.0; rows * f];
    for r in 0..rows {
        for j in 0..f {
            let k = r * f + j;
            xhat[k] = (x[k] - mean[j]) * inv_std[j];
            y[k] = gamma.data[j] * xhat[k] + beta.data[j];
        }
    }
    let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
    for j in 0..f {
        running_mean[j] = momentum * running_mean[j] + (1.0 - momentum) * mean[j];
        running_var[j] = momentum * running_var[j] + (1.0 - momentum) * var[j] * unbias;
    }
    check_finite(&y, "batch norm output")?;
    Ok((y, BatchNormCache { rows, xhat, inv_std }))
}

/// Normalizes with the running statistics; rows stay independent.
pub fn batch_norm_eval(
    x: &[f64],
    rows: usize,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let f = bn_shapes(x, rows, gamma, beta)?;
    let scale: Vec<f64> = (0..f)
        .map(|j| gamma.data[j] / (running_var[j] + eps).sqrt())
        .collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let j = k % f;
            (v - running_mean[j]) * scale[j] + beta.data[j]
        })
        .collect();
    check_finite(&y, "batch norm output")?;
    Ok(y)
}

pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    dy: &[f64],
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Vec<f64> {
    let (rows, f) = (cache.rows, gamma.len());
    let mut sum_dxhat = vec![0.0; f];
    let mut sum_dxhat_xhat = vec![0.0; f];
    for r in 0..rows {
        for j in 0..f {
            let k = r * f + j;
            dgamma.data[j] += dy[k] * cache.xhat[k];
            dbeta.data[j] += dy[k];
            let dxh = dy[k] * gamma.data[j];
            sum_dxhat[j] += dxh;
            sum_dxhat_xhat[j] += dxh * cache.xhat[k];
        }
    }
    let nr = rows as f64;
    let mut dx = vec![0.0; rows * f];
    for r in 0..rows {
        for j in 0..f {
            let k = r * f + j;
            let dxh = dy[k] * gamma.data[j];
            dx[k] = cache.inv_std[j] / nr * (nr * dxh - sum_dxhat[j] - cache.xhat[k] * sum_dxhat_xhat[j]);
        }
    }
    dx
}

// -------------------------------------------------------------------- dropout

/// Inverted dropout. Returns the output and the multiplier mask (`None` when
/// nothing was dropped, i.e. `p = 0` or evaluation mode).
pub fn dropout_forward<R: Rng>(
    x: &[f64],
    p: f64,
    rng: &mut R,
    train: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok((x.to_vec(), None));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let y = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok((y, Some(mask)))
}

pub fn dropout_backward(dy: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

// ------------------------------------------------------------ softmax + CE

/// Mean cross-entropy over `rows` rows of `classes` logits, plus the softmax
/// probabilities.
pub fn softmax_cross_entropy(logits: &[f64], classes: usize, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let rows = labels.len();
    if logits.len() != rows * classes || rows == 0 {
        return Err(Error::shape(format!(
            "cross entropy: {} logits for {rows} labels of {classes} classes",
            logits.len()
        )));
    }
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for r in 0..rows {
        let label = labels[r] as usize;
        if label >= classes {
            return Err(Error::invalid(format!("label {label} outside {classes} classes")));
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        for c in 0..classes {
            probs[r * classes + c] = (row[c] - lse).exp();
        }
    }
    let loss = loss / rows as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss"));
    }
    Ok((loss, probs))
}

/// Gradient of `scale · Σ CE` w.r.t. the logits; `scale = 1/rows` gives the
/// gradient of the mean.
pub fn softmax_cross_entropy_backward(probs: &[f64], classes: usize, labels: &[u8], scale: f64) -> Vec<f64> {
    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
    for (r, &l) in labels.iter().enumerate() {
        d[r * classes + l as usize] -= scale;
    }
    d
}

// ----------------------------------------------------------------------- Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-5 }
    }
}

/// Adam with classic L2 weight decay (`g + wd·θ` feeds the moments).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        AdamState { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_congruent(grads)?;
        params.check_congruent(&self.m)?;
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let tensors = params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut().zip(self.v.tensors.iter_mut()));
        for ((p, g), (m, v)) in tensors {
            for k in 0..p.data.len() {
                let gk = g.data[k] + c.weight_decay * p.data[k];
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                if c.lr != 0.0 {
                    let mhat = m.data[k] / bc1;
                    let vhat = v.data[k] / bc2;
                    p.data[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        params.check_finite()
    }
}

// --------------------------------------------------------------------- init

/// Uniform on `±sqrt(6 / (fan_in + fan_out))` with `fan_in = shape[0]` and
/// `fan_out` the product of the remaining dims (or `shape[0]` for vectors).
pub fn xavier_uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let Some((&fan_in, rest)) = shape.split_first() else {
        return Err(Error::shape("xavier init of a scalar"));
    };
    let fan_out = if rest.is_empty() { fan_in } else { rest.iter().product() };
    if fan_in + fan_out == 0 {
        return Err(Error::shape(format!("xavier init of empty shape {shape:?}")));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| dist.sample(rng)).collect())
}

pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    xavier_uniform(shape, &mut seeds::rng(seed, &[seeds::tag::INIT]))
}

// --------------------------------------------------------- gradient checking

/// Largest relative disagreement `|g_a - g_n| / (|g_a| + |g_n| + 1e-12)` between
/// `analytic` and central differences of `f` around `point`, over at most
/// `max_coords` coordinates drawn with `seed`.
pub fn gradient_check<F>(
    mut f: F,
    point: &ParamSet,
    analytic: &ParamSet,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    point.check_congruent(analytic)?;
    let total = point.n_scalars();
    let mut rng = seeds::rng(seed, &[]);
    let mut coords: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        index::sample(&mut rng, total, max_coords).into_vec()
    };
    coords.sort_unstable();
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for flat in coords {
        let (mut t, mut off) = (0, flat);
        while off >= probe.tensors[t].len() {
            off -= probe.tensors[t].len();
            t += 1;
        }
        let orig = probe.tensors[t].data[off];
        probe.tensors[t].data[off] = orig + step;
        let up = f(&probe)?;
        probe.tensors[t].data[off] = orig - step;
        let down = f(&probe)?;
        probe.tensors[t].data[off] = orig;
        let gn = (up - down) / (2.0 * step);
        let ga = analytic.tensors[t].data[off];
        worst = worst.max((ga - gn).abs() / (ga.abs() + gn.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{generate_synthetic, Synthetic};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        Tensor::new(shape.to_vec(), rand_vec(rng, shape.iter().product(), scale)).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Naive triple loop as an oracle for the strided gemm wrapper.
    #[test]
    fn gemm_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k, n) = (5, 7, 3);
        let a = rand_vec(&mut rng, m * k, 1.0);
        let b = rand_vec(&mut rng, k * n, 1.0);
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                want[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, 1.0, aa, a_t, bb, b_t, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn tensor_shape_and_finite_checks() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(p.get("b").is_err());
    }

    #[test]
    fn paramset_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        p.insert("w", rand_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[4], 1.0)).unwrap();
        p.insert("s", Tensor::new(vec![1, 1, 1], vec![-0.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + (4 + 1 + 4 + 16 + 96) + (4 + 1 + 4 + 8 + 32) + (4 + 1 + 4 + 24 + 8));
        let q = ParamSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(q.names(), p.names());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert!(ParamSet::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn embedding_examples() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(embedding_forward(&eye, &[2]).unwrap(), vec![0., 0., 1.]);
        let zero = Tensor::zeros(&[3, 4]);
        assert!(embedding_forward(&zero, &[0, 2, 1]).unwrap().iter().all(|&v| v == 0.0));
        assert!(embedding_forward(&zero, &[3]).is_err());

        // d(sum of outputs)/d(row k) = occurrences of k
        let codes = [0u8, 2, 2, 1, 2];
        let mut g = Tensor::zeros(&[3, 4]);
        embedding_backward(&codes, &vec![1.0; codes.len() * 4], &mut g);
        assert_eq!(&g.data()[..4], &[1.0; 4]);
        assert_eq!(&g.data()[4..8], &[1.0; 4]);
        assert_eq!(&g.data()[8..], &[3.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.insert("t", rand_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        let mut grads = p.zeros_like();
        embedding_backward(&codes, &vec![1.0; 20], grads.get_mut("t").unwrap());
        let f = |q: &ParamSet| Ok(embedding_forward(q.get("t")?, &codes)?.iter().sum());
        assert!(gradient_check(f, &p, &grads, STEP, 200, 0).unwrap() < 1e-9);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = 5;
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[rows, 3], 1.0)).unwrap();
        p.insert("w", rand_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[4], 1.0)).unwrap();
        let r = rand_vec(&mut rng, rows * 4, 1.0);
        let loss = |q: &ParamSet| -> Result<f64> {
            let y = linear_forward(q.get("x")?.data(), rows, q.get("w")?, q.get("b")?)?;
            Ok(dot(&y, &r) + 0.5 * dot(&y, &y))
        };
        let y = linear_forward(p.get("x").unwrap().data(), rows, p.get("w").unwrap(), p.get("b").unwrap()).unwrap();
        let dy: Vec<f64> = y.iter().zip(&r).map(|(a, b)| a + b).collect();
        let mut grads = p.zeros_like();
        let (mut dw, mut db) = (Tensor::zeros(&[3, 4]), Tensor::zeros(&[4]));
        let dx = linear_backward(p.get("x").unwrap().data(), rows, p.get("w").unwrap(), &dy, &mut dw, &mut db);
        grads.get_mut("x").unwrap().data_mut().copy_from_slice(&dx);
        *grads.get_mut("w").unwrap() = dw;
        *grads.get_mut("b").unwrap() = db;
        assert!(gradient_check(loss, &p, &grads, STEP, 200, 1).unwrap() < TOL);
    }

    #[test]
    fn lstm_cell_identities() {
        let w = LstmWeights::zeros(3, 4);
        let (h, cache) = lstm_cell_forward(&w, &[0.0; 6], &[0.0; 8], &[0.0; 8], 2).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(cache.cell_state().iter().all(|&v| v == 0.0));
        assert!(cache.gates.chunks(16).all(|g| g[..8].iter().all(|&v| v == 0.5)
            && g[8..12].iter().all(|&v| v == 0.0)
            && g[12..].iter().all(|&v| v == 0.5)));

        // c_prev = 0 => c = i * c̃, whatever f is
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = LstmWeights::zeros(3, 4);
        w.w = rand_vec(&mut rng, w.w.len(), 1.0);
        w.b = rand_vec(&mut rng, 16, 1.0);
        let x = rand_vec(&mut rng, 3, 1.0);
        let hp = rand_vec(&mut rng, 4, 1.0);
        let (_, cache) = lstm_cell_forward(&w, &x, &hp, &[0.0; 4], 1).unwrap();
        for j in 0..4 {
            assert_eq!(cache.c[j], cache.gates[4 + j] * cache.gates[8 + j]);
        }
        assert!(lstm_cell_forward(&w, &x, &hp, &[0.0; 3], 1).is_err());
    }

    fn lstm_params(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> ParamSet {
        let mut p = ParamSet::new();
        LstmWeights::init_params(&mut p, "l", input, hidden, rng).unwrap();
        for name in LstmWeights::param_names("l") {
            if name.contains(".b_") {
                *p.get_mut(&name).unwrap() = rand_tensor(rng, &[hidden], 0.5);
            }
        }
        p
    }

    #[test]
    fn lstm_cell_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let (rows, d, h) = (3, 2, 4);
            let mut p = lstm_params(&mut rng, d, h);
            p.insert("x", rand_tensor(&mut rng, &[rows, d], 1.0)).unwrap();
            p.insert("h0", rand_tensor(&mut rng, &[rows, h], 1.0)).unwrap();
            p.insert("c0", rand_tensor(&mut rng, &[rows, h], 1.0)).unwrap();
            let rh = rand_vec(&mut rng, rows * h, 1.0);
            let rc = rand_vec(&mut rng, rows * h, 1.0);
            let loss = |q: &ParamSet| -> Result<f64> {
                let w = LstmWeights::gather(q, "l")?;
                let (hn, cache) = lstm_cell_forward(&w, q.get("x")?.data(), q.get("h0")?.data(), q.get("c0")?.data(), rows)?;
                Ok(dot(&hn, &rh) + dot(cache.cell_state(), &rc))
            };
            let w = LstmWeights::gather(&p, "l").unwrap();
            let (_, cache) = lstm_cell_forward(&w, p.get("x").unwrap().data(), p.get("h0").unwrap().data(), p.get("c0").unwrap().data(), rows).unwrap();
            let mut gw = LstmWeights::zeros(d, h);
            let (dx, dh0, dc0) = lstm_cell_backward(&w, &cache, &rh, &rc, &mut gw);
            let mut grads = p.zeros_like();
            gw.scatter_add(&mut grads, "l").unwrap();
            grads.get_mut("x").unwrap().data_mut().copy_from_slice(&dx);
            grads.get_mut("h0").unwrap().data_mut().copy_from_slice(&dh0);
            grads.get_mut("c0").unwrap().data_mut().copy_from_slice(&dc0);
            let err = gradient_check(loss, &p, &grads, STEP, 200, seed).unwrap();
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn lstm_sequence_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (rows, d, h, t) = (2, 3, 5, 6);
        let mut p = lstm_params(&mut rng, d, h);
        p.insert("xs", rand_tensor(&mut rng, &[t, rows, d], 1.0)).unwrap();
        let r: Vec<Vec<f64>> = (0..t).map(|_| rand_vec(&mut rng, rows * h, 1.0)).collect();
        let split = |q: &ParamSet| -> Vec<Vec<f64>> {
            q.get("xs").unwrap().data().chunks(rows * d).map(<[f64]>::to_vec).collect()
        };
        let loss = |q: &ParamSet| -> Result<f64> {
            let cache = lstm_sequence_forward(&LstmWeights::gather(q, "l")?, &split(q), rows)?;
            Ok(cache.hs.iter().zip(&r).map(|(hv, rv)| dot(hv, rv)).sum())
        };
        let w = LstmWeights::gather(&p, "l").unwrap();
        let cache = lstm_sequence_forward(&w, &split(&p), rows).unwrap();
        let mut gw = LstmWeights::zeros(d, h);
        let dxs = lstm_sequence_backward(&w, &cache, &r, &mut gw);
        let mut grads = p.zeros_like();
        gw.scatter_add(&mut grads, "l").unwrap();
        grads.get_mut("xs").unwrap().data_mut().copy_from_slice(&dxs.concat());
        assert!(gradient_check(loss, &p, &grads, STEP, 200, 2).unwrap() < TOL);
    }

    #[test]
    fn gat_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let single = GatGraph::from_graph(&Graph::from_edges(1, []).unwrap());
        let w = rand_tensor(&mut rng, &[3, 4], 1.0);
        let a = rand_tensor(&mut rng, &[2, 4], 1.0);
        let x = rand_vec(&mut rng, 3, 1.0);
        let (_, cache) = gat_forward(&single, &w, &a, &x, 1).unwrap();
        assert_eq!(cache.attention(&single, 0, 0, 0), vec![1.0]);
        assert_eq!(cache.attention(&single, 0, 0, 1), vec![1.0]);

        let pair = GatGraph::from_graph(&Graph::from_edges(2, [(0, 1)]).unwrap());
        let xs = [x.clone(), x].concat();
        let (out, cache) = gat_forward(&pair, &w, &a, &xs, 1).unwrap();
        assert_eq!(cache.attention(&pair, 0, 0, 0)[1], cache.attention(&pair, 0, 1, 0)[0]);
        assert_eq!(out[..4], out[4..]);

        let g = generate_synthetic(Synthetic::BarabasiAlbert { n: 12, m: 2 }, 3).unwrap();
        let gg = GatGraph::from_graph(&g);
        let x = rand_vec(&mut rng, 2 * 12 * 3, 2.0);
        let (_, cache) = gat_forward(&gg, &w, &a, &x, 2).unwrap();
        for b in 0..2 {
            for i in 0..12 {
                for k in 0..2 {
                    let s: f64 = cache.attention(&gg, b, i, k).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(gat_forward(&gg, &w, &Tensor::zeros(&[2, 3]), &x, 2).is_err());
    }

    #[test]
    fn gat_gradients() {
        let star = generate_synthetic(Synthetic::Star { n: 4 }, 0).unwrap();
        let gg = GatGraph::from_graph(&star);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let (f_in, heads, fh, blocks) = (3, 2, 3, 2);
            let mut p = ParamSet::new();
            p.insert("w", rand_tensor(&mut rng, &[f_in, heads * fh], 1.0)).unwrap();
            p.insert("a", rand_tensor(&mut rng, &[heads, 2 * fh], 1.0)).unwrap();
            p.insert("x", rand_tensor(&mut rng, &[blocks * 4, f_in], 1.0)).unwrap();
            let r = rand_vec(&mut rng, blocks * 4 * heads * fh, 1.0);
            let loss = |q: &ParamSet| -> Result<f64> {
                let (out, _) = gat_forward(&gg, q.get("w")?, q.get("a")?, q.get("x")?.data(), blocks)?;
                Ok(dot(&out, &r))
            };
            let (_, cache) = gat_forward(&gg, p.get("w").unwrap(), p.get("a").unwrap(), p.get("x").unwrap().data(), blocks).unwrap();
            let mut grads = p.zeros_like();
            let (mut dw, mut da) = (Tensor::zeros(&[f_in, heads * fh]), Tensor::zeros(&[heads, 2 * fh]));
            let dx = gat_backward(&gg, p.get("w").unwrap(), p.get("a").unwrap(), &cache, &r, &mut dw, &mut da).unwrap();
            *grads.get_mut("w").unwrap() = dw;
            *grads.get_mut("a").unwrap() = da;
            grads.get_mut("x").unwrap().data_mut().copy_from_slice(&dx);
            let err = gradient_check(loss, &p, &grads, STEP, 200, seed).unwrap();
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn batch_norm_train_gradients_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let (rows, f) = (6, 3);
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[rows, f], 2.0)).unwrap();
        p.insert("g", rand_tensor(&mut rng, &[f], 1.0)).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[f], 1.0)).unwrap();
        let r = rand_vec(&mut rng, rows * f, 1.0);
        let loss = |q: &ParamSet| -> Result<f64> {
            let (mut rm, mut rv) = (vec![0.0; f], vec![1.0; f]);
            let (y, _) = batch_norm_train(q.get("x")?.data(), rows, q.get("g")?, q.get("b")?, &mut rm, &mut rv, BN_MOMENTUM, BN_EPS)?;
            Ok(dot(&y, &r))
        };
        let (mut rm, mut rv) = (vec![0.0; f], vec![1.0; f]);
        let (y, cache) = batch_norm_train(p.get("x").unwrap().data(), rows, p.get("g").unwrap(), p.get("b").unwrap(), &mut rm, &mut rv, BN_MOMENTUM, BN_EPS).unwrap();
        let mut grads = p.zeros_like();
        let (mut dg, mut db) = (Tensor::zeros(&[f]), Tensor::zeros(&[f]));
        let dx = batch_norm_backward(&cache, p.get("g").unwrap(), &r, &mut dg, &mut db);
        grads.get_mut("x").unwrap().data_mut().copy_from_slice(&dx);
        *grads.get_mut("g").unwrap() = dg;
        *grads.get_mut("b").unwrap() = db;
        assert!(gradient_check(loss, &p, &grads, STEP, 200, 3).unwrap() < TOL);

        // normalized columns: mean 0, biased variance ~1 before the affine map
        for j in 0..f {
            let col: Vec<f64> = (0..rows).map(|i| cache.xhat[i * f + j]).collect();
            assert_abs_diff_eq!(col.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        }
        let x = p.get("x").unwrap().data();
        let mean0: f64 = (0..rows).map(|i| x[i * f]).sum::<f64>() / rows as f64;
        assert_abs_diff_eq!(rm[0], 0.1 * mean0, epsilon = 1e-12);
        let ye = batch_norm_eval(x, rows, p.get("g").unwrap(), p.get("b").unwrap(), &rm, &rv, BN_EPS).unwrap();
        assert_eq!(ye.len(), y.len());
        // eval mode is row-local
        let one = batch_norm_eval(&x[f..2 * f], 1, p.get("g").unwrap(), p.get("b").unwrap(), &rm, &rv, BN_EPS).unwrap();
        assert_eq!(one, ye[f..2 * f]);
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let x = rand_vec(&mut rng, 1000, 1.0);
        for seed in 0..5 {
            let (y, mask) = dropout_forward(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
            assert_eq!(y, x);
            assert!(mask.is_none());
        }
        let (y, _) = dropout_forward(&x, 0.5, &mut rng, false).unwrap();
        assert_eq!(y, x);
        let (y, mask) = dropout_forward(&x, 0.25, &mut rng, true).unwrap();
        let mask = mask.unwrap();
        for ((a, b), m) in x.iter().zip(&y).zip(&mask) {
            assert!(*b == 0.0 || (b / a - 1.0 / 0.75).abs() < 1e-12);
            assert!(*m == 0.0 || *m == 1.0 / 0.75);
        }
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!((680..=820).contains(&kept), "{kept}");
        assert_eq!(dropout_backward(&[1.0, 2.0], Some(&[0.0, 2.0])), vec![0.0, 4.0]);
        assert!(dropout_forward(&x, 1.0, &mut rng, true).is_err());
        assert!(dropout_forward(&x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn softmax_ce_examples() {
        let (loss, probs) = softmax_cross_entropy(&[0.3, 0.3, 0.3], 3, &[1]).unwrap();
        assert_abs_diff_eq!(loss, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 1.098612, epsilon = 1e-6);
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        // hand softmax: e^10 / (e^10 + 2)
        let (_, probs) = softmax_cross_entropy(&[10.0, 0.0, 0.0], 3, &[0]).unwrap();
        let want = 10f64.exp() / (10f64.exp() + 2.0);
        assert_abs_diff_eq!(probs[0], want, epsilon = 1e-15);
        assert_abs_diff_eq!(probs[0], 0.99991, epsilon = 1e-5);
        assert!(softmax_cross_entropy(&[0.0; 3], 3, &[3]).is_err());
        assert!(softmax_cross_entropy(&[1e308, -1e308, 0.0], 3, &[0]).is_ok());

        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let labels = [0u8, 2, 1, 1];
        let mut p = ParamSet::new();
        p.insert("z", rand_tensor(&mut rng, &[4, 3], 3.0)).unwrap();
        let (loss, probs) = softmax_cross_entropy(p.get("z").unwrap().data(), 3, &labels).unwrap();
        assert!(loss >= 0.0);
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut grads = p.zeros_like();
        grads.get_mut("z").unwrap().data_mut().copy_from_slice(&softmax_cross_entropy_backward(&probs, 3, &labels, 0.25));
        let f = |q: &ParamSet| Ok(softmax_cross_entropy(q.get("z")?.data(), 3, &labels)?.0);
        assert!(gradient_check(f, &p, &grads, STEP, 200, 4).unwrap() < TOL);
    }

    #[test]
    fn adam_examples() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let before = p.clone();
        let zero = p.zeros_like();
        let mut adam = AdamState::new(&p, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        for _ in 0..5 {
            adam.step(&mut p, &zero).unwrap();
        }
        assert_eq!(p, before);

        let mut s = ParamSet::new();
        s.insert("x", Tensor::zeros(&[1])).unwrap();
        let mut one = s.zeros_like();
        one.fill(1.0);
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(&s, cfg);
        adam.step(&mut s, &one).unwrap();
        let first = s.get("x").unwrap().data()[0];
        assert_abs_diff_eq!(first, -0.01 / (1.0 + 1e-8), epsilon = 1e-15);

        let mut adam = AdamState::new(&p, AdamConfig { lr: 0.01, weight_decay: 0.1, ..AdamConfig::default() });
        adam.step(&mut p, &zero).unwrap();
        for (a, b) in p.get("w").unwrap().data().iter().zip(before.get("w").unwrap().data()) {
            assert!(a.abs() < b.abs());
        }

        let mut q = before.clone();
        let mut g = q.zeros_like();
        g.fill(0.7);
        let mut adam = AdamState::new(&q, AdamConfig { lr: 0.0, ..AdamConfig::default() });
        adam.step(&mut q, &g).unwrap();
        assert_eq!(q, before);

        let mut other = ParamSet::new();
        other.insert("v", Tensor::zeros(&[3])).unwrap();
        assert!(adam.step(&mut q, &other).is_err());
    }

    #[test]
    fn xavier_examples() {
        let t = xavier_init(&[100, 100], 7).unwrap();
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(t, xavier_init(&[100, 100], 7).unwrap());
        assert_ne!(t, xavier_init(&[100, 100], 8).unwrap());
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!(xavier_init(&[], 0).is_err());
    }

    #[test]
    fn gradient_check_examples() {
        let mut p = ParamSet::new();
        p.insert("t", Tensor::filled(&[5], 1.0)).unwrap();
        let mut g = p.zeros_like();
        g.fill(2.0);
        let sq = |q: &ParamSet| Ok(q.get("t")?.data().iter().map(|x| x * x).sum());
        assert!(gradient_check(sq, &p, &g, 1e-5, 200, 0).unwrap() < 1e-9);
        let coefs = [1.0, -2.0, 0.5, 3.0, 0.0];
        let lin = |q: &ParamSet| Ok(dot(q.get("t")?.data(), &coefs));
        let mut g = p.zeros_like();
        g.get_mut("t").unwrap().data_mut().copy_from_slice(&coefs);
        assert!(gradient_check(lin, &p, &g, 1e-5, 200, 0).unwrap() < 1e-9);
        let mut wrong = g.clone();
        wrong.get_mut("t").unwrap().data_mut()[0] = 5.0;
        assert!(gradient_check(lin, &p, &wrong, 1e-5, 200, 0).unwrap() > 0.5);
    }
}
