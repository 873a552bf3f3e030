//! Double-precision reference of the causal query-driven mask decoder.
//!
//! Visual tokens attend to query tokens, a two-layer MLP produces spatial
//! features `S`, and two stride-2 transposed convolutions decode `S` into a
//! mask at four times the grid resolution. Answer-token rows of the hidden
//! states never enter the computation. Losses (Dice + binary cross-entropy)
//! come with hand-written gradients and a finite-difference checker.
//!
//! Matrix products use a fixed summation order so outputs are bit-for-bit
//! reproducible across machines.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Pcg32;

pub type Matrix = Array2<f64>;

pub const PARAMS_FORMAT: &str = "takit-cqmd-params/1";
pub const KERNEL: usize = 4;
pub const DICE_EPS: f64 = 1e-6;
pub const CE_CLAMP: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative gradient error. Central differences of
/// a unit-scale loss carry roughly `1e-10` of roundoff, so gradients below
/// the floor are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum CqmdError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("index sets invalid: {0}")]
    InvalidIndexSets(String),
    #[error("grid {h}x{w} does not hold {n} visual tokens")]
    GridMismatch { n: usize, h: usize, w: usize },
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("parameter file: {0}")]
    Schema(String),
}

fn shape_err(what: &str, expected: &[usize], got: &[usize]) -> CqmdError {
    CqmdError::ShapeMismatch {
        what: what.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// `a @ b` with a fixed left-to-right summation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, CqmdError> {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    if k != k2 {
        return Err(shape_err("matmul", &[n, k, m], &[n, k2, m]));
    }
    let mut out = Matrix::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    Ok(out)
}

fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    matmul(a, b).expect("shapes checked by caller")
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub h_out: Matrix,
    pub idx_img: Vec<usize>,
    pub idx_q: Vec<usize>,
    pub idx_a: Vec<usize>,
}

impl HiddenStates {
    /// Index sets must be disjoint and cover every row.
    pub fn validate(&self) -> Result<(), CqmdError> {
        let rows = self.h_out.nrows();
        let mut seen = vec![false; rows];
        for &i in self.idx_img.iter().chain(&self.idx_q).chain(&self.idx_a) {
            if i >= rows {
                return Err(CqmdError::IndexOutOfRange { index: i, rows });
            }
            if seen[i] {
                return Err(CqmdError::InvalidIndexSets(format!("row {i} listed twice")));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CqmdError::InvalidIndexSets(format!("row {i} not covered")));
        }
        Ok(())
    }

    /// Contiguous layout: image rows, then query rows, then answer rows.
    pub fn contiguous(h_out: Matrix, n: usize, l: usize, m: usize) -> Result<Self, CqmdError> {
        if h_out.nrows() != n + l + m {
            return Err(shape_err("h_out rows", &[n + l + m], &[h_out.nrows()]));
        }
        Ok(HiddenStates {
            h_out,
            idx_img: (0..n).collect(),
            idx_q: (n..n + l).collect(),
            idx_a: (n + l..n + l + m).collect(),
        })
    }
}

fn gather(h: &Matrix, idx: &[usize]) -> Result<Matrix, CqmdError> {
    let rows = h.nrows();
    let mut out = Matrix::zeros((idx.len(), h.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        if i >= rows {
            return Err(CqmdError::IndexOutOfRange { index: i, rows });
        }
        out.row_mut(r).assign(&h.row(i));
    }
    Ok(out)
}

/// Row gathers `(H_img, H_q, H_a)` in index-set order.
pub fn split_hidden(hs: &HiddenStates) -> Result<(Matrix, Matrix, Matrix), CqmdError> {
    Ok((
        gather(&hs.h_out, &hs.idx_img)?,
        gather(&hs.h_out, &hs.idx_q)?,
        gather(&hs.h_out, &hs.idx_a)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqmdParams {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub w1: Matrix,
    pub b1: Array1<f64>,
    pub w2: Matrix,
    pub b2: Array1<f64>,
    /// `(d, d/2, 4, 4)`: input channel, output channel, kernel row, column.
    pub dec1_w: Array4<f64>,
    pub dec1_b: Array1<f64>,
    /// `(d/2, 1, 4, 4)`.
    pub dec2_w: Array4<f64>,
    pub dec2_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 11] = [
    "w_query", "w_key", "w_value", "w1", "b1", "w2", "b2", "dec1_w", "dec1_b", "dec2_w", "dec2_b",
];

impl CqmdParams {
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        let h = d / 2;
        CqmdParams {
            w_query: Matrix::zeros((d, d)),
            w_key: Matrix::zeros((d, d)),
            w_value: Matrix::zeros((d, d)),
            w1: Matrix::zeros((d, d_ff)),
            b1: Array1::zeros(d_ff),
            w2: Matrix::zeros((d_ff, d)),
            b2: Array1::zeros(d),
            dec1_w: Array4::zeros((d, h, KERNEL, KERNEL)),
            dec1_b: Array1::zeros(h),
            dec2_w: Array4::zeros((h, 1, KERNEL, KERNEL)),
            dec2_b: Array1::zeros(1),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights and small biases.
    pub fn random(d: usize, d_ff: usize, rng: &mut Pcg32) -> Self {
        let mut p = Self::zeros(d, d_ff);
        let fan = |name: &str| -> f64 {
            match name {
                "w_query" | "w_key" | "w_value" | "w1" => d as f64,
                "w2" => d_ff as f64,
                "dec1_w" => (d * 4) as f64,
                "dec2_w" => (d / 2 * 4) as f64,
                _ => 10.0,
            }
        };
        for (name, data) in TENSOR_NAMES.iter().zip(p.slices_mut()) {
            let a = 1.0 / fan(name).sqrt();
            for v in data.iter_mut() {
                *v = rng.uniform(-a, a);
            }
        }
        p
    }

    pub fn d(&self) -> usize {
        self.w_query.nrows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.ncols()
    }

    pub fn shapes(d: usize, d_ff: usize) -> [Vec<usize>; 11] {
        let h = d / 2;
        [
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d_ff],
            vec![d_ff],
            vec![d_ff, d],
            vec![d],
            vec![d, h, KERNEL, KERNEL],
            vec![h],
            vec![h, 1, KERNEL, KERNEL],
            vec![1],
        ]
    }

    pub fn validate(&self) -> Result<(), CqmdError> {
        let d = self.d();
        if d < 2 || !d.is_multiple_of(2) {
            return Err(CqmdError::Schema(format!("d must be even and >= 2 (got {d})")));
        }
        let got = self.raw_shapes();
        for ((name, want), got) in TENSOR_NAMES.iter().zip(Self::shapes(d, self.d_ff())).zip(got) {
            if want != got {
                return Err(shape_err(name, &want, &got));
            }
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(CqmdError::Schema("non-finite parameter".into()));
        }
        Ok(())
    }

    fn raw_shapes(&self) -> [Vec<usize>; 11] {
        [
            self.w_query.shape().to_vec(),
            self.w_key.shape().to_vec(),
            self.w_value.shape().to_vec(),
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
            self.dec1_w.shape().to_vec(),
            self.dec1_b.shape().to_vec(),
            self.dec2_w.shape().to_vec(),
            self.dec2_b.shape().to_vec(),
        ]
    }

    pub fn slices(&self) -> [&[f64]; 11] {
        [
            self.w_query.as_slice().expect("standard layout"),
            self.w_key.as_slice().expect("standard layout"),
            self.w_value.as_slice().expect("standard layout"),
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.dec1_w.as_slice().expect("standard layout"),
            self.dec1_b.as_slice().expect("standard layout"),
            self.dec2_w.as_slice().expect("standard layout"),
            self.dec2_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.w_query.as_slice_mut().expect("standard layout"),
            self.w_key.as_slice_mut().expect("standard layout"),
            self.w_value.as_slice_mut().expect("standard layout"),
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.dec1_w.as_slice_mut().expect("standard layout"),
            self.dec1_b.as_slice_mut().expect("standard layout"),
            self.dec2_w.as_slice_mut().expect("standard layout"),
            self.dec2_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorJson {
    fn new(shape: &[usize], data: &[f64]) -> Self {
        TensorJson {
            shape: shape.to_vec(),
            data: data.to_vec(),
        }
    }

    fn matrix(&self, what: &str) -> Result<Matrix, CqmdError> {
        if self.shape.len() != 2 || self.shape[0] * self.shape[1] != self.data.len() {
            return Err(CqmdError::Schema(format!("tensor `{what}` shape/data mismatch")));
        }
        Ok(Matrix::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone()).expect("checked"))
    }
}

/// Inputs and expected output stored next to a parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub grid: [usize; 2],
    pub idx_img: Vec<usize>,
    pub idx_q: Vec<usize>,
    pub idx_a: Vec<usize>,
    pub h_out: TensorJson,
    pub mask: TensorJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    pub d: usize,
    pub d_ff: usize,
    pub tensors: BTreeMap<String, TensorJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<GoldenCase>,
}

impl ParamsFile {
    pub fn from_params(p: &CqmdParams) -> Self {
        let tensors = TENSOR_NAMES
            .iter()
            .zip(p.raw_shapes())
            .zip(p.slices())
            .map(|((n, s), d)| (n.to_string(), TensorJson::new(&s, d)))
            .collect();
        ParamsFile {
            format: PARAMS_FORMAT.to_string(),
            d: p.d(),
            d_ff: p.d_ff(),
            tensors,
            golden: None,
        }
    }

    pub fn params(&self) -> Result<CqmdParams, CqmdError> {
        if self.format != PARAMS_FORMAT {
            return Err(CqmdError::Schema(format!("unknown format `{}`", self.format)));
        }
        if self.d < 2 || !self.d.is_multiple_of(2) || self.d_ff == 0 {
            return Err(CqmdError::Schema(format!(
                "bad dimensions d={} d_ff={}",
                self.d, self.d_ff
            )));
        }
        let mut p = CqmdParams::zeros(self.d, self.d_ff);
        let shapes = CqmdParams::shapes(self.d, self.d_ff);
        for ((name, want), dst) in TENSOR_NAMES.iter().zip(shapes).zip(p.slices_mut()) {
            let t = self
                .tensors
                .get(*name)
                .ok_or_else(|| CqmdError::Schema(format!("missing tensor `{name}`")))?;
            if t.shape != want || t.data.len() != dst.len() {
                return Err(CqmdError::Schema(format!(
                    "tensor `{name}` has shape {:?} with {} values, expected {want:?}",
                    t.shape,
                    t.data.len()
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        if let Some(extra) = self.tensors.keys().find(|k| !TENSOR_NAMES.contains(&k.as_str())) {
            return Err(CqmdError::Schema(format!("unknown tensor `{extra}`")));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn from_json(s: &str) -> Result<Self, CqmdError> {
        serde_json::from_str(s).map_err(|e| CqmdError::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

impl GoldenCase {
    pub fn hidden(&self) -> Result<HiddenStates, CqmdError> {
        let hs = HiddenStates {
            h_out: self.h_out.matrix("h_out")?,
            idx_img: self.idx_img.clone(),
            idx_q: self.idx_q.clone(),
            idx_a: self.idx_a.clone(),
        };
        hs.validate()?;
        Ok(hs)
    }

    pub fn expected_mask(&self) -> Result<Matrix, CqmdError> {
        self.mask.matrix("mask")
    }
}

fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_cols(what: &str, m: &Matrix, d: usize) -> Result<(), CqmdError> {
    if m.ncols() != d {
        return Err(shape_err(what, &[m.nrows(), d], m.shape()));
    }
    Ok(())
}

struct AttnParts {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    attn: Matrix,
}

fn attention_parts(h_img: &Matrix, h_q: &Matrix, p: &CqmdParams) -> Result<AttnParts, CqmdError> {
    let d = p.d();
    check_cols("h_img", h_img, d)?;
    check_cols("h_q", h_q, d)?;
    if h_q.nrows() == 0 {
        return Err(shape_err("h_q", &[1, d], h_q.shape()));
    }
    let q = mm(h_img, &p.w_query);
    let k = mm(h_q, &p.w_key);
    let v = mm(h_q, &p.w_value);
    let z = mm(&q, &k.t().to_owned()) / (d as f64).sqrt();
    let a = softmax_rows(&z);
    let attn = mm(&a, &v);
    Ok(AttnParts { q, k, v, a, attn })
}

/// `softmax((H_img Wq)(H_q Wk)^T / sqrt(d)) (H_q Wv)`, softmax over query
/// positions.
pub fn cross_attention(h_img: &Matrix, h_q: &Matrix, p: &CqmdParams) -> Result<Matrix, CqmdError> {
    Ok(attention_parts(h_img, h_q, p)?.attn)
}

/// Attention weights alone, for inspection.
pub fn attention_weights(h_img: &Matrix, h_q: &Matrix, p: &CqmdParams) -> Result<Matrix, CqmdError> {
    Ok(attention_parts(h_img, h_q, p)?.a)
}

fn mlp_parts(attn: &Matrix, p: &CqmdParams) -> Result<(Matrix, Matrix), CqmdError> {
    check_cols("attn", attn, p.d())?;
    let pre = mm(attn, &p.w1) + &p.b1;
    let s = mm(&pre.mapv(|x| x.max(0.0)), &p.w2) + &p.b2;
    Ok((pre, s))
}

/// `ReLU(Attn W1 + b1) W2 + b2`.
pub fn spatial_features(attn: &Matrix, p: &CqmdParams) -> Result<Matrix, CqmdError> {
    Ok(mlp_parts(attn, p)?.1)
}

/// Stride-2, kernel-4, padding-1 transposed convolution by scatter-add.
/// Input `(C, H, W)`, weights `(C, O, 4, 4)`, output `(O, 2H, 2W)`.
pub fn conv_transpose(x: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let o = w.dim().1;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Array3::zeros((o, oh, ow));
    for oc in 0..o {
        out.index_axis_mut(ndarray::Axis(0), oc).fill(b[oc]);
    }
    for ic in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                let v = x[[ic, y, xx]];
                for ky in 0..KERNEL {
                    let oy = (2 * y + ky) as isize - 1;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ox = (2 * xx + kx) as isize - 1;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        for oc in 0..o {
                            out[[oc, oy as usize, ox as usize]] += v * w[[ic, oc, ky, kx]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_transpose`] given the output gradient.
fn conv_transpose_backward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    dy: &Array3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (c, h, wd) = x.dim();
    let (o, oh, ow) = dy.dim();
    let mut dx = Array3::zeros((c, h, wd));
    let mut dw = Array4::zeros(w.dim());
    let db = Array1::from_iter((0..o).map(|oc| dy.index_axis(ndarray::Axis(0), oc).sum()));
    for ic in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                let v = x[[ic, y, xx]];
                let mut acc = 0.0;
                for ky in 0..KERNEL {
                    let oy = (2 * y + ky) as isize - 1;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ox = (2 * xx + kx) as isize - 1;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        for oc in 0..o {
                            let g = dy[[oc, oy as usize, ox as usize]];
                            acc += w[[ic, oc, ky, kx]] * g;
                            dw[[ic, oc, ky, kx]] += v * g;
                        }
                    }
                }
                dx[[ic, y, xx]] = acc;
            }
        }
    }
    (dx, dw, db)
}

fn grid_of(s: &Matrix, h: usize, w: usize) -> Result<Array3<f64>, CqmdError> {
    let (n, d) = s.dim();
    if n != h * w || h == 0 || w == 0 {
        return Err(CqmdError::GridMismatch { n, h, w });
    }
    Ok(Array3::from_shape_fn((d, h, w), |(c, y, x)| s[[y * w + x, c]]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct DecodeParts {
    x0: Array3<f64>,
    y1: Array3<f64>,
    x1: Array3<f64>,
    mask: Matrix,
}

fn decode_parts(s: &Matrix, h: usize, w: usize, p: &CqmdParams) -> Result<DecodeParts, CqmdError> {
    check_cols("s", s, p.d())?;
    let x0 = grid_of(s, h, w)?;
    let y1 = conv_transpose(&x0, &p.dec1_w, &p.dec1_b);
    let x1 = y1.mapv(|v| v.max(0.0));
    let y2 = conv_transpose(&x1, &p.dec2_w, &p.dec2_b);
    let mask = y2.index_axis(ndarray::Axis(0), 0).mapv(sigmoid);
    Ok(DecodeParts { x0, y1, x1, mask })
}

/// Decodes `S` (rows in row-major grid order) into a `4h x 4w` probability
/// map.
pub fn decode_mask(s: &Matrix, h: usize, w: usize, p: &CqmdParams) -> Result<Matrix, CqmdError> {
    Ok(decode_parts(s, h, w, p)?.mask)
}

/// Every intermediate of one forward pass.
pub struct Forward {
    pub h_img: Matrix,
    pub h_q: Matrix,
    pub attn: Matrix,
    pub s: Matrix,
    pub mask: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    pre1: Matrix,
    x0: Array3<f64>,
    y1: Array3<f64>,
    x1: Array3<f64>,
}

impl Forward {
    /// Signs of every ReLU input, used to detect finite-difference steps
    /// that cross a kink.
    fn relu_pattern(&self) -> Vec<bool> {
        self.pre1.iter().chain(self.y1.iter()).map(|&v| v > 0.0).collect()
    }
}

pub fn forward(hs: &HiddenStates, grid: (usize, usize), p: &CqmdParams) -> Result<Forward, CqmdError> {
    let (h_img, h_q, _) = split_hidden(hs)?;
    let ap = attention_parts(&h_img, &h_q, p)?;
    let (pre1, s) = mlp_parts(&ap.attn, p)?;
    let dp = decode_parts(&s, grid.0, grid.1, p)?;
    Ok(Forward {
        h_img,
        h_q,
        attn: ap.attn,
        s,
        mask: dp.mask,
        q: ap.q,
        k: ap.k,
        v: ap.v,
        a: ap.a,
        pre1,
        x0: dp.x0,
        y1: dp.y1,
        x1: dp.x1,
    })
}

/// Loss constants. Defaults: Dice smoothing `1e-6`, probability clamp `1e-7`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLoss {
    pub dice_eps: f64,
    pub ce_clamp: f64,
}

impl Default for MaskLoss {
    fn default() -> Self {
        MaskLoss {
            dice_eps: DICE_EPS,
            ce_clamp: CE_CLAMP,
        }
    }
}

/// Neumaier-compensated sum; keeps loss roundoff near one ulp so central
/// differences at a `1e-6` step stay accurate.
fn csum(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in it {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

fn same_shape(pred: &Matrix, gt: &Matrix) -> Result<(), CqmdError> {
    if pred.dim() != gt.dim() {
        return Err(shape_err("mask", pred.shape(), gt.shape()));
    }
    Ok(())
}

impl MaskLoss {
    pub fn dice(&self, pred: &Matrix, gt: &Matrix) -> Result<f64, CqmdError> {
        same_shape(pred, gt)?;
        let inter = csum(pred.iter().zip(gt).map(|(p, g)| p * g));
        let union = csum(pred.iter().chain(gt.iter()).copied());
        Ok(1.0 - (2.0 * inter + self.dice_eps) / (union + self.dice_eps))
    }

    pub fn ce(&self, pred: &Matrix, gt: &Matrix) -> Result<f64, CqmdError> {
        same_shape(pred, gt)?;
        let lo = self.ce_clamp;
        let s = csum(pred.iter().zip(gt).map(|(&p, &g)| {
            let pc = p.clamp(lo, 1.0 - lo);
            g * pc.ln() + (1.0 - g) * (1.0 - pc).ln()
        }));
        Ok(-s / pred.len() as f64)
    }

    pub fn mask(&self, pred: &Matrix, gt: &Matrix) -> Result<(f64, f64), CqmdError> {
        Ok((self.dice(pred, gt)?, self.ce(pred, gt)?))
    }

    /// d(dice + ce)/d(pred).
    fn grad(&self, pred: &Matrix, gt: &Matrix) -> Matrix {
        let inter = csum(pred.iter().zip(gt).map(|(p, g)| p * g));
        let union = csum(pred.iter().chain(gt.iter()).copied()) + self.dice_eps;
        let num = 2.0 * inter + self.dice_eps;
        let n = pred.len() as f64;
        let lo = self.ce_clamp;
        Matrix::from_shape_fn(pred.dim(), |ij| {
            let (p, g) = (pred[ij], gt[ij]);
            let dice = -(2.0 * g * union - num) / (union * union);
            let ce = if p < lo || p > 1.0 - lo {
                0.0
            } else {
                -(g / p - (1.0 - g) / (1.0 - p)) / n
            };
            dice + ce
        })
    }
}

pub fn dice_loss(pred: &Matrix, gt: &Matrix) -> Result<f64, CqmdError> {
    MaskLoss::default().dice(pred, gt)
}

pub fn ce_loss(pred: &Matrix, gt: &Matrix) -> Result<f64, CqmdError> {
    MaskLoss::default().ce(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_ntp: f64,
    pub l_dice: f64,
    pub l_ce: f64,
    pub lambda_txt: f64,
    pub lambda_seg: f64,
}

impl LossTerms {
    /// Default weights of 1.0; `has_mask = false` zeroes the mask weight.
    pub fn new(l_ntp: f64, mask: Option<(f64, f64)>) -> Self {
        let (l_dice, l_ce, lambda_seg) = match mask {
            Some((d, c)) => (d, c, 1.0),
            None => (0.0, 0.0, 0.0),
        };
        LossTerms {
            l_ntp,
            l_dice,
            l_ce,
            lambda_txt: 1.0,
            lambda_seg,
        }
    }

    pub fn l_mask(&self) -> f64 {
        self.l_dice + self.l_ce
    }
}

pub fn ssa_loss(t: &LossTerms) -> f64 {
    t.lambda_txt * t.l_ntp + t.lambda_seg * t.l_mask()
}

/// Analytic gradient of `dice + ce` with respect to every parameter.
pub fn backward(fw: &Forward, gt: &Matrix, p: &CqmdParams, loss: &MaskLoss) -> Result<CqmdParams, CqmdError> {
    same_shape(&fw.mask, gt)?;
    let d = p.d();
    let mut g = CqmdParams::zeros(d, p.d_ff());

    let dmask = loss.grad(&fw.mask, gt);
    let (oh, ow) = fw.mask.dim();
    let dy2 = Array3::from_shape_fn((1, oh, ow), |(_, y, x)| {
        let m = fw.mask[[y, x]];
        dmask[[y, x]] * m * (1.0 - m)
    });
    let (dx1, dw2, db2) = conv_transpose_backward(&fw.x1, &p.dec2_w, &dy2);
    g.dec2_w = dw2;
    g.dec2_b = db2;
    let dy1 = Array3::from_shape_fn(dx1.dim(), |i| if fw.y1[i] > 0.0 { dx1[i] } else { 0.0 });
    let (dx0, dw1, db1) = conv_transpose_backward(&fw.x0, &p.dec1_w, &dy1);
    g.dec1_w = dw1;
    g.dec1_b = db1;

    let (_, gh, gw) = dx0.dim();
    let ds = Matrix::from_shape_fn((gh * gw, d), |(r, c)| dx0[[c, r / gw, r % gw]]);
    let r1 = fw.pre1.mapv(|x| x.max(0.0));
    g.w2 = mm(&r1.t().to_owned(), &ds);
    g.b2 = ds.sum_axis(ndarray::Axis(0));
    let dr1 = mm(&ds, &p.w2.t().to_owned());
    let dpre1 = Matrix::from_shape_fn(dr1.dim(), |ij| if fw.pre1[ij] > 0.0 { dr1[ij] } else { 0.0 });
    g.w1 = mm(&fw.attn.t().to_owned(), &dpre1);
    g.b1 = dpre1.sum_axis(ndarray::Axis(0));
    let dattn = mm(&dpre1, &p.w1.t().to_owned());

    let da = mm(&dattn, &fw.v.t().to_owned());
    let dv = mm(&fw.a.t().to_owned(), &dattn);
    let mut dz = Matrix::zeros(fw.a.dim());
    for i in 0..fw.a.nrows() {
        let dot: f64 = (0..fw.a.ncols()).map(|j| da[[i, j]] * fw.a[[i, j]]).sum();
        for j in 0..fw.a.ncols() {
            dz[[i, j]] = fw.a[[i, j]] * (da[[i, j]] - dot) / (d as f64).sqrt();
        }
    }
    let dq = mm(&dz, &fw.k);
    let dk = mm(&dz.t().to_owned(), &fw.q);
    g.w_query = mm(&fw.h_img.t().to_owned(), &dq);
    g.w_key = mm(&fw.h_q.t().to_owned(), &dk);
    g.w_value = mm(&fw.h_q.t().to_owned(), &dv);

    for (name, s) in TENSOR_NAMES.iter().zip(g.slices()) {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(CqmdError::NonFiniteGradient(name.to_string()));
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter with the largest error, as `name[flat_index]`.
    pub worst: String,
    pub checked: usize,
    /// Parameters whose finite-difference step crossed a ReLU kink; their
    /// central difference is not a derivative estimate and is excluded.
    pub kink_skipped: usize,
    pub max_abs_grad: f64,
}

/// Relative error with a floor on the denominator.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients computed under `analytic_loss` with central
/// differences of the loss under `loss`. Passing the same constants for both
/// is the normal check; differing constants give a negative control.
pub fn grad_check_with(
    p: &CqmdParams,
    hs: &HiddenStates,
    grid: (usize, usize),
    gt: &Matrix,
    loss: &MaskLoss,
    analytic_loss: &MaskLoss,
) -> Result<GradCheckReport, CqmdError> {
    let fw = forward(hs, grid, p)?;
    let base_pattern = fw.relu_pattern();
    let grads = backward(&fw, gt, p, analytic_loss)?;
    let eval = |q: &CqmdParams| -> Result<(f64, Vec<bool>), CqmdError> {
        let f = forward(hs, grid, q)?;
        let (dl, ce) = loss.mask(&f.mask, gt)?;
        Ok((dl + ce, f.relu_pattern()))
    };
    let mut work = p.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        kink_skipped: 0,
        max_abs_grad: 0.0,
    };
    for (t, name) in TENSOR_NAMES.iter().enumerate() {
        for k in 0..p.slices()[t].len() {
            let theta = p.slices()[t][k];
            let h = FD_STEP * theta.abs().max(1.0);
            work.slices_mut()[t][k] = theta + h;
            let (lp, pp) = eval(&work)?;
            work.slices_mut()[t][k] = theta - h;
            let (lm, pm) = eval(&work)?;
            work.slices_mut()[t][k] = theta;
            if pp != base_pattern || pm != base_pattern {
                report.kink_skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.slices()[t][k];
            if !numeric.is_finite() {
                return Err(CqmdError::NonFiniteGradient(name.to_string()));
            }
            report.checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(analytic.abs());
            let e = rel_error(analytic, numeric);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(report)
}

pub fn grad_check(
    p: &CqmdParams,
    hs: &HiddenStates,
    grid: (usize, usize),
    gt: &Matrix,
) -> Result<GradCheckReport, CqmdError> {
    let l = MaskLoss::default();
    grad_check_with(p, hs, grid, gt, &l, &l)
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

/// Replaces every answer row with fresh random values and checks that `S`
/// and the decoded mask are bit-identical.
pub fn causal_independence_check(
    hs: &HiddenStates,
    grid: (usize, usize),
    p: &CqmdParams,
    rng: &mut Pcg32,
) -> Result<bool, CqmdError> {
    let base = forward(hs, grid, p)?;
    let mut alt = hs.clone();
    for &i in &hs.idx_a {
        for v in alt.h_out.row_mut(i).iter_mut() {
            *v = rng.uniform(-10.0, 10.0);
        }
    }
    let f = forward(&alt, grid, p)?;
    Ok(bits(&base.s) == bits(&f.s) && bits(&base.mask) == bits(&f.mask))
}

/// The reference configuration used by the self-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RefConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub l: usize,
    pub m: usize,
    pub d: usize,
    pub d_ff: usize,
}

impl Default for RefConfig {
    fn default() -> Self {
        RefConfig {
            grid_h: 4,
            grid_w: 4,
            l: 3,
            m: 4,
            d: 8,
            d_ff: 16,
        }
    }
}

impl RefConfig {
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Hidden states with a shuffled row layout.
    pub fn random_hidden(&self, rng: &mut Pcg32) -> HiddenStates {
        let rows = self.n() + self.l + self.m;
        let h_out = Matrix::from_shape_fn((rows, self.d), |_| rng.uniform(-1.0, 1.0));
        let mut order: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            order.swap(i, rng.below_usize(i + 1));
        }
        HiddenStates {
            h_out,
            idx_img: order[..self.n()].to_vec(),
            idx_q: order[self.n()..self.n() + self.l].to_vec(),
            idx_a: order[self.n() + self.l..].to_vec(),
        }
    }

    pub fn random_mask(&self, rng: &mut Pcg32) -> Matrix {
        Matrix::from_shape_fn((4 * self.grid_h, 4 * self.grid_w), |_| {
            f64::from(u8::from(rng.bernoulli(0.5)))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub config: RefConfig,
    pub seed: u64,
    pub shapes_ok: bool,
    pub causal_ok: bool,
    pub causal_draws: usize,
    pub grad: GradCheckReport,
    pub grad_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub golden_ok: Option<bool>,
    pub passed: bool,
}

pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Shape, causal-independence and gradient checks; with `params`, also the
/// stored golden case when the file has one.
pub fn selftest(params: Option<&ParamsFile>, seed: u64, causal_draws: usize) -> Result<SelftestReport, CqmdError> {
    let mut rng = Pcg32::seed_from(seed);
    let mut cfg = RefConfig::default();
    let p = match params {
        Some(f) => {
            let p = f.params()?;
            cfg.d = p.d();
            cfg.d_ff = p.d_ff();
            p
        }
        None => CqmdParams::random(cfg.d, cfg.d_ff, &mut rng),
    };
    let golden_ok = match params.and_then(|f| f.golden.as_ref()) {
        Some(g) => {
            let hs = g.hidden()?;
            let fw = forward(&hs, (g.grid[0], g.grid[1]), &p)?;
            Some(bits(&fw.mask) == bits(&g.expected_mask()?))
        }
        None => None,
    };
    let mut shapes_ok = true;
    for (h, w) in [(1, 1), (2, 3), (4, 4), (5, 2)] {
        let c = RefConfig {
            grid_h: h,
            grid_w: w,
            ..cfg
        };
        let hs = c.random_hidden(&mut rng);
        let fw = forward(&hs, (h, w), &p)?;
        shapes_ok &= fw.mask.dim() == (4 * h, 4 * w) && fw.mask.iter().all(|&v| v > 0.0 && v < 1.0);
    }
    let mut causal_ok = true;
    for _ in 0..causal_draws {
        let hs = cfg.random_hidden(&mut rng);
        causal_ok &= causal_independence_check(&hs, cfg.grid(), &p, &mut rng)?;
    }
    let hs = cfg.random_hidden(&mut rng);
    let gt = cfg.random_mask(&mut rng);
    let grad = grad_check(&p, &hs, cfg.grid(), &gt)?;
    let grad_ok = grad.max_rel_error < GRAD_TOLERANCE;
    let passed = shapes_ok && causal_ok && grad_ok && golden_ok.unwrap_or(true);
    Ok(SelftestReport {
        config: cfg,
        seed,
        shapes_ok,
        causal_ok,
        causal_draws,
        grad,
        grad_ok,
        golden_ok,
        passed,
    })
}

/// A parameter file with an embedded golden case, for exchanging exact test
/// vectors with other implementations.
pub fn make_golden(seed: u64) -> Result<ParamsFile, CqmdError> {
    let cfg = RefConfig::default();
    let mut rng = Pcg32::seed_from(seed);
    let p = CqmdParams::random(cfg.d, cfg.d_ff, &mut rng);
    let hs = cfg.random_hidden(&mut rng);
    let fw = forward(&hs, cfg.grid(), &p)?;
    let mut f = ParamsFile::from_params(&p);
    f.golden = Some(GoldenCase {
        grid: [cfg.grid_h, cfg.grid_w],
        idx_img: hs.idx_img.clone(),
        idx_q: hs.idx_q.clone(),
        idx_a: hs.idx_a.clone(),
        h_out: TensorJson::new(hs.h_out.shape(), hs.h_out.as_slice().expect("standard layout")),
        mask: TensorJson::new(fw.mask.shape(), fw.mask.as_slice().expect("standard layout")),
    });
    Ok(f)
}
