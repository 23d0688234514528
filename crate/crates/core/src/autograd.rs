//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly: each call computes its value
//! immediately and remembers how to push gradients back to its inputs.
//! Parameters are pulled in from a [`ParamStore`] once per tape and their
//! gradients are gathered by [`Tape::backward`].

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Mat, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Mat,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PadRows(Var),
    BroadcastCols(Var),
    Gather(Var, Rc<Vec<usize>>),
    Im2Col3 {
        x: Var,
        height: usize,
        width: usize,
    },
    AvgPool {
        x: Var,
        height: usize,
        width: usize,
        k: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Mat,
    },
    /// Scalar whose value and input-gradient were computed outside the tape.
    External { input: Var, grad: Mat },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of a scalar with respect to every parameter touched on a tape.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<(ParamId, Mat)>,
}

impl ParamGrads {
    /// Adds these gradients into a dense buffer aligned with the store.
    pub fn accumulate_into(&self, dense: &mut [Mat], scale: f64) {
        for (id, g) in &self.grads {
            dense[id.index()].scaled_add(scale, g);
        }
    }
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    loaded: HashMap<ParamId, Var>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
            loaded: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant (no gradient is collected for it).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// Loads a parameter; repeated loads on the same tape share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.loaded.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param);
        self.loaded.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul inner dims {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add shapes");
        let out = va + vb;
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a single row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row widths");
        let out = va + vr;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul shapes");
        let out = va * vb;
        self.push(out, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise softmax. Columns flagged `false` in `key_mask` get weight 0.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let out = softmax_rows_masked(self.value(a), key_mask);
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.dim();
        assert_eq!(self.value(gamma).dim(), (1, cols), "layer_norm gamma");
        assert_eq!(self.value(beta).dim(), (1, cols), "layer_norm beta");
        let mut x_hat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in vx.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                x_hat[[i, j]] = (v - mean) * is;
            }
        }
        let out = &x_hat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    /// Zero-pads `a` at the tail to `rows` rows.
    pub fn pad_rows(&mut self, a: Var, rows: usize) -> Var {
        let va = self.value(a);
        assert!(rows >= va.nrows(), "pad_rows cannot shrink");
        let mut out = Mat::zeros((rows, va.ncols()));
        out.slice_mut(s![..va.nrows(), ..]).assign(va);
        self.push(out, Op::PadRows(a))
    }

    /// Repeats an `r × 1` column across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.ncols(), 1, "broadcast_cols expects one column");
        let out = Mat::from_shape_fn((va.nrows(), cols), |(i, _)| va[[i, 0]]);
        self.push(out, Op::BroadcastCols(a))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Mat::zeros((ids.len(), vt.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&vt.row(id));
        }
        self.push(out, Op::Gather(table, Rc::new(ids.to_vec())))
    }

    /// 3×3, stride 1, zero-padded patch extraction on an `(h·w) × c`
    /// feature map stored row-major by pixel. Output is `(h·w) × 9c`.
    pub fn im2col3(&mut self, x: Var, height: usize, width: usize) -> Var {
        let out = im2col3_forward(self.value(x), height, width);
        self.push(out, Op::Im2Col3 { x, height, width })
    }

    /// Non-overlapping `k × k` average pooling on an `(h·w) × c` map.
    pub fn avg_pool(&mut self, x: Var, height: usize, width: usize, k: usize) -> Var {
        let out = avg_pool_forward(self.value(x), height, width, k);
        self.push(
            out,
            Op::AvgPool {
                x,
                height,
                width,
                k,
            },
        )
    }

    /// Cross-entropy of a `1 × C` logit row against `target`, as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let probs = softmax_rows_masked(self.value(logits), None);
        assert_eq!(probs.nrows(), 1, "cross entropy expects one row");
        let loss = -probs[[0, target]].max(1e-12).ln();
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Records a scalar computed outside the tape along with its gradient
    /// with respect to `input`.
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Mat) -> Var {
        assert_eq!(self.value(input).dim(), grad.dim(), "external grad shape");
        self.push(Mat::from_elem((1, 1), value), Op::External { input, grad })
    }

    /// Sum of all entries as a `1 × 1` node, built from differentiable ops.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let left = self.input(Mat::ones((1, r)));
        let right = self.input(Mat::ones((c, 1)));
        let t = self.matmul(left, a);
        self.matmul(t, right)
    }

    /// Backpropagates from the scalar `root` and returns parameter gradients.
    pub fn backward(&self, root: Var) -> ParamGrads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Affine(a, scale) => acc(&mut grads, *a, g * *scale),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        let inner = GELU_C * (x + GELU_A * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *g *= d;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.outer_iter_mut().zip(y.outer_iter()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let n = x_hat.ncols() as f64;
                    let g_beta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_gamma = (&g * x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxh = &g * gv;
                    let mut gx = Mat::zeros(g.raw_dim());
                    for i in 0..gx.nrows() {
                        let dr = dxh.row(i);
                        let xr = x_hat.row(i);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        for j in 0..gx.ncols() {
                            gx[[i, j]] =
                                inv_std[i] / n * (n * dr[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, g_gamma);
                    acc(&mut grads, *beta, g_beta);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + c]).to_owned());
                        start += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::PadRows(a) => {
                    let r = self.value(*a).nrows();
                    acc(&mut grads, *a, g.slice(s![..r, ..]).to_owned());
                }
                Op::BroadcastCols(a) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::Gather(table, ids) => {
                    let mut gt = Mat::zeros(self.value(*table).raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Im2Col3 { x, height, width } => {
                    let c = self.value(*x).ncols();
                    acc(&mut grads, *x, im2col3_backward(&g, *height, *width, c));
                }
                Op::AvgPool {
                    x,
                    height,
                    width,
                    k,
                } => {
                    acc(&mut grads, *x, avg_pool_backward(&g, *height, *width, *k));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    gl[[0, *target]] -= 1.0;
                    acc(&mut grads, *logits, gl * g[[0, 0]]);
                }
                Op::External { input, grad } => {
                    acc(&mut grads, *input, grad * g[[0, 0]]);
                }
            }
        }

        let mut out: Vec<(ParamId, Mat)> = self
            .loaded
            .iter()
            .map(|(&id, &v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Mat::zeros(self.value(v).raw_dim()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        ParamGrads { grads: out }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted row softmax; masked columns receive exactly zero weight.
/// A row with every column masked comes out all zero.
pub fn softmax_rows_masked(m: &Mat, key_mask: Option<&[bool]>) -> Mat {
    if let Some(mask) = key_mask {
        assert_eq!(mask.len(), m.ncols(), "mask length");
    }
    let keep = |j: usize| key_mask.is_none_or(|mask| mask[j]);
    let mut out = Mat::zeros(m.raw_dim());
    for (i, row) in m.outer_iter().enumerate() {
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / sum);
    }
    out
}

fn im2col3_forward(x: &Mat, height: usize, width: usize) -> Mat {
    let c = x.ncols();
    assert_eq!(x.nrows(), height * width, "im2col3 map size");
    let mut out = Mat::zeros((height * width, 9 * c));
    for r in 0..height {
        for col in 0..width {
            let row = r * width + col;
            for (k, (dr, dc)) in OFFSETS_3X3.iter().enumerate() {
                let (sr, sc) = (r as isize + dr, col as isize + dc);
                if sr < 0 || sc < 0 || sr >= height as isize || sc >= width as isize {
                    continue;
                }
                let src = sr as usize * width + sc as usize;
                out.slice_mut(s![row, k * c..(k + 1) * c])
                    .assign(&x.row(src));
            }
        }
    }
    out
}

fn im2col3_backward(g: &Mat, height: usize, width: usize, c: usize) -> Mat {
    let mut gx = Mat::zeros((height * width, c));
    for r in 0..height {
        for col in 0..width {
            let row = r * width + col;
            for (k, (dr, dc)) in OFFSETS_3X3.iter().enumerate() {
                let (sr, sc) = (r as isize + dr, col as isize + dc);
                if sr < 0 || sc < 0 || sr >= height as isize || sc >= width as isize {
                    continue;
                }
                let src = sr as usize * width + sc as usize;
                let mut dst = gx.row_mut(src);
                dst += &g.slice(s![row, k * c..(k + 1) * c]);
            }
        }
    }
    gx
}

const OFFSETS_3X3: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn avg_pool_forward(x: &Mat, height: usize, width: usize, k: usize) -> Mat {
    assert!(height.is_multiple_of(k) && width.is_multiple_of(k), "avg_pool divisibility");
    let (oh, ow) = (height / k, width / k);
    let c = x.ncols();
    let norm = 1.0 / (k * k) as f64;
    let mut out = Mat::zeros((oh * ow, c));
    for r in 0..height {
        for col in 0..width {
            let dst = (r / k) * ow + col / k;
            let mut o = out.row_mut(dst);
            o.scaled_add(norm, &x.row(r * width + col));
        }
    }
    out
}

fn avg_pool_backward(g: &Mat, height: usize, width: usize, k: usize) -> Mat {
    let ow = width / k;
    let norm = 1.0 / (k * k) as f64;
    let mut gx = Array2::zeros((height * width, g.ncols()));
    for r in 0..height {
        for col in 0..width {
            let src = (r / k) * ow + col / k;
            let mut o = gx.row_mut(r * width + col);
            o.scaled_add(norm, &g.row(src));
        }
    }
    gx
}
