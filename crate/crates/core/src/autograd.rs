//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are plain
//! two-dimensional arrays; images and feature maps are stored as
//! `(positions, channels)` matrices in raster order. Calling
//! [`Tape::backward`] walks the tape in reverse and returns gradients for
//! every node that was created from a gradient-carrying leaf.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Geometry of a two-dimensional transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvTransposeGeom {
    /// Returns `None` when the padding eats the whole output.
    pub fn new(
        (in_h, in_w): (usize, usize),
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Option<Self> {
        let span = |n: usize| ((n - 1) * stride + kernel + output_padding).checked_sub(2 * padding);
        let out_h = span(in_h)?;
        let out_w = span(in_w)?;
        if out_h == 0 || out_w == 0 || in_h == 0 || in_w == 0 {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            in_c,
            out_c,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Output position reached by input `i` through kernel tap `k`, along one axis.
    fn target(&self, i: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (i * self.stride + k).checked_sub(self.padding)?;
        (pos < limit).then_some(pos)
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (self.kernel * self.kernel * self.in_c, self.out_c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PatchGeom {
    h: usize,
    w: usize,
    c: usize,
    p: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    NormalizeCols {
        x: Var,
        col_sums: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MixSlots {
        yhat: Var,
        mask: Var,
    },
    Mse {
        x: Var,
        target: Array2<f64>,
    },
    SumAll(Var),
    Patchify(Var, PatchGeom),
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvTransposeGeom,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Sum that does not depend on the order of `values`: terms are added in
/// ascending order. Used wherever an output must be exactly equivariant
/// under permutations of the summed axis.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A value whose gradient is tracked.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: row must be 1×c");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: row must be 1×c");
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    fn softmax_rows_impl(&mut self, a: Var, causal: bool) -> Var {
        let mut value = self.value(a).clone();
        let mut scratch = Vec::with_capacity(value.ncols());
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let live = if causal { i + 1 } else { row.len() };
            let max = row
                .iter()
                .take(live)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            scratch.clear();
            for (j, x) in row.iter_mut().enumerate() {
                *x = if j < live { (*x - max).exp() } else { 0.0 };
                if j < live {
                    scratch.push(*x);
                }
            }
            let total = canonical_sum(&mut scratch);
            row.mapv_inplace(|x| x / total);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Softmax along each row, with max subtraction and an order-independent
    /// normalizer so that permuting columns permutes the output exactly.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_impl(a, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`; later columns are exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        assert_eq!(
            self.shape(a).0,
            self.shape(a).1,
            "causal softmax needs a square matrix"
        );
        self.softmax_rows_impl(a, true)
    }

    /// `(x + eps) / Σ_rows (x + eps)`, column by column.
    pub fn normalize_cols(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a) + eps;
        let col_sums: Vec<f64> = value.sum_axis(Axis(0)).to_vec();
        for (mut col, &total) in value.columns_mut().into_iter().zip(&col_sums) {
            col.mapv_inplace(|x| x / total);
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeCols { x: a, col_sums }, rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Each row of `a` repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        let (r, c) = src.dim();
        let mut value = Array2::zeros((r * n, c));
        for (i, row) in src.rows().into_iter().enumerate() {
            value
                .slice_mut(s![i * n..(i + 1) * n, ..])
                .assign(&row.broadcast((n, c)).expect("row broadcast"));
        }
        let rg = self.rg(a);
        self.push(value, Op::RepeatRows(a, n), rg)
    }

    /// `a` stacked `k` times vertically.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        let (r, c) = src.dim();
        let mut value = Array2::zeros((r * k, c));
        for i in 0..k {
            value.slice_mut(s![i * r..(i + 1) * r, ..]).assign(src);
        }
        let rg = self.rg(a);
        self.push(value, Op::TileRows(a, k), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count mismatch");
        let value = Array2::from_shape_vec((rows, cols), src.iter().copied().collect())
            .expect("reshape shape");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mixes per-slot predictions with per-position slot weights.
    ///
    /// `yhat` is `(K·N)×D` with slot-major rows, `mask` is `N×K`; the
    /// result is `N×D` with row `n = Σ_k mask[n,k] · yhat[k·N + n]`.
    pub fn mix_slots(&mut self, yhat: Var, mask: Var) -> Var {
        let (n, k) = self.shape(mask);
        let (rows, d) = self.shape(yhat);
        assert_eq!(rows, n * k, "mix_slots: yhat rows must equal K·N");
        let y = self.value(yhat);
        let m = self.value(mask);
        let mut value = Array2::zeros((n, d));
        for slot in 0..k {
            let block = y.slice(s![slot * n..(slot + 1) * n, ..]);
            for pos in 0..n {
                let w = m[[pos, slot]];
                value.row_mut(pos).scaled_add(w, &block.row(pos));
            }
        }
        let rg = self.rg(yhat) || self.rg(mask);
        self.push(value, Op::MixSlots { yhat, mask }, rg)
    }

    /// Mean of squared differences against a constant target, as a 1×1 node.
    pub fn mse(&mut self, a: Var, target: &Array2<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "mse: shape mismatch");
        let total: f64 = x
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Array2::from_elem((1, 1), total / x.len() as f64);
        let rg = self.rg(a);
        self.push(
            value,
            Op::Mse {
                x: a,
                target: target.clone(),
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Rearranges an `(h·w)×c` image into non-overlapping `p×p` patches:
    /// output row = patch in raster order, column = `(dy·p + dx)·c + channel`.
    pub fn patchify(&mut self, a: Var, (h, w): (usize, usize), p: usize) -> Var {
        let src = self.value(a);
        let c = src.ncols();
        assert_eq!(src.nrows(), h * w, "patchify: row count must be h·w");
        assert!(
            h % p == 0 && w % p == 0,
            "patchify: size not divisible by patch"
        );
        let geom = PatchGeom { h, w, c, p };
        let (gh, gw) = (h / p, w / p);
        let mut value = Array2::zeros((gh * gw, p * p * c));
        for py in 0..gh {
            for px in 0..gw {
                let mut dst = value.row_mut(py * gw + px);
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = (py * p + dy) * w + px * p + dx;
                        let off = (dy * p + dx) * c;
                        dst.slice_mut(s![off..off + c]).assign(&src.row(pix));
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::Patchify(a, geom), rg)
    }

    /// Transposed convolution of an `(in_h·in_w)×in_c` map with a
    /// `(k·k·in_c)×out_c` kernel (tap-major blocks of `in_c` rows). No bias.
    pub fn conv_transpose(&mut self, x: Var, w: Var, geom: ConvTransposeGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(
            xv.dim(),
            (geom.in_h * geom.in_w, geom.in_c),
            "conv_transpose: input shape"
        );
        assert_eq!(
            wv.dim(),
            geom.weight_shape(),
            "conv_transpose: kernel shape"
        );
        let mut value = Array2::zeros((geom.out_h * geom.out_w, geom.out_c));
        for ky in 0..geom.kernel {
            for kx in 0..geom.kernel {
                let tap = ky * geom.kernel + kx;
                let block = wv.slice(s![tap * geom.in_c..(tap + 1) * geom.in_c, ..]);
                let contrib = xv.dot(&block);
                let contrib = contrib.as_slice().expect("fresh product is contiguous");
                let out = value.as_slice_mut().expect("fresh array is contiguous");
                let oc = geom.out_c;
                for iy in 0..geom.in_h {
                    let Some(oy) = geom.target(iy, ky, geom.out_h) else {
                        continue;
                    };
                    for ix in 0..geom.in_w {
                        let Some(ox) = geom.target(ix, kx, geom.out_w) else {
                            continue;
                        };
                        let o = (oy * geom.out_w + ox) * oc;
                        let i = (iy * geom.in_w + ix) * oc;
                        for (d, v) in out[o..o + oc].iter_mut().zip(&contrib[i..i + oc]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::ConvTranspose { x, w, geom }, rg)
    }

    /// Gradients of the 1×1 node `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(standard(g)),
        }
    }

    fn backprop(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            &Op::MatMulNT(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.dot(self.value(b)));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.t().dot(self.value(a)));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.t().to_owned()),
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, -g);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g * self.value(b));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g * self.value(a));
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.rg(row) {
                    self.accumulate(grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::MulRow(a, row) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g * self.value(row));
                }
                if self.rg(row) {
                    let prod = g * self.value(a);
                    self.accumulate(grads, row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::Scale(a, c) => self.accumulate(grads, a, g * c),
            &Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y, |d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                self.accumulate(grads, a, d);
            }
            &Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(y, |d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, a, d);
            }
            &Op::Exp(a) => self.accumulate(grads, a, g * y),
            &Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                self.accumulate(grads, a, d);
            }
            Op::NormalizeCols { x, col_sums } => {
                let mut d = g.clone();
                for ((mut dcol, ycol), &total) in
                    d.columns_mut().into_iter().zip(y.columns()).zip(col_sums)
                {
                    let dot = dcol.dot(&ycol);
                    dcol.mapv_inplace(|v| (v - dot) / total);
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let d_cols = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), &inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std)
                {
                    let mean_g = drow.sum() / d_cols;
                    let mean_gy = drow.dot(&yrow) / d_cols;
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = inv * (*dv - mean_g - yv * mean_gy));
                }
                self.accumulate(grads, *x, d);
            }
            &Op::RepeatRows(a, n) => {
                let (r, c) = self.shape(a);
                let mut d = Array2::zeros((r, c));
                for i in 0..r {
                    d.row_mut(i)
                        .assign(&g.slice(s![i * n..(i + 1) * n, ..]).sum_axis(Axis(0)));
                }
                self.accumulate(grads, a, d);
            }
            &Op::TileRows(a, k) => {
                let (r, c) = self.shape(a);
                let mut d = Array2::zeros((r, c));
                for i in 0..k {
                    d += &g.slice(s![i * r..(i + 1) * r, ..]);
                }
                self.accumulate(grads, a, d);
            }
            &Op::Reshape(a) => {
                let d = Array2::from_shape_vec(self.shape(a), g.iter().copied().collect())
                    .expect("reshape back");
                self.accumulate(grads, a, d);
            }
            &Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(a));
                d.slice_mut(s![.., start..start + g.ncols()]).assign(g);
                self.accumulate(grads, a, d);
            }
            &Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.shape(a));
                d.slice_mut(s![start..start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            &Op::MixSlots { yhat, mask } => {
                let (n, k) = self.shape(mask);
                let yv = self.value(yhat);
                let mv = self.value(mask);
                if self.rg(yhat) {
                    let mut d = Array2::zeros(yv.dim());
                    for slot in 0..k {
                        for pos in 0..n {
                            d.row_mut(slot * n + pos)
                                .scaled_add(mv[[pos, slot]], &g.row(pos));
                        }
                    }
                    self.accumulate(grads, yhat, d);
                }
                if self.rg(mask) {
                    let mut d = Array2::zeros((n, k));
                    for slot in 0..k {
                        for pos in 0..n {
                            d[[pos, slot]] = yv.row(slot * n + pos).dot(&g.row(pos));
                        }
                    }
                    self.accumulate(grads, mask, d);
                }
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g[[0, 0]] / xv.len() as f64;
                self.accumulate(grads, *x, (xv - target) * scale);
            }
            &Op::SumAll(a) => {
                let d = Array2::from_elem(self.shape(a), g[[0, 0]]);
                self.accumulate(grads, a, d);
            }
            &Op::Patchify(a, PatchGeom { h, w, c, p }) => {
                let gw = w / p;
                let mut d = Array2::zeros((h * w, c));
                for (patch, grow) in g.rows().into_iter().enumerate() {
                    let (py, px) = (patch / gw, patch % gw);
                    for dy in 0..p {
                        for dx in 0..p {
                            let pix = (py * p + dy) * w + px * p + dx;
                            let off = (dy * p + dx) * c;
                            d.row_mut(pix).assign(&grow.slice(s![off..off + c]));
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::ConvTranspose { x, w, geom } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let mut dx = Array2::zeros(xv.dim());
                let mut dw = Array2::zeros(wv.dim());
                let mut gathered = Array2::zeros((geom.in_h * geom.in_w, geom.out_c));
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        let tap = ky * geom.kernel + kx;
                        gathered.fill(0.0);
                        {
                            let dst = gathered.as_slice_mut().expect("fresh array is contiguous");
                            let oc = geom.out_c;
                            for iy in 0..geom.in_h {
                                let Some(oy) = geom.target(iy, ky, geom.out_h) else {
                                    continue;
                                };
                                for ix in 0..geom.in_w {
                                    let Some(ox) = geom.target(ix, kx, geom.out_w) else {
                                        continue;
                                    };
                                    let i = (iy * geom.in_w + ix) * oc;
                                    for (c, d) in dst[i..i + oc].iter_mut().enumerate() {
                                        *d = g[[oy * geom.out_w + ox, c]];
                                    }
                                }
                            }
                        }
                        let rows = s![tap * geom.in_c..(tap + 1) * geom.in_c, ..];
                        if self.rg(x) {
                            dx += &gathered.dot(&wv.slice(rows).t());
                        }
                        if self.rg(w) {
                            dw.slice_mut(rows).assign(&xv.t().dot(&gathered));
                        }
                    }
                }
                if self.rg(x) {
                    self.accumulate(grads, x, dx);
                }
                if self.rg(w) {
                    self.accumulate(grads, w, dw);
                }
            }
        }
    }
}
