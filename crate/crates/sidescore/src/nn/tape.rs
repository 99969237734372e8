//! A small reverse-mode autodiff tape over `ndarray::Array2<f64>`.
//!
//! Nodes live in an arena owned by [`Tape`]; [`Var`] is an index into it.
//! Scalars are 1x1 matrices. Every operation is evaluated eagerly and
//! sequentially, so two runs over identical inputs produce bitwise-identical
//! values and gradients.

use ndarray::{Array2, Axis};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub struct ConvConf {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
}

impl ConvConf {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    /// rhs is a 1 x d row vector broadcast over the rows of lhs
    AddRow(usize, usize),
    AddScalar(usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Div(usize, usize),
    Recip(usize),
    MatMul(usize, usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    Sigmoid(usize),
    Relu(usize),
    /// max(x, c); gradient passes only where x > c
    MaxConst(usize, f64),
    SumAll(usize),
    MeanAll(usize),
    /// n x d -> n x 1
    SumAxis1(usize),
    /// n x d -> 1 x d
    MeanAxis0(usize),
    GatherRows(usize, Vec<usize>),
    /// n x K -> n x 1, picking one column per row
    PickPerRow(usize, Vec<usize>),
    LogSoftmax(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        conf: ConvConf,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// The autodiff arena. Build a fresh tape per training step.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node {
            value,
            grad,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].grad
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn binary_needs(&self, a: Var, b: Var) -> bool {
        self.needs(a.0) || self.needs(b.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.binary_needs(a, b);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    /// `a` is n x d, `row` is 1 x d; adds the row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let ng = self.binary_needs(a, row);
        self.push(v, Op::AddRow(a.0, row.0), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a.0);
        self.push(v, Op::AddScalar(a.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.binary_needs(a, b);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.needs(a.0);
        self.push(v, Op::Neg(a.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.binary_needs(a, b);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a.0);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.binary_needs(a, b);
        self.push(v, Op::Div(a.0, b.0), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let ng = self.needs(a.0);
        self.push(v, Op::Recip(a.0), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.binary_needs(a, b);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let ng = self.needs(a.0);
        self.push(v, Op::Exp(a.0), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.needs(a.0);
        self.push(v, Op::Ln(a.0), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.needs(a.0);
        self.push(v, Op::Sqrt(a.0), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let ng = self.needs(a.0);
        self.push(v, Op::Square(a.0), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        let ng = self.needs(a.0);
        self.push(v, Op::Softplus(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let ng = self.needs(a.0);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a.0);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        let ng = self.needs(a.0);
        self.push(v, Op::MaxConst(a.0, c), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let ng = self.needs(a.0);
        self.push(v, Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        let ng = self.needs(a.0);
        self.push(v, Op::MeanAll(a.0), ng)
    }

    /// Row sums: n x d -> n x 1.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum_axis(Axis(1));
        let n = s.len();
        let v = s.into_shape_with_order((n, 1)).expect("row sums reshape");
        let ng = self.needs(a.0);
        self.push(v, Op::SumAxis1(a.0), ng)
    }

    /// Column means: n x d -> 1 x d.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.nrows() as f64;
        let s = self.nodes[a.0].value.sum_axis(Axis(0)).mapv(|x| x / n);
        let d = s.len();
        let v = s
            .into_shape_with_order((1, d))
            .expect("column means reshape");
        let ng = self.needs(a.0);
        self.push(v, Op::MeanAxis0(a.0), ng)
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let d = src.ncols();
        let mut v = Array2::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        let ng = self.needs(a.0);
        self.push(v, Op::GatherRows(a.0, idx.to_vec()), ng)
    }

    /// Pick one entry per row: n x K -> n x 1.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        debug_assert_eq!(src.nrows(), idx.len());
        let mut v = Array2::zeros((idx.len(), 1));
        for (r, &c) in idx.iter().enumerate() {
            v[(r, 0)] = src[(r, c)];
        }
        let ng = self.needs(a.0);
        self.push(v, Op::PickPerRow(a.0, idx.to_vec()), ng)
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.needs(a.0);
        self.push(v, Op::LogSoftmax(a.0), ng)
    }

    /// 2-D convolution over rows holding channel-major `[c][h][w]` images.
    /// `weight` is (k*k*in_ch) x out_ch, `bias` is 1 x out_ch; the output
    /// rows hold `[oc][h_out][w_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, conf: &ConvConf) -> Var {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        debug_assert_eq!(x.ncols(), conf.in_ch * conf.h_in * conf.w_in);
        debug_assert_eq!(w.nrows(), conf.patch_len());
        debug_assert_eq!(w.ncols(), conf.out_ch);
        let (ho, wo) = (conf.h_out(), conf.w_out());
        let n = x.nrows();
        let mut out = Array2::zeros((n, conf.out_ch * ho * wo));
        let mut col = Array2::zeros((ho * wo, conf.patch_len()));
        for img in 0..n {
            im2col(x.row(img), conf, &mut col);
            let y = col.dot(w); // positions x out_ch
            for oc in 0..conf.out_ch {
                let bias_v = b[(0, oc)];
                for pos in 0..ho * wo {
                    out[(img, oc * ho * wo + pos)] = y[(pos, oc)] + bias_v;
                }
            }
        }
        let ng = self.needs(input.0) || self.needs(weight.0) || self.needs(bias.0);
        self.push(
            out,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                conf: conf.clone(),
            },
            ng,
        )
    }

    /// Reverse pass from a 1x1 node; accumulates gradients into every
    /// reachable node with `needs_grad`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward needs a scalar"
        );
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[(0, 0)] = 1.0;

        for i in (0..=loss.0).rev() {
            // nothing upstream requires this node, or no gradient reached it
            if !self.nodes[i].needs_grad || self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = self.nodes[i].grad.clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                &Op::AddRow(a, row) => {
                    self.accumulate(a, &g);
                    let col_sum = g.sum_axis(Axis(0));
                    let d = col_sum.len();
                    let gr = col_sum
                        .into_shape_with_order((1, d))
                        .expect("row grad reshape");
                    self.accumulate(row, &gr);
                }
                &Op::AddScalar(a) => self.accumulate(a, &g),
                &Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let gb = g.mapv(|x| -x);
                    self.accumulate(b, &gb);
                }
                &Op::Neg(a) => {
                    let ga = g.mapv(|x| -x);
                    self.accumulate(a, &ga);
                }
                &Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                &Op::Scale(a, c) => {
                    let ga = g.mapv(|x| x * c);
                    self.accumulate(a, &ga);
                }
                &Op::Div(a, b) => {
                    let vb = &self.nodes[b].value;
                    let ga = &g / vb;
                    let va = &self.nodes[a].value;
                    let gb = -(&g * va) / (vb * vb);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                &Op::Recip(a) => {
                    let va = &self.nodes[a].value;
                    let ga = -(&g) / (va * va);
                    self.accumulate(a, &ga);
                }
                &Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                &Op::Exp(a) => {
                    let ga = &g * &self.nodes[i].value;
                    self.accumulate(a, &ga);
                }
                &Op::Ln(a) => {
                    let ga = &g / &self.nodes[a].value;
                    self.accumulate(a, &ga);
                }
                &Op::Sqrt(a) => {
                    let ga = &g / &self.nodes[i].value.mapv(|y| 2.0 * y);
                    self.accumulate(a, &ga);
                }
                &Op::Square(a) => {
                    let ga = &g * &self.nodes[a].value.mapv(|x| 2.0 * x);
                    self.accumulate(a, &ga);
                }
                &Op::Softplus(a) => {
                    let ga = &g * &self.nodes[a].value.mapv(sigmoid);
                    self.accumulate(a, &ga);
                }
                &Op::Sigmoid(a) => {
                    let ga = &g * &self.nodes[i].value.mapv(|s| s * (1.0 - s));
                    self.accumulate(a, &ga);
                }
                &Op::Relu(a) => {
                    let ga = &g
                        * &self.nodes[a]
                            .value
                            .mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, &ga);
                }
                &Op::MaxConst(a, c) => {
                    let ga = &g * &self.nodes[a].value.mapv(|x| if x > c { 1.0 } else { 0.0 });
                    self.accumulate(a, &ga);
                }
                &Op::SumAll(a) => {
                    let s = g[(0, 0)];
                    let ga = Array2::from_elem(self.nodes[a].value.raw_dim(), s);
                    self.accumulate(a, &ga);
                }
                &Op::MeanAll(a) => {
                    let n = self.nodes[a].value.len() as f64;
                    let s = g[(0, 0)] / n;
                    let ga = Array2::from_elem(self.nodes[a].value.raw_dim(), s);
                    self.accumulate(a, &ga);
                }
                &Op::SumAxis1(a) => {
                    let dim = self.nodes[a].value.raw_dim();
                    let mut ga = Array2::zeros(dim);
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        row.fill(g[(r, 0)]);
                    }
                    self.accumulate(a, &ga);
                }
                &Op::MeanAxis0(a) => {
                    let dim = self.nodes[a].value.raw_dim();
                    let n = dim[0] as f64;
                    let mut ga = Array2::zeros(dim);
                    for mut row in ga.rows_mut() {
                        for (c, x) in row.iter_mut().enumerate() {
                            *x = g[(0, c)] / n;
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    for (r, &i_src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i_src);
                        dst += &g.row(r);
                    }
                    self.accumulate(a, &ga);
                }
                Op::PickPerRow(a, idx) => {
                    let a = *a;
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    for (r, &c) in idx.iter().enumerate() {
                        ga[(r, c)] += g[(r, 0)];
                    }
                    self.accumulate(a, &ga);
                }
                &Op::LogSoftmax(a) => {
                    // dx = g - softmax * rowsum(g)
                    let y = &self.nodes[i].value;
                    let mut ga = g.clone();
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let gsum: f64 = g.row(r).sum();
                        for (c, x) in row.iter_mut().enumerate() {
                            *x -= y[(r, c)].exp() * gsum;
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    conf,
                } => {
                    let (input, weight, bias, conf) = (*input, *weight, *bias, conf.clone());
                    let (ho, wo) = (conf.h_out(), conf.w_out());
                    let n = self.nodes[input].value.nrows();
                    let mut g_in = Array2::zeros(self.nodes[input].value.raw_dim());
                    let mut g_w = Array2::zeros(self.nodes[weight].value.raw_dim());
                    let mut g_b = Array2::zeros(self.nodes[bias].value.raw_dim());
                    let w_t = self.nodes[weight].value.t().to_owned();
                    let mut col = Array2::zeros((ho * wo, conf.patch_len()));
                    for img in 0..n {
                        // d_out for this image as positions x out_ch
                        let mut dy = Array2::zeros((ho * wo, conf.out_ch));
                        for oc in 0..conf.out_ch {
                            for pos in 0..ho * wo {
                                dy[(pos, oc)] = g[(img, oc * ho * wo + pos)];
                            }
                        }
                        let src_row = self.nodes[input].value.row(img).to_owned();
                        im2col(src_row.view(), &conf, &mut col);
                        g_w += &col.t().dot(&dy);
                        for oc in 0..conf.out_ch {
                            g_b[(0, oc)] += dy.column(oc).sum();
                        }
                        let dcol = dy.dot(&w_t); // positions x patch_len
                        col2im_accumulate(&dcol, &conf, &mut g_in, img);
                    }
                    self.accumulate(input, &g_in);
                    self.accumulate(weight, &g_w);
                    self.accumulate(bias, &g_b);
                }
            }
        }
    }

    fn accumulate(&mut self, target: usize, g: &Array2<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        self.nodes[target].grad += g;
    }
}

/// Unpack one channel-major image row into a (positions x patch) matrix.
fn im2col(row: ndarray::ArrayView1<f64>, conf: &ConvConf, col: &mut Array2<f64>) {
    let (ho, wo) = (conf.h_out(), conf.w_out());
    let (h, w, k) = (conf.h_in, conf.w_in, conf.kernel);
    for oy in 0..ho {
        for ox in 0..wo {
            let pos = oy * wo + ox;
            let mut pc = 0usize;
            for c in 0..conf.in_ch {
                for ky in 0..k {
                    let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                    for kx in 0..k {
                        let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            row[c * h * w + iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        col[(pos, pc)] = v;
                        pc += 1;
                    }
                }
            }
        }
    }
}

/// Scatter patch gradients back onto an image row (adjoint of `im2col`).
fn col2im_accumulate(dcol: &Array2<f64>, conf: &ConvConf, g_in: &mut Array2<f64>, img: usize) {
    let (ho, wo) = (conf.h_out(), conf.w_out());
    let (h, w, k) = (conf.h_in, conf.w_in, conf.kernel);
    for oy in 0..ho {
        for ox in 0..wo {
            let pos = oy * wo + ox;
            let mut pc = 0usize;
            for c in 0..conf.in_ch {
                for ky in 0..k {
                    let iy = (oy * conf.stride + ky) as isize - conf.pad as isize;
                    for kx in 0..k {
                        let ix = (ox * conf.stride + kx) as isize - conf.pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            g_in[(img, c * h * w + iy as usize * w + ix as usize)] +=
                                dcol[(pos, pc)];
                        }
                        pc += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradient;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_forward_and_grad() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.param(array![[5.0], [6.0]]);
        let y = t.matmul(a, b);
        assert_eq!(t.value(y), &array![[17.0], [39.0]]);
        let s = t.sum_all(y);
        t.backward(s);
        assert_eq!(t.grad(a), &array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(t.grad(b), &array![[4.0], [6.0]]);
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Array2<f64> = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.2..2.0));
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let e = t.exp(v);
            let l = t.ln(v);
            let sp = t.softplus(v);
            let sg = t.sigmoid(e);
            let m = t.mul(sp, sg);
            let q = t.div(m, l);
            let s2 = t.square(q);
            let r = t.sqrt(s2);
            let out = t.mean_all(r);
            (t, v, out)
        };
        check_gradient(
            &x0,
            1e-5,
            1e-6,
            |x| {
                let (t, _, out) = f(x);
                t.scalar_value(out)
            },
            |x| {
                let (mut t, v, out) = f(x);
                t.backward(out);
                t.grad(v).clone()
            },
        );
    }

    #[test]
    fn reductions_and_gather_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Array2<f64> = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let idx = vec![0usize, 2, 2, 4];
        let build = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let g = t.gather_rows(v, &idx);
            let r = t.relu(g);
            let s1 = t.sum_axis1(r);
            let m0 = t.mean_axis0(s1);
            let soft = t.log_softmax(v);
            let picked = t.pick_per_row(soft, &[0, 1, 2, 0, 1]);
            let ps = t.mean_all(picked);
            let both = t.add(m0, ps);
            let out = t.sum_all(both);
            (t, v, out)
        };
        check_gradient(
            &x0,
            1e-5,
            1e-6,
            |x| {
                let (t, _, out) = build(x);
                t.scalar_value(out)
            },
            |x| {
                let (mut t, v, out) = build(x);
                t.backward(out);
                t.grad(v).clone()
            },
        );
    }

    #[test]
    fn conv2d_forward_known_value() {
        // 1 channel, 3x3 image, 2x2 kernel of ones, stride 1, no padding
        let conf = ConvConf {
            in_ch: 1,
            out_ch: 1,
            kernel: 2,
            stride: 1,
            pad: 0,
            h_in: 3,
            w_in: 3,
        };
        let mut t = Tape::new();
        let img =
            t.param(Array2::from_shape_vec((1, 9), (1..=9).map(f64::from).collect()).unwrap());
        let w = t.param(Array2::ones((4, 1)));
        let b = t.param(Array2::zeros((1, 1)));
        let y = t.conv2d(img, w, b, &conf);
        // windows: [1 2 4 5]=12, [2 3 5 6]=16, [4 5 7 8]=24, [5 6 8 9]=28
        assert_eq!(t.value(y), &array![[12.0, 16.0, 24.0, 28.0]]);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let conf = ConvConf {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
            h_in: 6,
            w_in: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0: Array2<f64> = Array2::from_shape_fn((2, 2 * 36), |_| rng.gen_range(-1.0..1.0));
        let w0: Array2<f64> =
            Array2::from_shape_fn((conf.patch_len(), 3), |_| rng.gen_range(-0.5..0.5));
        let b0: Array2<f64> = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-0.5..0.5));

        let run = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.param(w.clone());
            let bv = t.param(b.clone());
            let y = t.conv2d(xv, wv, bv, &conf);
            let r = t.relu(y);
            let out = t.mean_all(r);
            (t, xv, wv, bv, out)
        };

        // gradient with respect to the input
        check_gradient(
            &x0,
            1e-5,
            1e-6,
            |x| {
                let (t, _, _, _, out) = run(x, &w0, &b0);
                t.scalar_value(out)
            },
            |x| {
                let (mut t, xv, _, _, out) = run(x, &w0, &b0);
                t.backward(out);
                t.grad(xv).clone()
            },
        );
        // with respect to the weights and bias
        check_gradient(
            &w0,
            1e-5,
            1e-6,
            |w| {
                let (t, _, _, _, out) = run(&x0, w, &b0);
                t.scalar_value(out)
            },
            |w| {
                let (mut t, _, wv, _, out) = run(&x0, w, &b0);
                t.backward(out);
                t.grad(wv).clone()
            },
        );
        check_gradient(
            &b0,
            1e-5,
            1e-6,
            |b| {
                let (t, _, _, _, out) = run(&x0, &w0, b);
                t.scalar_value(out)
            },
            |b| {
                let (mut t, _, _, bv, out) = run(&x0, &w0, b);
                t.backward(out);
                t.grad(bv).clone()
            },
        );
    }

    #[test]
    fn constants_accumulate_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[2.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let y = t.mul(c, p);
        let s = t.sum_all(y);
        t.backward(s);
        assert_eq!(t.grad(p), &array![[2.0, 2.0]]);
        assert!(t.grad(c).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Array2<f64> = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let run = || {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let e = t.softplus(v);
            let s = t.log_softmax(e);
            let out = t.mean_all(s);
            t.backward(out);
            (t.scalar_value(out), t.grad(v).clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }
}
