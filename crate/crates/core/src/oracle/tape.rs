//! A small reverse-mode tape over binary64 matrices.
//!
//! Each node stores its value; `backward` walks the nodes in reverse and
//! applies the primitive backward rules from [`super::ops`].

use super::ops::{self, Mat};

pub type Var = usize;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRowBias {
        x: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MulConst {
        x: Var,
        k: Vec<f64>,
    },
    Relu(Var),
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        eps: f64,
        out: ops::LayerNormOut,
    },
    Softmax {
        x: Var,
        limits: Vec<usize>,
    },
    LogSoftmax(Var),
    SmoothedNll {
        logq: Var,
        grad: Mat,
    },
    Block {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Mat,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v].value
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = ops::matmul(self.value(a), ta, self.value(b), tb);
        self.push(Op::MatMul { a, b, ta, tb }, v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols));
        let v = Mat::new(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
        );
        self.push(Op::Add(a, b), v)
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, bias) = (self.value(x), self.value(b));
        assert_eq!(bias.data.len(), m.cols);
        let v = Mat::new(
            m.rows,
            m.cols,
            m.data
                .iter()
                .enumerate()
                .map(|(i, p)| p + bias.data[i % m.cols])
                .collect(),
        );
        self.push(Op::AddRowBias { x, b }, v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let m = self.value(x);
        let v = Mat::new(m.rows, m.cols, m.data.iter().map(|p| p * c).collect());
        self.push(Op::Scale { x, c }, v)
    }

    /// Element-wise product with a constant (dropout multipliers).
    pub fn mul_const(&mut self, x: Var, k: Vec<f64>) -> Var {
        let m = self.value(x);
        let v = Mat::new(
            m.rows,
            m.cols,
            m.data.iter().zip(&k).map(|(p, q)| p * q).collect(),
        );
        self.push(Op::MulConst { x, k }, v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let v = Mat::new(m.rows, m.cols, m.data.iter().map(|p| p.max(0.0)).collect());
        self.push(Op::Relu(x), v)
    }

    pub fn layernorm(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Var {
        let out = ops::layernorm(self.value(x), &self.value(w).data, &self.value(b).data, eps);
        let y = out.y.clone();
        self.push(Op::LayerNorm { x, w, b, eps, out }, y)
    }

    pub fn softmax(&mut self, x: Var, limits: Vec<usize>) -> Var {
        let v = ops::softmax(self.value(x), &limits);
        self.push(Op::Softmax { x, limits }, v)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = ops::log_softmax(self.value(x));
        self.push(Op::LogSoftmax(x), v)
    }

    /// Scalar `1 x 1` smoothed negative log-likelihood.
    pub fn smoothed_nll(
        &mut self,
        logq: Var,
        targets: &[usize],
        alpha: f64,
        pad: Option<usize>,
    ) -> Var {
        let (loss, grad) = ops::smoothed_nll(self.value(logq), targets, alpha, pad);
        self.push(Op::SmoothedNll { logq, grad }, Mat::new(1, 1, vec![loss]))
    }

    /// Sub-matrix `[r0, r0 + rows) x [c0, c0 + cols)`.
    pub fn block(&mut self, x: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let m = self.value(x);
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                v.data[r * cols + c] = m.at(r0 + r, c0 + c);
            }
        }
        self.push(Op::Block { x, r0, c0 }, v)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in &parts {
            let m = self.value(p);
            for r in 0..rows {
                for c in 0..m.cols {
                    v.data[r * cols + c0 + c] = m.at(r, c);
                }
            }
            c0 += m.cols;
        }
        self.push(Op::ConcatCols(parts), v)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data.clone())
            .collect();
        let v = Mat::new(data.len() / cols, cols, data);
        self.push(Op::ConcatRows(parts), v)
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let data: Vec<f64> = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        let v = Mat::new(idx.len(), t.cols, data);
        self.push(Op::GatherRows { table, idx }, v)
    }

    /// Propagates `seed` (the gradient of `out`) back to every node and
    /// returns all node gradients.
    pub fn backward(&self, out: Var, seed: Mat) -> Vec<Option<Mat>> {
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.propagate(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        g
    }

    fn propagate(&self, i: usize, gi: &Mat, g: &mut [Option<Mat>]) {
        let acc = |g: &mut [Option<Mat>], v: Var, d: Mat| match &mut g[v] {
            Some(m) => m.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b),
            slot => *slot = Some(d),
        };
        let val = |v: Var| &self.nodes[v].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                // C = op(A) op(B): dop(A) = dC op(B)ᵀ, dop(B) = op(A)ᵀ dC.
                let da = if ta {
                    ops::matmul(val(b), tb, gi, true)
                } else {
                    ops::matmul(gi, false, val(b), !tb)
                };
                let db = if tb {
                    ops::matmul(gi, true, val(a), ta)
                } else {
                    ops::matmul(val(a), !ta, gi, false)
                };
                acc(g, a, da);
                acc(g, b, db);
            }
            &Op::Add(a, b) => {
                acc(g, a, gi.clone());
                acc(g, b, gi.clone());
            }
            &Op::AddRowBias { x, b } => {
                acc(g, x, gi.clone());
                let s = ops::column_sums(gi);
                let shape = val(b);
                acc(g, b, Mat::new(shape.rows, shape.cols, s));
            }
            &Op::Scale { x, c } => acc(
                g,
                x,
                Mat::new(gi.rows, gi.cols, gi.data.iter().map(|v| v * c).collect()),
            ),
            Op::MulConst { x, k } => acc(
                g,
                *x,
                Mat::new(
                    gi.rows,
                    gi.cols,
                    gi.data.iter().zip(k).map(|(v, f)| v * f).collect(),
                ),
            ),
            &Op::Relu(x) => {
                let d = gi
                    .data
                    .iter()
                    .zip(&val(x).data)
                    .map(|(v, p)| if *p > 0.0 { *v } else { 0.0 })
                    .collect();
                acc(g, x, Mat::new(gi.rows, gi.cols, d));
            }
            Op::LayerNorm { x, w, b, eps, out } => {
                let (dx, dw, db) = ops::layernorm_backward(gi, val(*x), &val(*w).data, out, *eps);
                let (ws, bs) = (val(*w), val(*b));
                acc(g, *x, dx);
                acc(g, *w, Mat::new(ws.rows, ws.cols, dw));
                acc(g, *b, Mat::new(bs.rows, bs.cols, db));
            }
            Op::Softmax { x, limits } => acc(
                g,
                *x,
                ops::softmax_backward(gi, &self.nodes[i].value, limits),
            ),
            &Op::LogSoftmax(x) => acc(g, x, ops::log_softmax_backward(gi, &self.nodes[i].value)),
            Op::SmoothedNll { logq, grad } => {
                let s = gi.data[0];
                acc(
                    g,
                    *logq,
                    Mat::new(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().map(|v| v * s).collect(),
                    ),
                );
            }
            &Op::Block { x, r0, c0 } => {
                let src = val(x);
                let mut d = Mat::zeros(src.rows, src.cols);
                for r in 0..gi.rows {
                    for c in 0..gi.cols {
                        d.data[(r0 + r) * src.cols + c0 + c] = gi.at(r, c);
                    }
                }
                acc(g, x, d);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = val(p).cols;
                    let mut d = Mat::zeros(gi.rows, cols);
                    for r in 0..gi.rows {
                        for c in 0..cols {
                            d.data[r * cols + c] = gi.at(r, c0 + c);
                        }
                    }
                    acc(g, p, d);
                    c0 += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = val(p).rows;
                    let d = gi.data[r0 * gi.cols..(r0 + rows) * gi.cols].to_vec();
                    acc(g, p, Mat::new(rows, gi.cols, d));
                    r0 += rows;
                }
            }
            Op::GatherRows { table, idx } => {
                let t = val(*table);
                let mut d = Mat::zeros(t.rows, t.cols);
                for (r, &row) in idx.iter().enumerate() {
                    for c in 0..t.cols {
                        d.data[row * t.cols + c] += gi.at(r, c);
                    }
                }
                acc(g, *table, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradients_all_transposes() {
        let a0 = Mat::new(2, 3, vec![0.1, -0.4, 0.7, 1.2, 0.3, -0.5]);
        let b0 = Mat::new(3, 2, vec![0.9, -0.2, 0.4, 0.6, -1.1, 0.8]);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_in = if ta { a0.transpose() } else { a0.clone() };
            let b_in = if tb { b0.transpose() } else { b0.clone() };
            let mut t = Tape::new();
            let a = t.leaf(a_in.clone());
            let b = t.leaf(b_in.clone());
            let c = t.matmul(a, ta, b, tb);
            let seed = Mat::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
            let g = t.backward(c, seed.clone());
            // Compare against the directional derivative along each input.
            let f = |a_in: &Mat, b_in: &Mat| -> f64 {
                let c = ops::matmul(a_in, ta, b_in, tb);
                c.data.iter().zip(&seed.data).map(|(x, y)| x * y).sum()
            };
            let ga = g[a].as_ref().unwrap();
            for i in 0..6 {
                let mut p = a_in.clone();
                p.data[i] += 1.0;
                assert!((f(&p, &b_in) - f(&a_in, &b_in) - ga.data[i]).abs() < 1e-12);
            }
            let gb = g[b].as_ref().unwrap();
            for i in 0..6 {
                let mut p = b_in.clone();
                p.data[i] += 1.0;
                assert!((f(&a_in, &p) - f(&a_in, &b_in) - gb.data[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::new(1, 2, vec![1.0, 2.0]));
        let y = t.add(x, x);
        let g = t.backward(y, Mat::new(1, 2, vec![1.0, 1.0]));
        assert_eq!(g[x].as_ref().unwrap().data, vec![2.0, 2.0]);
    }
}
