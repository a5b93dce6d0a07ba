//! Unfused binary64 primitives with textbook backward passes.
//!
//! Everything here is row-major `rows x cols`. Nothing calls into the fused
//! kernels.

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.at(r, c);
            }
        }
        t
    }
}

/// `op(a) · op(b)` with the triple loop.
pub fn matmul(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let a = if ta { a.transpose() } else { a.clone() };
    let b = if tb { b.transpose() } else { b.clone() };
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            c.data[i * b.cols + j] = s;
        }
    }
    c
}

/// Row statistics by two passes: mean first, then the mean squared
/// deviation.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, var)
}

pub struct LayerNormOut {
    pub y: Mat,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn layernorm(x: &Mat, w: &[f64], b: &[f64], eps: f64) -> LayerNormOut {
    let mut y = Mat::zeros(x.rows, x.cols);
    let (mut means, mut vars) = (Vec::new(), Vec::new());
    for r in 0..x.rows {
        let (mean, var) = mean_var(x.row(r));
        let sd = (var + eps).sqrt();
        for c in 0..x.cols {
            y.data[r * x.cols + c] = w[c] * (x.at(r, c) - mean) / sd + b[c];
        }
        means.push(mean);
        vars.push(var);
    }
    LayerNormOut {
        y,
        mean: means,
        var: vars,
    }
}

/// Chain rule through `xhat = (x - mean) / sqrt(var + eps)`, with mean and
/// variance as intermediate nodes. Returns `(dx, dw, db)`.
pub fn layernorm_backward(
    dy: &Mat,
    x: &Mat,
    w: &[f64],
    out: &LayerNormOut,
    eps: f64,
) -> (Mat, Vec<f64>, Vec<f64>) {
    let m = x.cols as f64;
    let mut dx = Mat::zeros(x.rows, x.cols);
    let mut dw = vec![0.0; x.cols];
    let mut db = vec![0.0; x.cols];
    for r in 0..x.rows {
        let (mean, var) = (out.mean[r], out.var[r]);
        let sd = (var + eps).sqrt();
        let xc: Vec<f64> = x.row(r).iter().map(|v| v - mean).collect();
        let dxhat: Vec<f64> = (0..x.cols).map(|c| dy.at(r, c) * w[c]).collect();
        let dvar: f64 =
            (0..x.cols).map(|c| dxhat[c] * xc[c]).sum::<f64>() * -0.5 * (var + eps).powf(-1.5);
        let dmean: f64 = dxhat.iter().map(|g| -g / sd).sum::<f64>()
            + dvar * xc.iter().map(|v| -2.0 * v).sum::<f64>() / m;
        for c in 0..x.cols {
            dx.data[r * x.cols + c] = dxhat[c] / sd + dvar * 2.0 * xc[c] / m + dmean / m;
            dw[c] += dy.at(r, c) * xc[c] / sd;
            db[c] += dy.at(r, c);
        }
    }
    (dx, dw, db)
}

/// Row softmax over the first `limits[r]` columns; the rest are zero.
pub fn softmax(x: &Mat, limits: &[usize]) -> Mat {
    let mut y = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let l = limits[r];
        let row = &x.row(r)[..l];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..l {
            y.data[r * x.cols + c] = e[c] / z;
        }
    }
    y
}

/// `dx = Jᵀ dy` with the full Jacobian `J_ij = y_i (δ_ij - y_j)` built per
/// row.
pub fn softmax_backward(dy: &Mat, y: &Mat, limits: &[usize]) -> Mat {
    let mut dx = Mat::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let l = limits[r];
        let p = &y.row(r)[..l];
        let jac: Vec<Vec<f64>> = (0..l)
            .map(|i| {
                (0..l)
                    .map(|j| p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]))
                    .collect()
            })
            .collect();
        for j in 0..l {
            dx.data[r * y.cols + j] = (0..l).map(|i| dy.at(r, i) * jac[i][j]).sum();
        }
    }
    dx
}

/// `log(softmax(x))` computed from the probabilities.
pub fn log_softmax(x: &Mat) -> Mat {
    let full = vec![x.cols; x.rows];
    let mut y = softmax(x, &full);
    y.data.iter_mut().for_each(|v| *v = v.ln());
    y
}

/// Jacobian of `log softmax` is `δ_ij - q_j`.
pub fn log_softmax_backward(dy: &Mat, logq: &Mat) -> Mat {
    let mut dx = Mat::zeros(logq.rows, logq.cols);
    let v = logq.cols;
    for r in 0..logq.rows {
        let q: Vec<f64> = logq.row(r).iter().map(|l| l.exp()).collect();
        for j in 0..v {
            dx.data[r * v + j] = (0..v)
                .map(|i| dy.at(r, i) * (if i == j { 1.0 } else { 0.0 } - q[j]))
                .sum();
        }
    }
    dx
}

/// Target distribution of label smoothing for one row.
pub fn smoothed_target(vocab: usize, target: usize, alpha: f64) -> Vec<f64> {
    (0..vocab)
        .map(|i| alpha / vocab as f64 + if i == target { 1.0 - alpha } else { 0.0 })
        .collect()
}

/// `Σ_rows -Σ_i p_i log q_i`, skipping `pad` rows. Returns the loss and
/// its gradient with respect to `logq`.
pub fn smoothed_nll(logq: &Mat, targets: &[usize], alpha: f64, pad: Option<usize>) -> (f64, Mat) {
    let mut loss = 0.0;
    let mut g = Mat::zeros(logq.rows, logq.cols);
    for r in 0..logq.rows {
        if Some(targets[r]) == pad {
            continue;
        }
        let p = smoothed_target(logq.cols, targets[r], alpha);
        for c in 0..logq.cols {
            loss -= p[c] * logq.at(r, c);
            g.data[r * logq.cols + c] = -p[c];
        }
    }
    (loss, g)
}

/// Criterion on raw logits: log-softmax, then the smoothed NLL.
pub fn criterion(logits: &Mat, targets: &[usize], alpha: f64, pad: Option<usize>) -> (f64, Mat) {
    let logq = log_softmax(logits);
    let (loss, g) = smoothed_nll(&logq, targets, alpha, pad);
    (loss, log_softmax_backward(&g, &logq))
}

/// `factors * (x + b) + residual`, `factors` being the dropout multipliers.
pub fn bias_dropout_residual(x: &Mat, b: &[f64], residual: &Mat, factors: &[f64]) -> Mat {
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| factors[i] * (v + b[i % x.cols]) + residual.data[i])
        .collect();
    Mat::new(x.rows, x.cols, data)
}

/// Returns `(dx, db, dresidual)`.
pub fn bias_dropout_residual_backward(dy: &Mat, factors: &[f64]) -> (Mat, Vec<f64>, Mat) {
    let dx = Mat::new(
        dy.rows,
        dy.cols,
        dy.data.iter().zip(factors).map(|(g, f)| g * f).collect(),
    );
    (dx.clone(), column_sums(&dx), dy.clone())
}

pub fn bias_relu_dropout(x: &Mat, b: &[f64], factors: &[f64]) -> Mat {
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| factors[i] * (v + b[i % x.cols]).max(0.0))
        .collect();
    Mat::new(x.rows, x.cols, data)
}

/// Returns `(dx, db)`; the ReLU derivative at exactly zero is taken as 0.
pub fn bias_relu_dropout_backward(
    dy: &Mat,
    x: &Mat,
    b: &[f64],
    factors: &[f64],
) -> (Mat, Vec<f64>) {
    let data = (0..dy.data.len())
        .map(|i| {
            if x.data[i] + b[i % x.cols] > 0.0 {
                dy.data[i] * factors[i]
            } else {
                0.0
            }
        })
        .collect();
    let dx = Mat::new(dy.rows, dy.cols, data);
    let db = column_sums(&dx);
    (dx, db)
}

pub fn column_sums(x: &Mat) -> Vec<f64> {
    let mut s = vec![0.0; x.cols];
    for r in 0..x.rows {
        for c in 0..x.cols {
            s[c] += x.at(r, c);
        }
    }
    s
}

/// Token embedding lookup: `factors * (scale * table[tok] + pos[t])` where
/// `t` is the position of the token within its sequence.
pub fn embedding(
    table: &Mat,
    pos: &Mat,
    tokens: &[usize],
    seq_len: usize,
    scale: f64,
    factors: &[f64],
) -> Mat {
    let d = table.cols;
    let mut out = Mat::zeros(tokens.len(), d);
    for (r, &tok) in tokens.iter().enumerate() {
        for c in 0..d {
            let i = r * d + c;
            out.data[i] = factors[i] * (scale * table.at(tok, c) + pos.at(r % seq_len, c));
        }
    }
    out
}

/// Scatter-add of the output gradient. Returns `(d_table, d_pos)`; `d_pos`
/// covers `seq_len` rows.
pub fn embedding_backward(
    dy: &Mat,
    tokens: &[usize],
    seq_len: usize,
    vocab: usize,
    scale: f64,
    factors: &[f64],
) -> (Mat, Mat) {
    let d = dy.cols;
    let mut dt = Mat::zeros(vocab, d);
    let mut dp = Mat::zeros(seq_len, d);
    for (r, &tok) in tokens.iter().enumerate() {
        for c in 0..d {
            let g = dy.at(r, c) * factors[r * d + c];
            dt.data[tok * d + c] += scale * g;
            dp.data[(r % seq_len) * d + c] += g;
        }
    }
    (dt, dp)
}

/// Sinusoidal position table, sine on even columns and cosine on odd.
pub fn sinusoid_table(len: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(len, d);
    for t in 0..len {
        for c in 0..d {
            let freq = 1.0 / 10000f64.powf((c - c % 2) as f64 / d as f64);
            let a = t as f64 * freq;
            m.data[t * d + c] = if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let i = Mat::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, false, &i, false), a);
        assert_eq!(matmul(&a, true, &i, false), a.transpose());
        assert_eq!(
            matmul(&a, false, &a, false).data,
            vec![7.0, 10.0, 15.0, 22.0]
        );
    }

    #[test]
    fn layernorm_gradient_sums_to_zero() {
        let x = Mat::new(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let w = [1.0, 0.5, -2.0, 1.5];
        let out = layernorm(&x, &w, &[0.0; 4], 1e-5);
        let dy = Mat::new(1, 4, vec![0.1, 0.2, -0.3, 0.7]);
        let (dx, _, _) = layernorm_backward(&dy, &x, &w, &out, 1e-5);
        assert!(dx.data.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn criterion_rows_sum_to_zero() {
        let h = Mat::new(2, 3, vec![0.1, 2.0, -1.0, 0.0, 0.0, 0.0]);
        let (loss, g) = criterion(&h, &[1, 0], 0.1, None);
        assert!(loss > 0.0);
        assert!((g.row(1).iter().sum::<f64>()).abs() < 1e-14);
        let (_, g) = criterion(&h, &[1, 9], 0.1, Some(9));
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positions_match_closed_form() {
        let t = sinusoid_table(3, 4);
        assert_eq!(t.at(0, 1), 1.0);
        assert!((t.at(2, 2) - (2.0f64 / 100.0).sin()).abs() < 1e-15);
    }
}
