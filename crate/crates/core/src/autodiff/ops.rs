//! Forward primitives and their adjoints.

use crate::error::{Error, Result};

use super::{Op, Tape, Var};

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl Tape {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("transpose", sa, &[]));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    /// Adds a rank-1 bias of length `n` to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, mat: Var, bias: Var) -> Result<Var> {
        let (sm, sb) = (self.shape(mat), self.shape(bias));
        if sm.len() != 2 || sb.len() != 1 || sm[1] != sb[0] {
            return Err(shape_err("add_bias", sm, sb));
        }
        let (m, n) = (sm[0], sm[1]);
        let mut out = self.data(mat).to_vec();
        let b = self.data(bias);
        for row in out.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let _ = m;
        Ok(self.push(sm.to_vec(), out, Op::AddBias(mat, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Exp(a))
    }

    /// Natural log; nonpositive inputs are a contract violation so the
    /// output stays finite on finite inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|v| **v <= 0.0) {
            return Err(Error::Contract(format!(
                "log requires strictly positive inputs, got {bad}"
            )));
        }
        let out: Vec<f64> = self.data(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Log(a)))
    }

    /// Row-wise softmax with max subtraction. Accepts `[n]` (one row) or
    /// `[m, n]`.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = match sa.len() {
            1 => sa[0],
            2 => sa[1],
            _ => return Err(shape_err("softmax_rows", &sa, &[])),
        };
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(sa, out, Op::SoftmaxRows(a)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let data = self.data(a);
        let value = data.iter().sum::<f64>() / data.len() as f64;
        self.push(vec![], vec![value], Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.data(a).iter().sum::<f64>();
        self.push(vec![], vec![value], Op::Sum(a))
    }

    /// 3x3 convolution with zero padding 1 and the given stride:
    /// `[n, c_in, h, w] * [c_out, c_in, 3, 3] + [c_out]` gives
    /// `[n, c_out, (h-1)/s+1, (w-1)/s+1]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 4 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(shape_err("conv2d", sx, sk));
        }
        if sx[1] != sk[1] {
            return Err(shape_err("conv2d", sx, sk));
        }
        if sb.len() != 1 || sb[0] != sk[0] {
            return Err(shape_err("conv2d", sk, sb));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (n, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let c_out = sk[0];
        let (h_out, w_out) = ((h - 1) / stride + 1, (w - 1) / stride + 1);

        let padded = pad1(self.data(x), n, c_in, h, w);
        let (hp, wp) = (h + 2, w + 2);
        let kdata = self.data(kernel);
        let bdata = self.data(bias);
        let mut out = vec![0.0; n * c_out * h_out * w_out];

        for ni in 0..n {
            for co in 0..c_out {
                let out_plane =
                    &mut out[(ni * c_out + co) * h_out * w_out..(ni * c_out + co + 1) * h_out * w_out];
                out_plane.iter_mut().for_each(|v| *v = bdata[co]);
                for ci in 0..c_in {
                    let in_plane = &padded[(ni * c_in + ci) * hp * wp..(ni * c_in + ci + 1) * hp * wp];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let weight = kdata[((co * c_in + ci) * 3 + ky) * 3 + kx];
                            for oy in 0..h_out {
                                let in_row = &in_plane[(oy * stride + ky) * wp + kx..];
                                let out_row = &mut out_plane[oy * w_out..(oy + 1) * w_out];
                                for (ox, dst) in out_row.iter_mut().enumerate() {
                                    *dst += weight * in_row[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![n, c_out, h_out, w_out],
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
            },
        ))
    }

    /// Nearest-neighbor 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x_nearest(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 4 {
            return Err(shape_err("upsample2x_nearest", sa, &[]));
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let src = self.data(a);
        let mut out = vec![0.0; n * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for plane in 0..n * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let op = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    op[y * w2 + x] = sp[(y / 2) * w + x / 2];
                }
            }
        }
        Ok(self.push(vec![n, c, h2, w2], out, Op::Upsample2x(a)))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 4 {
            return Err(shape_err("global_avg_pool", sa, &[]));
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let src = self.data(a);
        let mut out = vec![0.0; n * c];
        for (plane, dst) in out.iter_mut().enumerate() {
            *dst = src[plane * h * w..(plane + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(a)))
    }

    /// Concatenates two `[n, c, h, w]` stacks along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(shape_err("concat_channels", sa, sb));
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let (da, db) = (self.data(a), self.data(b));
        let plane = h * w;
        let mut out = vec![0.0; n * (ca + cb) * plane];
        for ni in 0..n {
            let dst = &mut out[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&da[ni * ca * plane..(ni + 1) * ca * plane]);
            dst[ca * plane..].copy_from_slice(&db[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        Ok(self.push(vec![n, ca + cb, h, w], out, Op::ConcatChannels(a, b)))
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.data(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a)))
    }

    /// Mean categorical cross-entropy with fused log-softmax. `logits` is
    /// `[m, c]` (or `[c]` with one target); `targets[i]` is the class index
    /// of row i.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let (m, c) = match sl.len() {
            1 => (1, sl[0]),
            2 => (sl[0], sl[1]),
            _ => return Err(shape_err("cross_entropy", &sl, &[])),
        };
        if targets.len() != m {
            return Err(Error::Contract(format!(
                "cross_entropy got {} targets for {} rows",
                targets.len(),
                m
            )));
        }
        if let Some(bad) = targets.iter().find(|t| **t >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy target {bad} out of range for {c} classes"
            )));
        }
        let mut softmax = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &target) in softmax.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss -= row[target] - log_norm;
            softmax_in_place(row);
        }
        loss /= m as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
        ))
    }

    /// Mean squared error between two same-shaped arrays.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", self.shape(a), self.shape(b)));
        }
        let n = self.data(a).len() as f64;
        let value = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(vec![], vec![value], Op::Mse(a, b)))
    }

    /// Negative log of one probability: `-ln(probs[class])`. `probs` may be
    /// `[c]` or `[1, c]`; the probability must be strictly positive.
    pub fn nll_loss(&mut self, probs: Var, class: usize) -> Result<Var> {
        let sp = self.shape(probs);
        let c = match sp.len() {
            1 => sp[0],
            2 if sp[0] == 1 => sp[1],
            _ => return Err(shape_err("nll_loss", sp, &[])),
        };
        if class >= c {
            return Err(Error::Contract(format!(
                "nll_loss class {class} out of range for {c} classes"
            )));
        }
        let p = self.data(probs)[class];
        if p <= 0.0 {
            return Err(Error::Contract(format!(
                "nll_loss requires a positive probability, got {p}"
            )));
        }
        Ok(self.push(vec![], vec![-p.ln()], Op::NllPick { probs, class }))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (dst, bv) in out_row.iter_mut().zip(b_row) {
                *dst += av * bv;
            }
        }
    }
    out
}

fn pad1(data: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2, w + 2);
    let mut out = vec![0.0; n * c * hp * wp];
    for plane in 0..n * c {
        for y in 0..h {
            let src = &data[plane * h * w + y * w..plane * h * w + (y + 1) * w];
            let dst_start = plane * hp * wp + (y + 1) * wp + 1;
            out[dst_start..dst_start + w].copy_from_slice(src);
        }
    }
    out
}

/// Scatters the adjoint of node `idx` into its parents' accumulators.
pub(crate) fn accumulate_parents(tape: &mut Tape, idx: usize, out_grad: &[f64]) {
    // Values are read through raw pointers into the node list while the
    // adjoint buffers are mutated; node values are never written after
    // creation, so the split borrows are disjoint.
    enum Plan {
        None,
        One(Var, Vec<f64>),
        Two(Var, Vec<f64>, Var, Vec<f64>),
        Three(Var, Vec<f64>, Var, Vec<f64>, Var, Vec<f64>),
    }

    let plan = {
        let node = &tape.nodes[idx];
        match &node.op {
            Op::Leaf => Plan::None,
            Op::Matmul(a, b) => {
                let (sa, sb) = (tape.shape(*a), tape.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G . B^T, dB = A^T . G
                let bt = transpose_raw(tape.data(*b), k, n);
                let da = matmul_raw(out_grad, &bt, m, n, k);
                let at = transpose_raw(tape.data(*a), m, k);
                let db = matmul_raw(&at, out_grad, k, m, n);
                Plan::Two(*a, da, *b, db)
            }
            Op::Transpose(a) => {
                let sa = tape.shape(*a);
                let (m, n) = (sa[0], sa[1]);
                // Output is [n, m]; transpose the adjoint back.
                Plan::One(*a, transpose_raw(out_grad, n, m))
            }
            Op::Add(a, b) => Plan::Two(*a, out_grad.to_vec(), *b, out_grad.to_vec()),
            Op::AddBias(mat, bias) => {
                let n = tape.shape(*bias)[0];
                let mut db = vec![0.0; n];
                for row in out_grad.chunks(n) {
                    for (dst, g) in db.iter_mut().zip(row) {
                        *dst += g;
                    }
                }
                Plan::Two(*mat, out_grad.to_vec(), *bias, db)
            }
            Op::Scale(a, factor) => {
                Plan::One(*a, out_grad.iter().map(|g| g * factor).collect())
            }
            Op::Tanh(a) => {
                let y = &node.data;
                Plan::One(
                    *a,
                    out_grad
                        .iter()
                        .zip(y)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )
            }
            Op::Relu(a) => {
                let x = tape.data(*a);
                Plan::One(
                    *a,
                    out_grad
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )
            }
            Op::Exp(a) => {
                let y = &node.data;
                Plan::One(*a, out_grad.iter().zip(y).map(|(g, y)| g * y).collect())
            }
            Op::Log(a) => {
                let x = tape.data(*a);
                Plan::One(*a, out_grad.iter().zip(x).map(|(g, x)| g / x).collect())
            }
            Op::SoftmaxRows(a) => {
                let y = &node.data;
                let n = *node.shape.last().expect("nonempty shape");
                let mut dx = vec![0.0; y.len()];
                for ((dx_row, y_row), g_row) in
                    dx.chunks_mut(n).zip(y.chunks(n)).zip(out_grad.chunks(n))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for ((d, y), g) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                        *d = y * (g - dot);
                    }
                }
                Plan::One(*a, dx)
            }
            Op::Mean(a) => {
                let len = tape.data(*a).len();
                let g = out_grad[0] / len as f64;
                Plan::One(*a, vec![g; len])
            }
            Op::Sum(a) => {
                let len = tape.data(*a).len();
                Plan::One(*a, vec![out_grad[0]; len])
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
            } => {
                let need_dx = tape.nodes[x.0].requires_grad;
                let (dx, dk, db) = conv2d_backward(
                    tape.data(*x),
                    tape.shape(*x),
                    tape.data(*kernel),
                    tape.shape(*kernel),
                    out_grad,
                    &node.shape,
                    *stride,
                    need_dx,
                );
                Plan::Three(*x, dx, *kernel, dk, *bias, db)
            }
            Op::Upsample2x(a) => {
                let sa = tape.shape(*a);
                let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let gp = &out_grad[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for x in 0..w2 {
                            dp[(y / 2) * w + x / 2] += gp[y * w2 + x];
                        }
                    }
                }
                Plan::One(*a, dx)
            }
            Op::GlobalAvgPool(a) => {
                let sa = tape.shape(*a);
                let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let scale = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let g = out_grad[plane] * scale;
                    dx[plane * h * w..(plane + 1) * h * w]
                        .iter_mut()
                        .for_each(|v| *v = g);
                }
                Plan::One(*a, dx)
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (tape.shape(*a), tape.shape(*b));
                let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
                let plane = h * w;
                let mut da = vec![0.0; n * ca * plane];
                let mut db = vec![0.0; n * cb * plane];
                for ni in 0..n {
                    let g = &out_grad[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
                    da[ni * ca * plane..(ni + 1) * ca * plane].copy_from_slice(&g[..ca * plane]);
                    db[ni * cb * plane..(ni + 1) * cb * plane].copy_from_slice(&g[ca * plane..]);
                }
                Plan::Two(*a, da, *b, db)
            }
            Op::Reshape(a) => Plan::One(*a, out_grad.to_vec()),
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
            } => {
                let c = softmax.len() / targets.len();
                let scale = out_grad[0] / targets.len() as f64;
                let mut dl = softmax.iter().map(|p| p * scale).collect::<Vec<f64>>();
                for (row, &target) in dl.chunks_mut(c).zip(targets) {
                    row[target] -= scale;
                }
                Plan::One(*logits, dl)
            }
            Op::Mse(a, b) => {
                let n = tape.data(*a).len() as f64;
                let scale = 2.0 * out_grad[0] / n;
                let diff: Vec<f64> = tape
                    .data(*a)
                    .iter()
                    .zip(tape.data(*b))
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let neg: Vec<f64> = diff.iter().map(|d| -d).collect();
                Plan::Two(*a, diff, *b, neg)
            }
            Op::NllPick { probs, class } => {
                let p = tape.data(*probs)[*class];
                let mut dp = vec![0.0; tape.data(*probs).len()];
                dp[*class] = -out_grad[0] / p;
                Plan::One(*probs, dp)
            }
        }
    };

    let mut add_to = |var: Var, contribution: Vec<f64>| {
        let acc = tape.adjoint_mut(var);
        for (dst, src) in acc.iter_mut().zip(&contribution) {
            *dst += src;
        }
    };
    match plan {
        Plan::None => {}
        Plan::One(a, da) => add_to(a, da),
        Plan::Two(a, da, b, db) => {
            add_to(a, da);
            add_to(b, db);
        }
        Plan::Three(a, da, b, db, c, dc) => {
            add_to(a, da);
            add_to(b, db);
            add_to(c, dc);
        }
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    sx: &[usize],
    kernel: &[f64],
    sk: &[usize],
    out_grad: &[f64],
    s_out: &[usize],
    stride: usize,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let c_out = sk[0];
    let (h_out, w_out) = (s_out[2], s_out[3]);
    let (hp, wp) = (h + 2, w + 2);

    let padded = pad1(x, n, c_in, h, w);
    let mut d_padded = vec![0.0; if need_dx { padded.len() } else { 0 }];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; c_out];

    for ni in 0..n {
        for co in 0..c_out {
            let g_plane = &out_grad[(ni * c_out + co) * h_out * w_out..(ni * c_out + co + 1) * h_out * w_out];
            db[co] += g_plane.iter().sum::<f64>();
            for ci in 0..c_in {
                let in_plane = &padded[(ni * c_in + ci) * hp * wp..(ni * c_in + ci + 1) * hp * wp];
                let dpl_base = (ni * c_in + ci) * hp * wp;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kidx = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                        let weight = kernel[kidx];
                        let mut acc = 0.0;
                        for oy in 0..h_out {
                            let row_base = (oy * stride + ky) * wp + kx;
                            let g_row = &g_plane[oy * w_out..(oy + 1) * w_out];
                            if need_dx {
                                for (ox, g) in g_row.iter().enumerate() {
                                    let pidx = row_base + ox * stride;
                                    acc += in_plane[pidx] * g;
                                    d_padded[dpl_base + pidx] += weight * g;
                                }
                            } else {
                                for (ox, g) in g_row.iter().enumerate() {
                                    acc += in_plane[row_base + ox * stride] * g;
                                }
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }

    // Crop the padding border off the input adjoint.
    let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
    if need_dx {
        for plane in 0..n * c_in {
            for y in 0..h {
                let src = &d_padded[plane * hp * wp + (y + 1) * wp + 1..plane * hp * wp + (y + 1) * wp + 1 + w];
                dx[plane * h * w + y * w..plane * h * w + (y + 1) * w].copy_from_slice(src);
            }
        }
    } else {
        dx = vec![0.0; x.len()];
    }
    (dx, dk, db)
}
