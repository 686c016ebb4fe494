//! Forward kernels. Each constructor validates shapes, computes the result in
//! a fixed (deterministic) loop order, and records the producing op.

use super::{canonical_sum, Op, Result, Tensor, TensorError};

fn want_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::BadRank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn want_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

impl Tensor {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        want_rank(self, 2, "matmul")?;
        want_rank(other, 2, "matmul")?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out = self.with_values(|a| other.with_values(|b| matmul_values(a, b, m, k, n)));
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MatMul,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        want_rank(self, 2, "transpose")?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; r * c];
        self.with_values(|x| {
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
        });
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            Op::Transpose,
            vec![self.clone()],
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        want_same_shape(self, other, "add")?;
        let out = self.with_values(|a| {
            other.with_values(|b| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Add,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        want_same_shape(self, other, "mul_elem")?;
        let out = self.with_values(|a| {
            other.with_values(|b| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<f64>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::MulElem,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.with_values(|x| x.iter().map(|v| v * c).collect::<Vec<f64>>());
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(c), vec![self.clone()])
    }

    /// `[n,m] + [m]`: add `bias` to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        want_rank(self, 2, "add_bias")?;
        want_rank(bias, 1, "add_bias")?;
        let (n, m) = (self.shape()[0], self.shape()[1]);
        if bias.shape()[0] != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let out = self.with_values(|x| {
            bias.with_values(|b| {
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] = x[i * m + j] + b[j];
                    }
                }
                out
            })
        });
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            Op::AddBias,
            vec![self.clone(), bias.clone()],
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.with_values(|x| {
            x.iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect::<Vec<f64>>()
        });
        Tensor::from_op(self.shape().to_vec(), out, Op::Relu, vec![self.clone()])
    }

    /// Softmax along `axis`. Entries equal to `-inf` are mask sentinels: they
    /// are excluded from the max and the normalizing sum and produce exact
    /// `0.0` outputs. A slice that is entirely masked comes out all zero,
    /// which is also how such rows are recognized downstream.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let shape = self.shape().to_vec();
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; self.len()];
        self.with_values(|x| {
            let mut terms: Vec<f64> = Vec::with_capacity(axis_len);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * axis_len + a) * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..axis_len {
                        let v = x[at(a)];
                        if v != f64::NEG_INFINITY && v > max {
                            max = v;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        // fully masked slice: all-zero output
                        continue;
                    }
                    terms.clear();
                    for a in 0..axis_len {
                        let v = x[at(a)];
                        if v != f64::NEG_INFINITY {
                            terms.push((v - max).exp());
                        }
                    }
                    let z = canonical_sum(&mut terms);
                    for a in 0..axis_len {
                        let v = x[at(a)];
                        out[at(a)] = if v == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (v - max).exp() / z
                        };
                    }
                }
            }
        });
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Softmax { axis },
            vec![self.clone()],
        ))
    }

    /// Write the `-inf` sentinel where `allowed` is false. The backward rule
    /// passes gradients through allowed entries and writes literal zeros at
    /// masked ones, so no gradient (not even a signed zero) crosses the mask.
    pub fn mask_fill(&self, allowed: &[bool]) -> Result<Tensor> {
        if allowed.len() != self.len() {
            return Err(TensorError::Invalid {
                op: "mask_fill",
                msg: format!(
                    "mask has {} entries for shape {:?}",
                    allowed.len(),
                    self.shape()
                ),
            });
        }
        let out = self.with_values(|x| {
            x.iter()
                .zip(allowed)
                .map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY })
                .collect::<Vec<f64>>()
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::MaskFill {
                allowed: allowed.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// `weights [q,k] x values [k,d] -> [q,d]`, as a matmul except that exact
    /// zero weights are skipped and the surviving terms are summed in
    /// canonical order. Masked positions (weight exactly 0.0) therefore never
    /// touch the output, bitwise, and permuting the key axis together with the
    /// weights leaves every output bit unchanged.
    pub fn weighted_sum_rows(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
        want_rank(weights, 2, "weighted_sum_rows")?;
        want_rank(values, 2, "weighted_sum_rows")?;
        let (q, k) = (weights.shape()[0], weights.shape()[1]);
        let (k2, d) = (values.shape()[0], values.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum_rows",
                left: weights.shape().to_vec(),
                right: values.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; q * d];
        weights.with_values(|w| {
            values.with_values(|v| {
                let mut terms: Vec<f64> = Vec::with_capacity(k);
                for i in 0..q {
                    for c in 0..d {
                        terms.clear();
                        for j in 0..k {
                            let wij = w[i * k + j];
                            if wij != 0.0 {
                                terms.push(wij * v[j * d + c]);
                            }
                        }
                        out[i * d + c] = canonical_sum(&mut terms);
                    }
                }
            })
        });
        Ok(Tensor::from_op(
            vec![q, d],
            out,
            Op::WeightedSum,
            vec![weights.clone(), values.clone()],
        ))
    }

    /// Per-row layer normalization with learned scale and shift:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`, variance uncorrected.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        want_rank(self, 2, "layer_norm")?;
        want_rank(gamma, 1, "layer_norm")?;
        want_rank(beta, 1, "layer_norm")?;
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if gamma.shape()[0] != d || beta.shape()[0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * d];
        self.with_values(|x| {
            gamma.with_values(|g| {
                beta.with_values(|b| {
                    for r in 0..n {
                        let row = &x[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..d {
                            out[r * d + c] = g[c] * (row[c] - mean) * inv + b[c];
                        }
                    }
                })
            })
        });
        Ok(Tensor::from_op(
            vec![n, d],
            out,
            Op::LayerNorm { eps },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// Row lookup into `self` (`[v,d]`). Gradients scatter-add back, so a
    /// repeated index accumulates every occurrence.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        want_rank(self, 2, "gather_rows")?;
        let (v, d) = (self.shape()[0], self.shape()[1]);
        for &ix in indices {
            if ix >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: ix,
                    len: v,
                });
            }
        }
        let mut out = vec![0.0; indices.len() * d];
        self.with_values(|table| {
            for (row, &ix) in indices.iter().enumerate() {
                out[row * d..(row + 1) * d].copy_from_slice(&table[ix * d..(ix + 1) * d]);
            }
        });
        Ok(Tensor::from_op(
            vec![indices.len(), d],
            out,
            Op::Gather {
                indices: indices.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Stack rank-2 tensors with equal column counts on the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        }
        for p in parts {
            want_rank(p, 2, "concat_rows")?;
        }
        let d = parts[0].shape()[1];
        for p in &parts[1..] {
            if p.shape()[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut out = Vec::with_capacity(rows * d);
        for p in parts {
            p.with_values(|v| out.extend_from_slice(v));
        }
        Ok(Tensor::from_op(
            vec![rows, d],
            out,
            Op::ConcatRows {
                splits: parts.iter().map(|p| p.shape()[0]).collect(),
            },
            parts.to_vec(),
        ))
    }

    /// Stack rank-2 tensors with equal row counts on the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        for p in parts {
            want_rank(p, 2, "concat_cols")?;
        }
        let n = parts[0].shape()[0];
        for p in &parts[1..] {
            if p.shape()[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut out = vec![0.0; n * cols];
        let mut col0 = 0;
        for p in parts {
            let pc = p.shape()[1];
            p.with_values(|v| {
                for r in 0..n {
                    out[r * cols + col0..r * cols + col0 + pc]
                        .copy_from_slice(&v[r * pc..(r + 1) * pc]);
                }
            });
            col0 += pc;
        }
        Ok(Tensor::from_op(
            vec![n, cols],
            out,
            Op::ConcatCols {
                splits: parts.iter().map(|p| p.shape()[1]).collect(),
            },
            parts.to_vec(),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        want_rank(self, 2, "slice_rows")?;
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: n,
            });
        }
        let out = self.with_values(|v| v[start * d..(start + len) * d].to_vec());
        Ok(Tensor::from_op(
            vec![len, d],
            out,
            Op::SliceRows { start, len },
            vec![self.clone()],
        ))
    }

    /// Average of the listed rows -> `[1,d]`. The row list must be non-empty.
    pub fn mean_rows(&self, rows: &[usize]) -> Result<Tensor> {
        want_rank(self, 2, "mean_rows")?;
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean_rows",
                msg: "empty row list".into(),
            });
        }
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "mean_rows",
                    index: r,
                    len: n,
                });
            }
        }
        let mut out = vec![0.0; d];
        self.with_values(|v| {
            for &r in rows {
                for c in 0..d {
                    out[c] += v[r * d + c];
                }
            }
        });
        let k = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Ok(Tensor::from_op(
            vec![1, d],
            out,
            Op::MeanRows {
                rows: rows.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Sum of every entry -> `[1]`.
    pub fn sum_all(&self) -> Tensor {
        let s = self.with_values(|v| v.iter().sum::<f64>());
        Tensor::from_op(vec![1], vec![s], Op::SumAll, vec![self.clone()])
    }

    /// Softmax cross-entropy against `label`, computed via the shifted
    /// log-sum-exp so large logits cannot overflow. Accepts `[c]` or `[1,c]`.
    pub fn cross_entropy(&self, label: usize) -> Result<Tensor> {
        let c = match self.shape() {
            [c] => *c,
            [1, c] => *c,
            other => {
                return Err(TensorError::BadRank {
                    op: "cross_entropy",
                    expected: 1,
                    shape: other.to_vec(),
                })
            }
        };
        if label >= c {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: label,
                len: c,
            });
        }
        let loss = self.with_values(|x| {
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - x[label]
        });
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::CrossEntropy { label },
            vec![self.clone()],
        ))
    }
}

/// Stable softmax of a plain slice (no graph). Used by backward rules and by
/// prediction, where no gradient is wanted.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v != f64::NEG_INFINITY && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    let mut terms: Vec<f64> = x
        .iter()
        .filter(|&&v| v != f64::NEG_INFINITY)
        .map(|&v| (v - max).exp())
        .collect();
    let z = canonical_sum(&mut terms);
    x.iter()
        .map(|&v| {
            if v == f64::NEG_INFINITY {
                0.0
            } else {
                (v - max).exp() / z
            }
        })
        .collect()
}
