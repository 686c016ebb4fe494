//! Backward rules: one vector-Jacobian product per op.
//!
//! `backprop` returns one contribution buffer per input, `None` for inputs
//! that do not require gradients. All accumulation loops run in a fixed order
//! so repeated runs produce identical bits.

use super::ops::softmax_values;
use super::{Op, Producer, Tensor};

pub(super) fn backprop(node: &Tensor, producer: &Producer, adj: &[f64]) -> Vec<Option<Vec<f64>>> {
    let inputs = &producer.inputs;
    let needs: Vec<bool> = inputs.iter().map(|t| t.requires_grad()).collect();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];

    match &producer.op {
        Op::MatMul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            if needs[0] {
                // da = adj . b^T
                let mut da = vec![0.0; m * k];
                inputs[1].with_values(|b| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += adj[i * n + j] * b[kk * n + j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                });
                out[0] = Some(da);
            }
            if needs[1] {
                // db = a^T . adj
                let mut db = vec![0.0; k * n];
                inputs[0].with_values(|a| {
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += a[i * k + kk] * adj[i * n + j];
                            }
                            db[kk * n + j] = acc;
                        }
                    }
                });
                out[1] = Some(db);
            }
        }
        Op::Transpose => {
            if needs[0] {
                let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = adj[j * r + i];
                    }
                }
                out[0] = Some(dx);
            }
        }
        Op::Add => {
            for slot in 0..2 {
                if needs[slot] {
                    out[slot] = Some(adj.to_vec());
                }
            }
        }
        Op::MulElem => {
            if needs[0] {
                out[0] = Some(inputs[1].with_values(|b| {
                    adj.iter().zip(b).map(|(g, y)| g * y).collect::<Vec<f64>>()
                }));
            }
            if needs[1] {
                out[1] = Some(inputs[0].with_values(|a| {
                    adj.iter().zip(a).map(|(g, x)| g * x).collect::<Vec<f64>>()
                }));
            }
        }
        Op::Scale(c) => {
            if needs[0] {
                out[0] = Some(adj.iter().map(|g| g * c).collect());
            }
        }
        Op::AddBias => {
            let (n, m) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            if needs[0] {
                out[0] = Some(adj.to_vec());
            }
            if needs[1] {
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += adj[i * m + j];
                    }
                }
                out[1] = Some(db);
            }
        }
        Op::Relu => {
            if needs[0] {
                out[0] = Some(inputs[0].with_values(|x| {
                    adj.iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect::<Vec<f64>>()
                }));
            }
        }
        Op::Softmax { axis } => {
            if needs[0] {
                let shape = node.shape();
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut dx = vec![0.0; adj.len()];
                node.with_values(|y| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * axis_len + a) * inner + i;
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                dot += adj[at(a)] * y[at(a)];
                            }
                            for a in 0..axis_len {
                                let ya = y[at(a)];
                                // masked entries (exact zero weight) block all
                                // gradient, including signed zeros
                                dx[at(a)] = if ya == 0.0 { 0.0 } else { ya * (adj[at(a)] - dot) };
                            }
                        }
                    }
                });
                out[0] = Some(dx);
            }
        }
        Op::MaskFill { allowed } => {
            if needs[0] {
                out[0] = Some(
                    adj.iter()
                        .zip(allowed)
                        .map(|(g, &ok)| if ok { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::WeightedSum => {
            let (q, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let d = inputs[1].shape()[1];
            if needs[0] {
                let mut dw = vec![0.0; q * k];
                inputs[1].with_values(|v| {
                    for i in 0..q {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for c in 0..d {
                                acc += adj[i * d + c] * v[j * d + c];
                            }
                            dw[i * k + j] = acc;
                        }
                    }
                });
                out[0] = Some(dw);
            }
            if needs[1] {
                // mirror the forward zero-skip: rows with no surviving weight
                // keep an exact 0.0 gradient
                let mut dv = vec![0.0; k * d];
                inputs[0].with_values(|w| {
                    for j in 0..k {
                        for c in 0..d {
                            let mut acc = 0.0;
                            for i in 0..q {
                                let wij = w[i * k + j];
                                if wij != 0.0 {
                                    acc += wij * adj[i * d + c];
                                }
                            }
                            dv[j * d + c] = acc;
                        }
                    }
                });
                out[1] = Some(dv);
            }
        }
        Op::LayerNorm { eps } => {
            let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            inputs[0].with_values(|x| {
                inputs[1].with_values(|g| {
                    let mut dx = if needs[0] { vec![0.0; n * d] } else { vec![] };
                    let mut dgamma = if needs[1] { vec![0.0; d] } else { vec![] };
                    let mut dbeta = if needs[2] { vec![0.0; d] } else { vec![] };
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let row = &x[r * d..(r + 1) * d];
                        let arow = &adj[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..d {
                            xhat[c] = (row[c] - mean) * inv;
                            dxhat[c] = arow[c] * g[c];
                        }
                        if needs[1] {
                            for c in 0..d {
                                dgamma[c] += arow[c] * xhat[c];
                            }
                        }
                        if needs[2] {
                            for c in 0..d {
                                dbeta[c] += arow[c];
                            }
                        }
                        if needs[0] {
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dxhat
                                .iter()
                                .zip(&xhat)
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / d as f64;
                            for c in 0..d {
                                dx[r * d + c] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                            }
                        }
                    }
                    if needs[0] {
                        out[0] = Some(dx);
                    }
                    if needs[1] {
                        out[1] = Some(dgamma);
                    }
                    if needs[2] {
                        out[2] = Some(dbeta);
                    }
                })
            });
        }
        Op::Gather { indices } => {
            if needs[0] {
                let (v, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let mut dt = vec![0.0; v * d];
                for (row, &ix) in indices.iter().enumerate() {
                    for c in 0..d {
                        dt[ix * d + c] += adj[row * d + c];
                    }
                }
                out[0] = Some(dt);
            }
        }
        Op::ConcatRows { splits } => {
            let d = node.shape()[1];
            let mut row0 = 0;
            for (slot, &rows) in splits.iter().enumerate() {
                if needs[slot] {
                    out[slot] = Some(adj[row0 * d..(row0 + rows) * d].to_vec());
                }
                row0 += rows;
            }
        }
        Op::ConcatCols { splits } => {
            let n = node.shape()[0];
            let total: usize = splits.iter().sum();
            let mut col0 = 0;
            for (slot, &cols) in splits.iter().enumerate() {
                if needs[slot] {
                    let mut dp = vec![0.0; n * cols];
                    for r in 0..n {
                        dp[r * cols..(r + 1) * cols]
                            .copy_from_slice(&adj[r * total + col0..r * total + col0 + cols]);
                    }
                    out[slot] = Some(dp);
                }
                col0 += cols;
            }
        }
        Op::SliceRows { start, len } => {
            if needs[0] {
                let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let mut dx = vec![0.0; n * d];
                dx[start * d..(start + len) * d].copy_from_slice(adj);
                out[0] = Some(dx);
            }
        }
        Op::MeanRows { rows } => {
            if needs[0] {
                let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let k = rows.len() as f64;
                let mut dx = vec![0.0; n * d];
                for &r in rows {
                    for c in 0..d {
                        dx[r * d + c] += adj[c] / k;
                    }
                }
                out[0] = Some(dx);
            }
        }
        Op::SumAll => {
            if needs[0] {
                out[0] = Some(vec![adj[0]; inputs[0].len()]);
            }
        }
        Op::CrossEntropy { label } => {
            if needs[0] {
                let dx = inputs[0].with_values(|logits| {
                    let mut p = softmax_values(logits);
                    p[*label] -= 1.0;
                    p.iter_mut().for_each(|v| *v *= adj[0]);
                    p
                });
                out[0] = Some(dx);
            }
        }
    }
    out
}
