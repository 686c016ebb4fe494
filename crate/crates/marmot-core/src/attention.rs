//! Scaled dot-product attention, its multi-head form, and input embeddings.
//!
//! Queries come from one sequence and keys/values from another (possibly the
//! same one), so the same code serves self-attention and cross-attention.
//! Masks are boolean "allowed" matrices; disallowed pairs receive the `-inf`
//! score sentinel, which the softmax turns into an exact 0.0 weight. A query
//! row with no allowed key at all yields an all-zero weight row and an
//! all-zero output row.

use crate::rng::SeedRng;
use crate::tensor::{Tensor, TensorError};
use crate::trace::{AttentionRecord, Subnet, TraceSink};

type Result<T> = std::result::Result<T, TensorError>;

pub(crate) const INIT_STD: f64 = 0.02;

/// Row-major `[n_q, n_k]` matrix of allowed query/key pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_q: usize, n_k: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n_q * n_k {
            return Err(TensorError::Invalid {
                op: "attention_mask",
                msg: format!("{} entries for {n_q}x{n_k} mask", allowed.len()),
            });
        }
        Ok(AttentionMask { n_q, n_k, allowed })
    }

    pub fn all_allowed(n_q: usize, n_k: usize) -> Self {
        AttentionMask {
            n_q,
            n_k,
            allowed: vec![true; n_q * n_k],
        }
    }

    /// Square mask where position pair `(i, j)` is allowed iff both are
    /// present. Absent positions can neither attend nor be attended to.
    pub fn from_presence(present: &[bool]) -> Self {
        let n = present.len();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = present[i] && present[j];
            }
        }
        AttentionMask {
            n_q: n,
            n_k: n,
            allowed,
        }
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n_k + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Attention: scores `q_i . k_j / sqrt(d_head)`, masked softmax over keys,
/// output `z_i = sum_j w_ij v_j`. Returns `(z, w)`; the weight matrix is what
/// trace export and the tests inspect.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor, Tensor)> {
    let d_head = match (q.shape(), k.shape()) {
        ([_, dq], [_, dk]) if dq == dk => *dq,
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "scaled_dot_attention",
                left: q.shape().to_vec(),
                right: k.shape().to_vec(),
            })
        }
    };
    let (n_q, n_k) = (q.shape()[0], k.shape()[0]);
    if v.rank() != 2 || v.shape()[0] != n_k {
        return Err(TensorError::ShapeMismatch {
            op: "scaled_dot_attention",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.n_q != n_q || m.n_k != n_k {
            return Err(TensorError::Invalid {
                op: "scaled_dot_attention",
                msg: format!(
                    "mask is {}x{} but scores are {n_q}x{n_k}",
                    m.n_q, m.n_k
                ),
            });
        }
    }
    let scores = q
        .matmul(&k.transpose()?)?
        .scale(1.0 / (d_head as f64).sqrt());
    let scores = match mask {
        Some(m) => scores.mask_fill(&m.allowed)?,
        None => scores,
    };
    let w = scores.softmax(1)?;
    let z = Tensor::weighted_sum_rows(&w, v)?;
    Ok((z, w))
}

/// Per-head projections plus the output combiner.
#[derive(Debug)]
pub struct MultiHeadParams {
    /// One `[d_model, d_head]` query projection per head.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    /// `[heads * d_head, d_model]` combiner.
    pub w_o: Tensor,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl MultiHeadParams {
    /// Gaussian init. `d_model` must divide evenly into `heads`.
    pub fn init(d_model: usize, heads: usize, rng: &mut SeedRng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::Invalid {
                op: "multi_head",
                msg: format!("d_model {d_model} not divisible by heads {heads}"),
            });
        }
        let d_head = d_model / heads;
        let mat = |rows: usize, cols: usize, rng: &mut SeedRng| {
            let mut v = vec![0.0; rows * cols];
            rng.fill_gaussian(&mut v, 0.0, INIT_STD);
            Tensor::param(&[rows, cols], v)
        };
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for _ in 0..heads {
            w_q.push(mat(d_model, d_head, rng)?);
            w_k.push(mat(d_model, d_head, rng)?);
            w_v.push(mat(d_model, d_head, rng)?);
        }
        let w_o = mat(heads * d_head, d_model, rng)?;
        Ok(MultiHeadParams {
            w_q,
            w_k,
            w_v,
            w_o,
            d_model,
            heads,
            d_head,
        })
    }

    /// Single head with identity projections; multi-head output then equals
    /// plain scaled dot-product attention. Test scaffolding.
    pub fn single_identity(d_model: usize) -> Self {
        let eye = || {
            let mut v = vec![0.0; d_model * d_model];
            for i in 0..d_model {
                v[i * d_model + i] = 1.0;
            }
            Tensor::param(&[d_model, d_model], v).expect("consistent by construction")
        };
        MultiHeadParams {
            w_q: vec![eye()],
            w_k: vec![eye()],
            w_v: vec![eye()],
            w_o: eye(),
            d_model,
            heads: 1,
            d_head: d_model,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for h in 0..self.heads {
            out.push(&self.w_q[h]);
            out.push(&self.w_k[h]);
            out.push(&self.w_v[h]);
        }
        out.push(&self.w_o);
        out
    }
}

/// Where a recorded attention matrix sits in the network.
#[derive(Debug, Clone, Copy)]
pub struct TraceSite {
    pub subnet: Subnet,
    pub layer: usize,
}

/// Multi-head attention with queries from `x_q` and keys/values from `x_kv`.
/// Head outputs are concatenated and combined by `w_o`. When `sink` is given,
/// each head's weight matrix is copied out under `site`.
pub fn multi_head(
    x_q: &Tensor,
    x_kv: &Tensor,
    params: &MultiHeadParams,
    mask: Option<&AttentionMask>,
    mut sink: Option<&mut TraceSink>,
    site: TraceSite,
) -> Result<Tensor> {
    if x_q.rank() != 2 || x_q.shape()[1] != params.d_model {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head",
            left: x_q.shape().to_vec(),
            right: vec![params.d_model, params.d_head],
        });
    }
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let q = x_q.matmul(&params.w_q[h])?;
        let k = x_kv.matmul(&params.w_k[h])?;
        let v = x_kv.matmul(&params.w_v[h])?;
        let (z, w) = scaled_dot_attention(&q, &k, &v, mask)?;
        if let Some(sink) = sink.as_deref_mut() {
            sink.record(AttentionRecord {
                subnet: site.subnet,
                layer: site.layer,
                head: h,
                n_q: w.shape()[0],
                n_k: w.shape()[1],
                weights: w.to_vec(),
            });
        }
        heads.push(z);
    }
    Tensor::concat_cols(&heads)?.matmul(&params.w_o)
}

/// Learned lookup tables: token, absolute position, and token type
/// (0 text, 1 caption, 2 translated image).
#[derive(Debug)]
pub struct EmbeddingTables {
    /// `[vocab, d]`
    pub token: Tensor,
    /// `[max_positions, d]`
    pub position: Tensor,
    /// `[3, d]`
    pub token_type: Tensor,
}

impl EmbeddingTables {
    pub fn init(vocab: usize, max_positions: usize, d: usize, rng: &mut SeedRng) -> Self {
        let mat = |rows: usize, rng: &mut SeedRng| {
            let mut v = vec![0.0; rows * d];
            rng.fill_gaussian(&mut v, 0.0, INIT_STD);
            Tensor::param(&[rows, d], v).expect("consistent by construction")
        };
        EmbeddingTables {
            token: mat(vocab, rng),
            position: mat(max_positions, rng),
            token_type: mat(3, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.token.shape()[0]
    }

    pub fn max_positions(&self) -> usize {
        self.position.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.token.shape()[1]
    }
}

/// Per-position sum `token[id] + position[pos] + token_type[ty]` -> `[n, d]`.
pub fn embed(
    token_ids: &[usize],
    type_ids: &[usize],
    positions: &[usize],
    tables: &EmbeddingTables,
) -> Result<Tensor> {
    if token_ids.len() != type_ids.len() || token_ids.len() != positions.len() {
        return Err(TensorError::Invalid {
            op: "embed",
            msg: format!(
                "length mismatch: {} tokens, {} types, {} positions",
                token_ids.len(),
                type_ids.len(),
                positions.len()
            ),
        });
    }
    let tok = tables.token.gather_rows(token_ids)?;
    let pos = tables.position.gather_rows(positions)?;
    let ty = tables.token_type.gather_rows(type_ids)?;
    tok.add(&pos)?.add(&ty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_query_key_attends_fully() {
        let q = Tensor::constant(&[1, 1], vec![2.0]).unwrap();
        let k = Tensor::constant(&[1, 1], vec![3.0]).unwrap();
        let v = Tensor::constant(&[1, 1], vec![7.0]).unwrap();
        let (z, w) = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert_eq!(w.to_vec(), vec![1.0]);
        assert_eq!(z.to_vec(), vec![7.0]);
    }

    #[test]
    fn identical_keys_split_weight_evenly() {
        let q = Tensor::constant(&[1, 2], vec![1.0, -1.0]).unwrap();
        let k = Tensor::constant(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let v = Tensor::constant(&[2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (z, w) = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert_eq!(w.to_vec(), vec![0.5, 0.5]);
        assert!(close(&z.to_vec(), &[3.0, 5.0], 1e-12), "z is the value mean");
    }

    #[test]
    fn all_keys_identical_means_uniform_over_allowed() {
        let q = Tensor::constant(&[1, 2], vec![0.3, 0.9]).unwrap();
        let k = Tensor::constant(&[4, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let v = Tensor::constant(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = AttentionMask::new(1, 4, vec![true, true, false, true]).unwrap();
        let (z, w) = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        let wv = w.to_vec();
        assert!(close(&wv, &[1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0], 1e-12));
        assert_eq!(wv[2].to_bits(), 0.0f64.to_bits());
        assert!(close(&z.to_vec(), &[(1.0 + 2.0 + 4.0) / 3.0], 1e-12));
    }

    #[test]
    fn masked_key_gets_exact_zero_and_no_content_leak() {
        let q = Tensor::constant(&[1, 1], vec![1.0]).unwrap();
        let k = Tensor::constant(&[2, 1], vec![0.2, 0.9]).unwrap();
        let mask = AttentionMask::new(1, 2, vec![true, false]).unwrap();
        let v_a = Tensor::constant(&[2, 1], vec![4.0, 1000.0]).unwrap();
        let v_b = Tensor::constant(&[2, 1], vec![4.0, -3.5]).unwrap();
        let (z_a, w) = scaled_dot_attention(&q, &k, &v_a, Some(&mask)).unwrap();
        let (z_b, _) = scaled_dot_attention(&q, &k, &v_b, Some(&mask)).unwrap();
        assert_eq!(w.to_vec(), vec![1.0, 0.0]);
        assert_eq!(bits(&z_a.to_vec()), bits(&z_b.to_vec()));
        assert_eq!(z_a.to_vec(), vec![4.0]);
    }

    #[test]
    fn fully_masked_query_row_outputs_zeros() {
        let x = Tensor::constant(&[2, 2], vec![0.3, 0.4, -0.5, 0.6]).unwrap();
        let mask = AttentionMask::from_presence(&[true, false]);
        let (z, w) = scaled_dot_attention(&x, &x, &x, Some(&mask)).unwrap();
        let wv = w.to_vec();
        assert_eq!(&wv[2..], &[0.0, 0.0], "absent query row has all-zero weights");
        assert_eq!(&z.to_vec()[2..], &[0.0, 0.0]);
        assert_eq!(wv[..2], [1.0, 0.0]);
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        let mut rng = SeedRng::new(17);
        let (n_q, n_k, d) = (3, 4, 5);
        let mut qv = vec![0.0; n_q * d];
        let mut kv = vec![0.0; n_k * d];
        let mut vv = vec![0.0; n_k * d];
        rng.fill_gaussian(&mut qv, 0.0, 1.0);
        rng.fill_gaussian(&mut kv, 0.0, 1.0);
        rng.fill_gaussian(&mut vv, 0.0, 1.0);
        let q = Tensor::constant(&[n_q, d], qv.clone()).unwrap();
        let k = Tensor::constant(&[n_k, d], kv.clone()).unwrap();
        let v = Tensor::constant(&[n_k, d], vv.clone()).unwrap();
        let (z, w) = scaled_dot_attention(&q, &k, &v, None).unwrap();

        // independent scalar reimplementation of score/softmax/mix
        let mut w_want = vec![0.0; n_q * n_k];
        let mut z_want = vec![0.0; n_q * d];
        for i in 0..n_q {
            let mut scores = vec![0.0; n_k];
            for j in 0..n_k {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += qv[i * d + c] * kv[j * d + c];
                }
                scores[j] = dot / (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let zsum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for j in 0..n_k {
                w_want[i * n_k + j] = (scores[j] - max).exp() / zsum;
            }
            for c in 0..d {
                for j in 0..n_k {
                    z_want[i * d + c] += w_want[i * n_k + j] * vv[j * d + c];
                }
            }
        }
        assert!(close(&w.to_vec(), &w_want, 1e-12));
        assert!(close(&z.to_vec(), &z_want, 1e-12));
    }

    #[test]
    fn query_key_dim_mismatch_is_an_error() {
        let q = Tensor::constant(&[1, 2], vec![0.0; 2]).unwrap();
        let k = Tensor::constant(&[1, 3], vec![0.0; 3]).unwrap();
        let v = Tensor::constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(scaled_dot_attention(&q, &k, &v, None).is_err());
    }

    #[test]
    fn single_identity_head_reduces_to_plain_attention() {
        let mut rng = SeedRng::new(5);
        let mut xv = vec![0.0; 3 * 4];
        rng.fill_gaussian(&mut xv, 0.0, 1.0);
        let x = Tensor::constant(&[3, 4], xv).unwrap();
        let p = MultiHeadParams::single_identity(4);
        let site = TraceSite {
            subnet: Subnet::Fusion,
            layer: 0,
        };
        let got = multi_head(&x, &x, &p, None, None, site).unwrap();
        let (z, _) = scaled_dot_attention(&x, &x, &x, None).unwrap();
        assert!(close(&got.to_vec(), &z.to_vec(), 1e-12));
    }

    #[test]
    fn two_heads_match_manual_composition() {
        let mut rng = SeedRng::new(29);
        let d = 6;
        let p = MultiHeadParams::init(d, 2, &mut rng).unwrap();
        let mut xv = vec![0.0; 4 * d];
        rng.fill_gaussian(&mut xv, 0.0, 1.0);
        let x = Tensor::constant(&[4, d], xv).unwrap();
        let site = TraceSite {
            subnet: Subnet::Fusion,
            layer: 0,
        };
        let got = multi_head(&x, &x, &p, None, None, site).unwrap();

        let mut zs = Vec::new();
        for h in 0..2 {
            let q = x.matmul(&p.w_q[h]).unwrap();
            let k = x.matmul(&p.w_k[h]).unwrap();
            let v = x.matmul(&p.w_v[h]).unwrap();
            let (z, _) = scaled_dot_attention(&q, &k, &v, None).unwrap();
            zs.push(z);
        }
        let want = Tensor::concat_cols(&zs).unwrap().matmul(&p.w_o).unwrap();
        assert!(close(&got.to_vec(), &want.to_vec(), 1e-12));
    }

    #[test]
    fn cross_attention_takes_keys_from_memory() {
        let mut rng = SeedRng::new(31);
        let d = 4;
        let p = MultiHeadParams::init(d, 2, &mut rng).unwrap();
        let mut qv = vec![0.0; 2 * d];
        let mut mv = vec![0.0; 5 * d];
        rng.fill_gaussian(&mut qv, 0.0, 1.0);
        rng.fill_gaussian(&mut mv, 0.0, 1.0);
        let x_q = Tensor::constant(&[2, d], qv).unwrap();
        let memory = Tensor::constant(&[5, d], mv).unwrap();
        let mut sink = TraceSink::new();
        let site = TraceSite {
            subnet: Subnet::DecoderCross,
            layer: 0,
        };
        let out = multi_head(&x_q, &memory, &p, None, Some(&mut sink), site).unwrap();
        assert_eq!(out.shape(), &[2, d]);
        assert_eq!(sink.records.len(), 2, "one record per head");
        for r in &sink.records {
            assert_eq!((r.n_q, r.n_k), (2, 5));
            for i in 0..r.n_q {
                let s: f64 = r.weights[i * r.n_k..(i + 1) * r.n_k].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "weight row sums to {s}");
            }
        }
    }

    #[test]
    fn head_count_must_divide_model_dim() {
        let mut rng = SeedRng::new(1);
        assert!(MultiHeadParams::init(8, 3, &mut rng).is_err());
        assert!(MultiHeadParams::init(8, 0, &mut rng).is_err());
        assert!(MultiHeadParams::init(8, 2, &mut rng).is_ok());
    }

    #[test]
    fn self_attention_is_permutation_equivariant_bitwise() {
        let mut rng = SeedRng::new(77);
        let (n, d) = (5, 6);
        let p = MultiHeadParams::init(d, 2, &mut rng).unwrap();
        let mut xv = vec![0.0; n * d];
        rng.fill_gaussian(&mut xv, 0.0, 1.0);
        let present = [true, true, false, true, true];
        let perm = [3usize, 0, 4, 2, 1];

        let x = Tensor::constant(&[n, d], xv.clone()).unwrap();
        let mask = AttentionMask::from_presence(&present);
        let site = TraceSite {
            subnet: Subnet::Fusion,
            layer: 0,
        };
        let out = multi_head(&x, &x, &p, Some(&mask), None, site).unwrap();

        let mut xp = vec![0.0; n * d];
        let mut pp = [false; 5];
        for (new_row, &old_row) in perm.iter().enumerate() {
            xp[new_row * d..(new_row + 1) * d]
                .copy_from_slice(&xv[old_row * d..(old_row + 1) * d]);
            pp[new_row] = present[old_row];
        }
        let x2 = Tensor::constant(&[n, d], xp).unwrap();
        let mask2 = AttentionMask::from_presence(&pp);
        let out2 = multi_head(&x2, &x2, &p, Some(&mask2), None, site).unwrap();

        let a = out.to_vec();
        let b = out2.to_vec();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(
                bits(&a[old_row * d..(old_row + 1) * d]),
                bits(&b[new_row * d..(new_row + 1) * d]),
                "row {old_row} must move to {new_row} with identical bits"
            );
        }
    }

    #[test]
    fn presence_mask_blocks_absent_rows_both_ways() {
        let m = AttentionMask::from_presence(&[true, true, false]);
        for i in 0..3 {
            assert!(!m.is_allowed(i, 2));
            assert!(!m.is_allowed(2, i));
        }
        assert!(m.is_allowed(0, 1) && m.is_allowed(1, 0) && m.is_allowed(0, 0));
    }

    #[test]
    fn embed_sums_three_tables() {
        let mut rng = SeedRng::new(13);
        let tables = EmbeddingTables::init(10, 6, 4, &mut rng);
        let out = embed(&[5], &[1], &[0], &tables).unwrap();
        let tok = tables.token.to_vec();
        let pos = tables.position.to_vec();
        let ty = tables.token_type.to_vec();
        let want: Vec<f64> = (0..4)
            .map(|c| tok[5 * 4 + c] + pos[c] + ty[4 + c])
            .collect();
        assert_eq!(bits(&out.to_vec()), bits(&want));
    }

    #[test]
    fn embed_rejects_out_of_vocab_ids() {
        let mut rng = SeedRng::new(13);
        let tables = EmbeddingTables::init(10, 6, 4, &mut rng);
        assert!(embed(&[10], &[0], &[0], &tables).is_err());
        assert!(embed(&[0], &[3], &[0], &tables).is_err());
        assert!(embed(&[0], &[0], &[6], &tables).is_err());
        assert!(embed(&[0, 1], &[0], &[0, 1], &tables).is_err(), "ragged inputs");
    }
}
