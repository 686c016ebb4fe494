//! Independent straight-line reimplementation of the whole forward pass in
//! plain `f64` vectors, compared against the graph-built computation. The two
//! routes share no tensor code, so structural bugs in either cannot cancel.

use marmot_core::attention::MultiHeadParams;
use marmot_core::data::ImageFeatureMap;
use marmot_core::model::{forward, ModelConfig, PoolingMode, SegmentTag};
use marmot_core::transformer::{DecoderBlockParams, EncoderBlockParams, LayerNormParams};
use marmot_core::vocab::SEP;
use marmot_core::{MarmotParams, MultimodalExample, SeedRng, Tensor};

const TOL: f64 = 1e-12;

/// Row-major matrix of plain values.
#[derive(Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    v: Vec<f64>,
}

impl Mat {
    fn of(t: &Tensor) -> Mat {
        assert_eq!(t.rank(), 2, "oracle expects matrices");
        Mat {
            rows: t.shape()[0],
            cols: t.shape()[1],
            v: t.to_vec(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.cols..(i + 1) * self.cols]
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut v = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let x = a.v[i * a.cols + k];
            for j in 0..b.cols {
                v[i * b.cols + j] += x * b.v[k * b.cols + j];
            }
        }
    }
    Mat {
        rows: a.rows,
        cols: b.cols,
        v,
    }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Mat {
        rows: a.rows,
        cols: a.cols,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
    }
}

fn concat_cols(parts: &[Mat]) -> Mat {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut v = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            v.extend_from_slice(p.row(i));
        }
    }
    Mat { rows, cols, v }
}

fn concat_rows(parts: &[Mat]) -> Mat {
    let cols = parts[0].cols;
    let rows: usize = parts.iter().map(|p| p.rows).sum();
    let mut v = Vec::with_capacity(rows * cols);
    for p in parts {
        assert_eq!(p.cols, cols);
        v.extend_from_slice(&p.v);
    }
    Mat { rows, cols, v }
}

/// Attention with optional pair mask (row-major `n_q * n_k`). Disallowed
/// pairs are excluded before the softmax; fully excluded rows give zero
/// output rows, matching the sentinel semantics of the graph route.
fn attention_oracle(q: &Mat, k: &Mat, v: &Mat, mask: Option<&[bool]>) -> Mat {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut out = vec![0.0; q.rows * v.cols];
    for i in 0..q.rows {
        let allowed = |j: usize| mask.is_none_or(|m| m[i * k.rows + j]);
        let mut scores = Vec::with_capacity(k.rows);
        for j in 0..k.rows {
            let s: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            scores.push(s * scale);
        }
        let max = (0..k.rows)
            .filter(|&j| allowed(j))
            .map(|j| scores[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let z: f64 = (0..k.rows)
            .filter(|&j| allowed(j))
            .map(|j| (scores[j] - max).exp())
            .sum();
        for j in 0..k.rows {
            if !allowed(j) {
                continue;
            }
            let w = (scores[j] - max).exp() / z;
            for c in 0..v.cols {
                out[i * v.cols + c] += w * v.v[j * v.cols + c];
            }
        }
    }
    Mat {
        rows: q.rows,
        cols: v.cols,
        v: out,
    }
}

fn multi_head_oracle(x_q: &Mat, x_kv: &Mat, p: &MultiHeadParams, mask: Option<&[bool]>) -> Mat {
    let mut heads = Vec::new();
    for h in 0..p.heads {
        let q = matmul(x_q, &Mat::of(&p.w_q[h]));
        let k = matmul(x_kv, &Mat::of(&p.w_k[h]));
        let v = matmul(x_kv, &Mat::of(&p.w_v[h]));
        heads.push(attention_oracle(&q, &k, &v, mask));
    }
    matmul(&concat_cols(&heads), &Mat::of(&p.w_o))
}

fn layer_norm_oracle(x: &Mat, ln: &LayerNormParams) -> Mat {
    let gamma = ln.gamma.to_vec();
    let beta = ln.beta.to_vec();
    let mut v = vec![0.0; x.v.len()];
    for i in 0..x.rows {
        let row = x.row(i);
        let mean: f64 = row.iter().sum::<f64>() / x.cols as f64;
        let var: f64 =
            row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / x.cols as f64;
        let denom = (var + ln.eps).sqrt();
        for j in 0..x.cols {
            v[i * x.cols + j] = gamma[j] * (row[j] - mean) / denom + beta[j];
        }
    }
    Mat {
        rows: x.rows,
        cols: x.cols,
        v,
    }
}

fn feed_forward_oracle(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let mut h = matmul(x, w1);
    for i in 0..h.rows {
        for j in 0..h.cols {
            let v = h.v[i * h.cols + j] + b1[j];
            h.v[i * h.cols + j] = if v > 0.0 { v } else { 0.0 };
        }
    }
    let mut out = matmul(&h, w2);
    for i in 0..out.rows {
        for j in 0..out.cols {
            out.v[i * out.cols + j] += b2[j];
        }
    }
    out
}

fn encoder_block_oracle(x: &Mat, mask: Option<&[bool]>, b: &EncoderBlockParams) -> Mat {
    let attn = multi_head_oracle(x, x, &b.attn, mask);
    let h = layer_norm_oracle(&add(x, &attn), &b.ln_attn);
    let ff = feed_forward_oracle(
        &h,
        &Mat::of(&b.ff.w1),
        &b.ff.b1.to_vec(),
        &Mat::of(&b.ff.w2),
        &b.ff.b2.to_vec(),
    );
    layer_norm_oracle(&add(&h, &ff), &b.ln_ff)
}

fn decoder_block_oracle(x: &Mat, memory: &Mat, b: &DecoderBlockParams) -> Mat {
    let sa = multi_head_oracle(x, x, &b.self_attn, None);
    let a = layer_norm_oracle(&add(x, &sa), &b.ln_self);
    let ca = multi_head_oracle(&a, memory, &b.cross_attn, None);
    let c = layer_norm_oracle(&add(&a, &ca), &b.ln_cross);
    let ff = feed_forward_oracle(
        &c,
        &Mat::of(&b.ff.w1),
        &b.ff.b1.to_vec(),
        &Mat::of(&b.ff.w2),
        &b.ff.b2.to_vec(),
    );
    layer_norm_oracle(&add(&c, &ff), &b.ln_ff)
}

fn embed_oracle(
    ids: &[usize],
    types: &[usize],
    positions: &[usize],
    params: &MarmotParams,
) -> Mat {
    let token = Mat::of(&params.tables.token);
    let position = Mat::of(&params.tables.position);
    let ty = Mat::of(&params.tables.token_type);
    let d = token.cols;
    let mut v = Vec::with_capacity(ids.len() * d);
    for ((&id, &t), &p) in ids.iter().zip(types).zip(positions) {
        for j in 0..d {
            v.push(token.row(id)[j] + position.row(p)[j] + ty.row(t)[j]);
        }
    }
    Mat {
        rows: ids.len(),
        cols: d,
        v,
    }
}

fn flatten_captions_oracle(captions: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for (i, c) in captions.iter().enumerate() {
        for (p, &tok) in c.iter().enumerate() {
            ids.push(tok);
            positions.push(p);
        }
        if i + 1 < captions.len() {
            ids.push(SEP);
            positions.push(c.len());
        }
    }
    (ids, positions)
}

/// The whole forward pass on plain values. `presence` marks which fused rows
/// are real; pairs with an absent side are excluded from fusion attention.
fn forward_oracle(example: &MultimodalExample, params: &MarmotParams) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;

    // image path: cells through the projection, row-major
    let map = example.image.as_ref().expect("oracle covers the multimodal case");
    let proj = Mat::of(&params.proj);
    let (hh, ww, cc) = (map.height(), map.width(), map.channels());
    let mut cells = Vec::with_capacity(hh * ww * cc);
    for h in 0..hh {
        for w in 0..ww {
            for ch in 0..cc {
                cells.push(map.at(ch, h, w));
            }
        }
    }
    let cell_mat = Mat {
        rows: hh * ww,
        cols: cc,
        v: cells,
    };
    let image_rows = matmul(&cell_mat, &proj);

    // translation: caption tokens query the image rows
    let (cap_ids, cap_positions) = flatten_captions_oracle(&example.captions);
    let cap_types = vec![1usize; cap_ids.len()];
    let mut translated = embed_oracle(&cap_ids, &cap_types, &cap_positions, params);
    for block in &params.translation_decoder {
        translated = decoder_block_oracle(&translated, &image_rows, block);
    }

    // assembly: [CLS | text | captions | translated + type-3 row]
    let d = cfg.d_model;
    let cls = {
        let mut v = params.cls_embedding.to_vec();
        let pos = Mat::of(&params.tables.position);
        let ty = Mat::of(&params.tables.token_type);
        for j in 0..d {
            v[j] += pos.row(0)[j] + ty.row(0)[j];
        }
        Mat { rows: 1, cols: d, v }
    };
    let text_positions: Vec<usize> = (0..example.text.len()).collect();
    let text_rows = embed_oracle(
        &example.text,
        &vec![0; example.text.len()],
        &text_positions,
        params,
    );
    let cap_rows = embed_oracle(&cap_ids, &cap_types, &cap_positions, params);
    let t3 = Mat::of(&params.tables.token_type);
    let mut image_fused = translated.clone();
    for i in 0..image_fused.rows {
        for j in 0..d {
            image_fused.v[i * d + j] += t3.row(2)[j];
        }
    }
    let mut fused = concat_rows(&[cls, text_rows, cap_rows, image_fused]);

    // all segments are present in the multimodal case
    let n = fused.rows;
    let mask = vec![true; n * n];
    for block in &params.fusion_encoder {
        fused = encoder_block_oracle(&fused, Some(&mask), block);
    }

    let representation: Vec<f64> = match cfg.pooling {
        PoolingMode::Cls => fused.row(0).to_vec(),
        PoolingMode::Mean => {
            let mut acc = vec![0.0; d];
            for i in 1..n {
                for j in 0..d {
                    acc[j] += fused.row(i)[j];
                }
            }
            acc.iter().map(|x| x / (n - 1) as f64).collect()
        }
    };

    let rep = Mat {
        rows: 1,
        cols: d,
        v: representation.clone(),
    };
    let logits = feed_forward_oracle(
        &rep,
        &Mat::of(&params.classifier.w1),
        &params.classifier.b1.to_vec(),
        &Mat::of(&params.classifier.w2),
        &params.classifier.b2.to_vec(),
    );
    (logits.v, representation)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors must have equal length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn test_config(pooling: PoolingMode) -> ModelConfig {
    ModelConfig {
        d_model: 12,
        heads: 3,
        encoder_layers: 2,
        decoder_layers: 2,
        d_ff: 20,
        vocab_size: 11,
        max_positions: 10,
        k_hidden: 6,
        image_channels: 3,
        pooling,
    }
}

fn test_example(rng: &mut SeedRng) -> MultimodalExample {
    let values: Vec<f64> = (0..3 * 2 * 3).map(|_| rng.gaussian(0.0, 1.0)).collect();
    MultimodalExample {
        id: "oracle".into(),
        text: vec![5, 9, 6, 10],
        captions: vec![vec![7, 8], vec![9]],
        image: Some(ImageFeatureMap::new(3, 2, 3, values).unwrap()),
        label: Some(1),
    }
}

#[test]
fn graph_forward_matches_straight_line_oracle_cls() {
    for seed in 0..5 {
        let mut rng = SeedRng::new(500 + seed);
        let params = MarmotParams::init(&test_config(PoolingMode::Cls), &mut rng).unwrap();
        let example = test_example(&mut rng);
        let out = forward(&example, &params).unwrap();
        let (logits, representation) = forward_oracle(&example, &params);
        let logit_diff = max_abs_diff(&out.logits.to_vec(), &logits);
        let rep_diff = max_abs_diff(&out.representation.to_vec(), &representation);
        assert!(
            logit_diff < TOL,
            "seed {seed}: logits differ from the oracle by {logit_diff:e}"
        );
        assert!(
            rep_diff < TOL,
            "seed {seed}: representation differs from the oracle by {rep_diff:e}"
        );
    }
}

#[test]
fn graph_forward_matches_straight_line_oracle_mean() {
    for seed in 0..5 {
        let mut rng = SeedRng::new(600 + seed);
        let params = MarmotParams::init(&test_config(PoolingMode::Mean), &mut rng).unwrap();
        let example = test_example(&mut rng);
        let out = forward(&example, &params).unwrap();
        let (logits, representation) = forward_oracle(&example, &params);
        assert!(
            max_abs_diff(&out.logits.to_vec(), &logits) < TOL,
            "seed {seed}: logits differ from the oracle"
        );
        assert!(
            max_abs_diff(&out.representation.to_vec(), &representation) < TOL,
            "seed {seed}: representation differs from the oracle"
        );
    }
}

/// The layout the forward pass reports must describe exactly the sequence the
/// oracle assembled: CLS, text tokens, caption tokens with separators, then
/// one translated row per caption token (captions are the queries, so the
/// translation output has their length).
#[test]
fn layout_matches_oracle_assembly() {
    let mut rng = SeedRng::new(700);
    let params = MarmotParams::init(&test_config(PoolingMode::Cls), &mut rng).unwrap();
    let example = test_example(&mut rng);
    let out = forward(&example, &params).unwrap();
    let (cap_ids, _) = flatten_captions_oracle(&example.captions);
    let expected_len = 1 + example.text.len() + 2 * cap_ids.len();
    assert_eq!(out.layout.len(), expected_len);
    assert_eq!(out.layout.tags[0], SegmentTag::Cls);
    let text_ids: Vec<usize> = out
        .layout
        .token_ids
        .iter()
        .zip(&out.layout.tags)
        .filter(|(_, t)| **t == SegmentTag::Text)
        .map(|(id, _)| id.unwrap())
        .collect();
    assert_eq!(text_ids, example.text);
    let caption_ids: Vec<usize> = out
        .layout
        .token_ids
        .iter()
        .zip(&out.layout.tags)
        .filter(|(_, t)| **t == SegmentTag::Caption)
        .map(|(id, _)| id.unwrap())
        .collect();
    assert_eq!(caption_ids, cap_ids);
    assert_eq!(
        out.layout
            .tags
            .iter()
            .filter(|t| **t == SegmentTag::Image)
            .count(),
        cap_ids.len(),
        "one translated row per caption token"
    );
    assert!(out.layout.present.iter().all(|&p| p));
}
