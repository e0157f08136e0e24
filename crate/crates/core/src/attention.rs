//! Single-head attention kernels.
//!
//! Every kernel here is a pure function of its inputs. Multi-head use is
//! layered on top with [`multi_head`], which splits feature columns, applies
//! a kernel per head and concatenates the results.

use crate::error::{Error, Result};
use crate::tensor::TokenMatrix;

/// Blend weight in `[0, 1]` (the deformation weight α or the temporal weight β).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct BlendWeight(f64);

impl BlendWeight {
    pub const ZERO: BlendWeight = BlendWeight(0.0);
    pub const ONE: BlendWeight = BlendWeight(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::invalid(format!(
                "blend weight {value} outside [0, 1]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for BlendWeight {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<BlendWeight> for f64 {
    fn from(w: BlendWeight) -> f64 {
        w.0
    }
}

fn check_qk(q: &TokenMatrix, k: &TokenMatrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            what: "key dimension d_k (Q.cols vs K.cols)",
            expected: q.cols(),
            found: k.cols(),
        });
    }
    Ok(())
}

fn check_kv(k: &TokenMatrix, v: &TokenMatrix) -> Result<()> {
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            what: "token count (K.rows vs V.rows)",
            expected: k.rows(),
            found: v.rows(),
        });
    }
    Ok(())
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Writes `exp(s_j − max s)` for the scaled scores `s_j` of one query row
/// into `w` and returns their sum.
fn unnormalized_weights(q: &[f64], k: &TokenMatrix, scale: f64, w: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (wj, kr) in w.iter_mut().zip(k.data().chunks_exact(k.cols())) {
        let s = dot(q, kr) * scale;
        *wj = s;
        max = max.max(s);
    }
    let mut sum = 0.0;
    for wj in w.iter_mut() {
        *wj = (*wj - max).exp();
        sum += *wj;
    }
    sum
}

/// Row-stochastic attention weights `Softmax(QKᵀ / √d_k)`.
pub fn attention_map(q: &TokenMatrix, k: &TokenMatrix) -> Result<TokenMatrix> {
    check_qk(q, k)?;
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut out = TokenMatrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let w = out.row_mut(i);
        let sum = unnormalized_weights(q.row(i), k, scale, w);
        for wj in w.iter_mut() {
            *wj /= sum;
        }
    }
    Ok(out)
}

/// `Softmax(QKᵀ / √d_k) V` with a max-subtracted softmax. The normalization
/// is applied once to each accumulated output element.
pub fn attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    check_qk(q, k)?;
    check_kv(k, v)?;
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut out = TokenMatrix::zeros(q.rows(), v.cols());
    let mut w = vec![0.0; k.rows()];
    for i in 0..q.rows() {
        let (qi, o) = (q.row(i), out.row_mut(i));
        match (k.cols(), v.cols()) {
            (16, 16) => attend_row::<16, 16>(qi, k, v, scale, &mut w, o),
            (8, 8) => attend_row::<8, 8>(qi, k, v, scale, &mut w, o),
            _ => {
                let sum = unnormalized_weights(qi, k, scale, &mut w);
                for (&wj, vr) in w.iter().zip(v.data().chunks_exact(v.cols())) {
                    for (o, &x) in o.iter_mut().zip(vr) {
                        *o += wj * x;
                    }
                }
                for o in o.iter_mut() {
                    *o /= sum;
                }
            }
        }
    }
    Ok(out)
}

/// One output row for fixed head widths; same arithmetic as the generic
/// path with the query and accumulator held in registers.
fn attend_row<const D: usize, const DV: usize>(
    q: &[f64],
    k: &TokenMatrix,
    v: &TokenMatrix,
    scale: f64,
    w: &mut [f64],
    o: &mut [f64],
) {
    let q: [f64; D] = q.try_into().expect("query width checked");
    let (keys, _) = k.data().as_chunks::<D>();
    let (values, _) = v.data().as_chunks::<DV>();
    let mut max = f64::NEG_INFINITY;
    for (wj, kr) in w.iter_mut().zip(keys) {
        let s = dot(&q, kr) * scale;
        *wj = s;
        max = max.max(s);
    }
    let mut sum = 0.0;
    for wj in w.iter_mut() {
        *wj = (*wj - max).exp();
        sum += *wj;
    }
    let mut acc = [0.0; DV];
    for (&wj, vr) in w.iter().zip(values) {
        for c in 0..DV {
            acc[c] += wj * vr[c];
        }
    }
    for (o, a) in o.iter_mut().zip(acc) {
        *o = a / sum;
    }
}

/// Attention against keys and values blended between source and target:
/// `Attn(Q, (1−α)K_src + αK_tgt, (1−α)V_src + αV_tgt)`.
pub fn kv_fused_attention(
    q: &TokenMatrix,
    k_src: &TokenMatrix,
    v_src: &TokenMatrix,
    k_tgt: &TokenMatrix,
    v_tgt: &TokenMatrix,
    alpha: BlendWeight,
) -> Result<TokenMatrix> {
    if !k_src.same_shape(k_tgt) {
        return Err(Error::Shape {
            what: "source/target key token grids",
            expected: k_src.rows(),
            found: k_tgt.rows(),
        });
    }
    if !v_src.same_shape(v_tgt) {
        return Err(Error::Shape {
            what: "source/target value token grids",
            expected: v_src.rows(),
            found: v_tgt.rows(),
        });
    }
    let k = k_src.lerp(k_tgt, alpha.value())?;
    let v = v_src.lerp(v_tgt, alpha.value())?;
    attention(q, &k, &v)
}

/// Convex blend of two independently computed attention outputs. Only the
/// needed side is evaluated at the endpoints.
fn blend_outputs(
    q: &TokenMatrix,
    first: (&TokenMatrix, &TokenMatrix),
    second: (&TokenMatrix, &TokenMatrix),
    w: BlendWeight,
) -> Result<TokenMatrix> {
    check_qk(q, first.0)?;
    check_kv(first.0, first.1)?;
    check_qk(q, second.0)?;
    check_kv(second.0, second.1)?;
    if first.1.cols() != second.1.cols() {
        return Err(Error::Shape {
            what: "value dimension of blended outputs",
            expected: first.1.cols(),
            found: second.1.cols(),
        });
    }
    if w.value() == 0.0 {
        attention(q, first.0, first.1)
    } else if w.value() == 1.0 {
        attention(q, second.0, second.1)
    } else {
        let a = attention(q, first.0, first.1)?;
        let b = attention(q, second.0, second.1)?;
        a.lerp(&b, w.value())
    }
}

/// `(1−α)·Attn(Q, K_src, V_src) + α·Attn(Q, K_tgt, V_tgt)`. Source and
/// target may have different token counts.
pub fn morphing_cross_attention(
    q: &TokenMatrix,
    k_src: &TokenMatrix,
    v_src: &TokenMatrix,
    k_tgt: &TokenMatrix,
    v_tgt: &TokenMatrix,
    alpha: BlendWeight,
) -> Result<TokenMatrix> {
    blend_outputs(q, (k_src, v_src), (k_tgt, v_tgt), alpha)
}

/// `(1−β)·Attn(Q, K_n, V_n) + β·Attn(Q, K_prev, V_prev)`.
pub fn temporal_fused_self_attention(
    q: &TokenMatrix,
    k_cur: &TokenMatrix,
    v_cur: &TokenMatrix,
    k_prev: &TokenMatrix,
    v_prev: &TokenMatrix,
    beta: BlendWeight,
) -> Result<TokenMatrix> {
    blend_outputs(q, (k_cur, v_cur), (k_prev, v_prev), beta)
}

/// Splits the columns of every input into `heads` equal slices, applies
/// `kernel` to the slices of each head and concatenates the outputs.
pub fn multi_head<F>(heads: usize, inputs: &[&TokenMatrix], mut kernel: F) -> Result<TokenMatrix>
where
    F: FnMut(usize, &[TokenMatrix]) -> Result<TokenMatrix>,
{
    if heads == 0 {
        return Err(Error::invalid("head count must be positive"));
    }
    for m in inputs {
        if m.cols() % heads != 0 {
            return Err(Error::Shape {
                what: "feature columns divisible by head count",
                expected: heads * (m.cols() / heads + 1),
                found: m.cols(),
            });
        }
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let sliced: Vec<TokenMatrix> = inputs
            .iter()
            .map(|m| {
                let w = m.cols() / heads;
                m.column_slice(h * w, (h + 1) * w)
            })
            .collect();
        outs.push(kernel(h, &sliced)?);
    }
    TokenMatrix::hconcat(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_gets_full_weight() {
        let out = attention(&m(&[&[1.0]]), &m(&[&[1.0]]), &m(&[&[7.0]])).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn zero_query_averages_values() {
        let out = attention(
            &m(&[&[0.0, 0.0]]),
            &m(&[&[0.3, -2.0], &[5.0, 1.0]]),
            &m(&[&[2.0], &[4.0]]),
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn closed_form_two_key_case() {
        let q = m(&[&[1.0, 0.0]]);
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let sigma = e / (e + 1.0);
        let out = attention(&q, &k, &m(&[&[1.0], &[0.0]])).unwrap();
        assert!((out.get(0, 0) - sigma).abs() < 1e-12);
        assert!((sigma - 0.6698).abs() < 1e-4);
        let map = attention_map(&q, &k).unwrap();
        assert!((map.get(0, 0) - sigma).abs() < 1e-12);
        assert!((map.get(0, 1) - (1.0 - sigma)).abs() < 1e-12);
    }

    #[test]
    fn single_key_map_is_all_ones() {
        let map = attention_map(&m(&[&[1.0, 2.0], &[-3.0, 0.5]]), &m(&[&[0.1, 0.2]])).unwrap();
        assert_eq!(map.data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_dimension() {
        let err = attention(&m(&[&[1.0, 2.0]]), &m(&[&[1.0]]), &m(&[&[1.0]])).unwrap_err();
        assert!(err.to_string().contains("d_k"));
        let err = attention(&m(&[&[1.0]]), &m(&[&[1.0]]), &m(&[&[1.0], &[2.0]])).unwrap_err();
        assert!(err.to_string().contains("token count"));
        let q = m(&[&[1.0]]);
        let k1 = m(&[&[1.0]]);
        let k2 = m(&[&[1.0], &[2.0]]);
        assert!(kv_fused_attention(&q, &k1, &k1, &k2, &k2, BlendWeight::ZERO).is_err());
        let v3 = m(&[&[1.0, 1.0]]);
        assert!(morphing_cross_attention(&q, &k1, &k1, &k1, &v3, BlendWeight::ZERO).is_err());
        assert!(temporal_fused_self_attention(&q, &k1, &k1, &k1, &v3, BlendWeight::ONE).is_err());
    }

    #[test]
    fn kv_fused_midpoint_with_shared_keys() {
        let q = m(&[&[0.4, -1.0], &[1.2, 0.3]]);
        let k = m(&[&[1.0, 0.5], &[-0.2, 0.8], &[0.0, -1.0]]);
        let vs = m(&[&[1.0], &[2.0], &[3.0]]);
        let vt = m(&[&[-1.0], &[0.0], &[5.0]]);
        let mid = m(&[&[0.0], &[1.0], &[4.0]]);
        let half = BlendWeight::new(0.5).unwrap();
        let fused = kv_fused_attention(&q, &k, &vs, &k, &vt, half).unwrap();
        let direct = attention(&q, &k, &mid).unwrap();
        for (a, b) in fused.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mca_allows_different_token_counts() {
        let q = m(&[&[0.4, -1.0]]);
        let ks = m(&[&[1.0, 0.5]]);
        let vs = m(&[&[1.0, 0.0]]);
        let kt = m(&[&[1.0, 0.5], &[0.0, 2.0]]);
        let vt = m(&[&[0.0, 1.0], &[2.0, 2.0]]);
        let w = BlendWeight::new(0.3).unwrap();
        let out = morphing_cross_attention(&q, &ks, &vs, &kt, &vt, w).unwrap();
        let a = attention(&q, &ks, &vs).unwrap();
        let b = attention(&q, &kt, &vt).unwrap();
        for c in 0..2 {
            assert_eq!(out.get(0, c), (1.0 - 0.3) * a.get(0, c) + 0.3 * b.get(0, c));
        }
    }

    #[test]
    fn tfsa_default_beta_blend() {
        let q = m(&[&[0.4, -1.0], &[0.0, 1.0]]);
        let kn = m(&[&[1.0, 0.5], &[0.3, 0.3]]);
        let vn = m(&[&[1.0], &[-1.0]]);
        let kp = m(&[&[0.0, 2.0]]);
        let vp = m(&[&[4.0]]);
        let beta = BlendWeight::new(0.2).unwrap();
        let out = temporal_fused_self_attention(&q, &kn, &vn, &kp, &vp, beta).unwrap();
        let a = attention(&q, &kn, &vn).unwrap();
        let b = attention(&q, &kp, &vp).unwrap();
        for i in 0..2 {
            assert_eq!(out.get(i, 0), (1.0 - 0.2) * a.get(i, 0) + 0.2 * b.get(i, 0));
        }
    }

    #[test]
    fn blend_weight_bounds() {
        assert!(BlendWeight::new(-0.1).is_err());
        assert!(BlendWeight::new(1.1).is_err());
        assert!(BlendWeight::new(f64::NAN).is_err());
        assert_eq!(BlendWeight::new(0.25).unwrap().value(), 0.25);
    }

    #[test]
    fn multi_head_matches_manual_split() {
        let q = m(&[&[1.0, 0.0, 0.5, 0.5]]);
        let k = m(&[&[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 0.0]]);
        let v = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = multi_head(2, &[&q, &k, &v], |_, p| attention(&p[0], &p[1], &p[2])).unwrap();
        let h0 = attention(
            &q.column_slice(0, 2),
            &k.column_slice(0, 2),
            &v.column_slice(0, 1),
        )
        .unwrap();
        let h1 = attention(
            &q.column_slice(2, 4),
            &k.column_slice(2, 4),
            &v.column_slice(1, 2),
        )
        .unwrap();
        assert_eq!(out.data(), &[h0.get(0, 0), h1.get(0, 0)]);
        assert!(multi_head(3, &[&q], |_, p| Ok(p[0].clone())).is_err());
    }
}
