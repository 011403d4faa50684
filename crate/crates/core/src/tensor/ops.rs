//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and, when recording is active,
//! captures a VJP closure over whatever it needs for the reverse pass.
//! Denominators are eps- or max-guarded so finite inputs never produce
//! NaN/Inf.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{axis_view, fmt_shape, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {} and {} differ",
            fmt_shape(a.shape()),
            fmt_shape(b.shape())
        )));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    /// Elementwise sum.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a + *b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g| vec![g.to_vec(), g.to_vec()],
        ))
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a - *b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g| vec![g.to_vec(), g.iter().map(|v| -*v).collect()],
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a * *b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let da = g.iter().zip(pb.data()).map(|(gv, bv)| *gv * *bv).collect();
                let db = g.iter().zip(pa.data()).map(|(gv, av)| *gv * *av).collect();
                vec![da, db]
            },
        ))
    }

    /// Multiply every entry by a constant.
    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![g.iter().map(|v| *v * c).collect()]
        })
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|v| v.max(E::zero())).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![g
                .iter()
                .zip(x.data())
                .map(|(gv, xv)| if *xv > E::zero() { *gv } else { E::zero() })
                .collect()]
        })
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh_op(&self) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|v| v.tanh()).collect();
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![g
                .iter()
                .zip(&y)
                .map(|(gv, yv)| *gv * (E::one() - *yv * *yv))
                .collect()]
        })
    }

    /// Matrix product of rank-2 tensors: [m x k] . [k x n] -> [m x n].
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_rank(2, "matmul lhs")?;
        other.check_rank(2, "matmul rhs")?;
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ, lhs {} rhs {}",
                fmt_shape(self.shape()),
                fmt_shape(other.shape())
            )));
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                // dA = g . B^T, dB = A^T . g
                let bt = transpose_raw(b.data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(a.data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                vec![da, db]
            },
        ))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor<E>> {
        self.check_rank(2, "transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let data = transpose_raw(self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], data, vec![self.clone()], move |g| {
            vec![transpose_raw(g, n, m)]
        }))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        if super::numel_of(&shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {} elements cannot fill shape {}",
                self.numel(),
                fmt_shape(&shape)
            )));
        }
        Ok(Tensor::from_op(shape, self.data().to_vec(), vec![self.clone()], |g| {
            vec![g.to_vec()]
        }))
    }

    /// Contiguous sub-range along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let (outer, axis_len, inner) = axis_view(self.shape(), axis)?;
        if start + len > axis_len {
            return Err(Error::Index(format!(
                "narrow: range {start}..{} exceeds axis length {axis_len}",
                start + len
            )));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let full_len = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g| {
            let mut dg = vec![E::zero(); full_len];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * axis_len + start) * inner;
                dg[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![dg]
        }))
    }

    /// Concatenate along `axis`. All parts must agree on the other axes.
    pub fn concat(axis: usize, parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Param("concat: empty part list".into()));
        }
        let rank = parts[0].rank();
        for p in parts {
            if p.rank() != rank {
                return Err(Error::Shape("concat: mixed ranks".into()));
            }
            for ax in 0..rank {
                if ax != axis && p.shape()[ax] != parts[0].shape()[ax] {
                    return Err(Error::Shape(format!(
                        "concat: shapes {} and {} differ off-axis",
                        fmt_shape(parts[0].shape()),
                        fmt_shape(p.shape())
                    )));
                }
            }
        }
        let (outer, _, inner) = axis_view(parts[0].shape(), axis)?;
        let axis_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_axis: usize = axis_lens.iter().sum();
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (p, alen) in parts.iter().zip(&axis_lens) {
                let base = o * alen * inner;
                data.extend_from_slice(&p.data()[base..base + alen * inner]);
            }
        }
        let lens = axis_lens.clone();
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<E>> = lens.iter().map(|l| vec![E::zero(); outer * l * inner]).collect();
            let mut src = 0;
            for o in 0..outer {
                for (gi, alen) in lens.iter().enumerate() {
                    let dst = o * alen * inner;
                    grads[gi][dst..dst + alen * inner].copy_from_slice(&g[src..src + alen * inner]);
                    src += alen * inner;
                }
            }
            grads
        }))
    }

    /// Gather rows of a [V x d] table into a [d x l] column-per-position
    /// stream. Gradient scatter-adds back into the table rows.
    pub fn embedding_lookup(table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
        table.check_rank(2, "embedding_lookup table")?;
        let (v, d) = (table.rows(), table.cols());
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding_lookup: id {id} outside table with {v} rows"
                )));
            }
        }
        let l = ids.len();
        let mut data = vec![E::zero(); d * l];
        for (t, &id) in ids.iter().enumerate() {
            for c in 0..d {
                data[c * l + t] = table.data()[id * d + c];
            }
        }
        let ids_owned = ids.to_vec();
        Ok(Tensor::from_op(vec![d, l], data, vec![table.clone()], move |g| {
            let mut dt = vec![E::zero(); v * d];
            for (t, &id) in ids_owned.iter().enumerate() {
                for c in 0..d {
                    dt[id * d + c] += g[c * l + t];
                }
            }
            vec![dt]
        }))
    }

    /// Sum of all entries (rank-0 result).
    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![total], vec![self.clone()], move |g| {
            vec![vec![g[0]; n]]
        })
    }

    /// Mean of all entries (rank-0 result).
    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        let inv = E::from_f64(1.0 / n as f64);
        let total: E = self.data().iter().copied().sum();
        Tensor::from_op(Vec::new(), vec![total * inv], vec![self.clone()], move |g| {
            vec![vec![g[0] * inv; n]]
        })
    }

    /// Softmax along `axis`, computed with max-subtraction. Every slice of
    /// the output sums to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, len, inner) = axis_view(self.shape(), axis)?;
        let mut out = vec![E::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = self.data()[at(0)];
                for k in 1..len {
                    max = max.max(self.data()[at(k)]);
                }
                let mut z = E::zero();
                for k in 0..len {
                    let e = (self.data()[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                // dx_k = y_k * (g_k - sum_j g_j y_j) per slice
                let mut dx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = E::zero();
                        for k in 0..len {
                            dot += g[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![dx]
            },
        ))
    }

    /// Normalize each slice along `axis` to zero mean and unit population
    /// variance, then apply the per-feature affine `gamma * x + beta`.
    /// `gamma`/`beta` length must equal the normalized dimension.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64, axis: usize) -> Result<Tensor<E>> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let (outer, len, inner) = axis_view(self.shape(), axis)?;
        if gamma.numel() != len || beta.numel() != len {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta lengths {}/{} do not match normalized dim {len}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let epse = E::from_f64(eps);
        let inv_len = E::from_f64(1.0 / len as f64);
        let mut out = vec![E::zero(); self.numel()];
        let mut xhat = vec![E::zero(); self.numel()];
        let mut inv_sigma = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mean = E::zero();
                for k in 0..len {
                    mean += self.data()[at(k)];
                }
                mean = mean * inv_len;
                let mut var = E::zero();
                for k in 0..len {
                    let d = self.data()[at(k)] - mean;
                    var += d * d;
                }
                var = var * inv_len;
                let isig = (var + epse).sqrt().recip();
                inv_sigma[o * inner + i] = isig;
                for k in 0..len {
                    let xh = (self.data()[at(k)] - mean) * isig;
                    xhat[at(k)] = xh;
                    out[at(k)] = gamma.data()[k] * xh + beta.data()[k];
                }
            }
        }
        let gm = gamma.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dx = vec![E::zero(); g.len()];
                let mut dgamma = vec![E::zero(); len];
                let mut dbeta = vec![E::zero(); len];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let isig = inv_sigma[o * inner + i];
                        let mut sum_gy = E::zero();
                        let mut sum_gyx = E::zero();
                        for k in 0..len {
                            let gy = g[at(k)] * gm.data()[k];
                            sum_gy += gy;
                            sum_gyx += gy * xhat[at(k)];
                            dgamma[k] += g[at(k)] * xhat[at(k)];
                            dbeta[k] += g[at(k)];
                        }
                        for k in 0..len {
                            let gy = g[at(k)] * gm.data()[k];
                            dx[at(k)] = (gy - (sum_gy + xhat[at(k)] * sum_gyx) * inv_len) * isig;
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            },
        ))
    }

    /// Inverted dropout: in training mode each entry is kept with
    /// probability 1-p and divided by 1-p; in eval mode this is the
    /// identity. `p` must be in [0, 1) when training.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<E>> {
        if training && !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout: p must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    E::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| vec![g.iter().zip(&mask).map(|(gv, m)| *gv * *m).collect()],
        ))
    }

    /// Sum over masked-in rows of -log softmax(logits_row)[target].
    ///
    /// `logits` is [l x V]; `targets` and `mask` have length l. Rows with
    /// `mask[i] == false` contribute exactly 0 and receive zero gradient,
    /// so the loss is invariant to their logits.
    pub fn masked_cross_entropy(logits: &Tensor<E>, targets: &[usize], mask: &[bool]) -> Result<Tensor<E>> {
        logits.check_rank(2, "masked_cross_entropy logits")?;
        let (l, v) = (logits.rows(), logits.cols());
        if targets.len() != l || mask.len() != l {
            return Err(Error::Shape(format!(
                "masked_cross_entropy: logits have {l} rows, targets {} and mask {}",
                targets.len(),
                mask.len()
            )));
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t >= v {
                return Err(Error::Index(format!(
                    "masked_cross_entropy: target id {t} at row {i} outside vocabulary of size {v}"
                )));
            }
        }
        // Per masked row: -(logit[t] - logsumexp(row)), with max-subtraction.
        let mut total = E::zero();
        let mut probs = vec![E::zero(); l * v];
        for i in 0..l {
            if !mask[i] {
                continue;
            }
            let row = &logits.data()[i * v..(i + 1) * v];
            let mut max = row[0];
            for &x in row.iter().skip(1) {
                max = max.max(x);
            }
            let mut z = E::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / z;
            }
            total += z.ln() - (row[targets[i]] - max);
        }
        let targets_owned = targets.to_vec();
        let mask_owned = mask.to_vec();
        Ok(Tensor::from_op(
            Vec::new(),
            vec![total],
            vec![logits.clone()],
            move |g| {
                let gs = g[0];
                let mut dl = vec![E::zero(); l * v];
                for i in 0..l {
                    if !mask_owned[i] {
                        continue;
                    }
                    for j in 0..v {
                        let indicator = if j == targets_owned[i] { E::one() } else { E::zero() };
                        dl[i * v + j] = gs * (probs[i * v + j] - indicator);
                    }
                }
                vec![dl]
            },
        ))
    }
}

pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == E::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * *bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<E: Element>(a: &[E], m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{a} vs {e} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity_case() {
        let i2 = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let x = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = i2.matmul(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_hand_computed_case() {
        // [[1,2],[3,4]] . [[1],[1]] = [[3],[7]]
        let a = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, vec![1.0, 1.0]);
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::<f64>::zeros(vec![2, 2]);
        let x = t2(2, 2, vec![5.0, -1.0, 2.0, 8.0]);
        let y = z.matmul(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_oracle_against_naive_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::uniform(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![4, 5], 1.0, &mut rng);
        let y = a.matmul(&b).unwrap();
        // independent triple loop
        let mut expect = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 5 + j];
                }
                expect[i * 5 + j] = acc;
            }
        }
        assert_close(y.data(), &expect, 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t2(2, 3, vec![0.0; 6]);
        let b = t2(2, 2, vec![0.0; 4]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_close(y.data(), &[0.5, 0.5], 1e-12);

        // [0, ln 3] -> [1/4, 3/4]
        let x = Tensor::<f64>::from_vec(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_close(y.data(), &[0.25, 0.75], 1e-12);
    }

    #[test]
    fn softmax_is_overflow_stable() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(vec![4, 7], 20.0, &mut rng);
        let y = x.softmax(1).unwrap();
        for i in 0..4 {
            let s: f64 = y.data()[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_beta() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![5.0, 5.0, 5.0]).unwrap();
        let gamma = Tensor::full(vec![3], 1.0);
        let beta = Tensor::full(vec![3], 0.0);
        let y = x.layer_norm(&gamma, &beta, 1e-5, 0).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population variance 1 -> [-1, 1] as eps -> 0
        let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 3.0]).unwrap();
        let gamma = Tensor::full(vec![2], 1.0);
        let beta = Tensor::full(vec![2], 0.0);
        let y = x.layer_norm(&gamma, &beta, 1e-12, 0).unwrap();
        assert_close(y.data(), &[-1.0, 1.0], 1e-6);

        // affine composition: gamma=2, beta=1 -> [-1, 3]
        let gamma = Tensor::full(vec![2], 2.0);
        let beta = Tensor::full(vec![2], 1.0);
        let y = x.layer_norm(&gamma, &beta, 1e-12, 0).unwrap();
        assert_close(y.data(), &[-1.0, 3.0], 1e-6);
    }

    #[test]
    fn relu_forward_cases() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::<f64>::from_vec(vec![3], vec![-3.0, -0.5, -1e9]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_on_both_sides() {
        for (x0, expect) in [(2.0, 1.0), (-2.0, 0.0)] {
            let x = Tensor::<f64>::param(vec![1], vec![x0]).unwrap();
            let y = x.relu().sum();
            y.backward().unwrap();
            assert_eq!(x.grad().unwrap()[0], expect);
        }
    }

    #[test]
    fn dropout_identity_paths() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.dropout(0.0, true, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        let y = x.dropout(0.7, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::zeros(vec![2]);
        assert!(x.dropout(1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_monte_carlo_expectation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::full(vec![100_000], 1.0);
        let y = x.dropout(0.1, true, &mut rng).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn masked_ce_full_mask_out_is_exactly_zero() {
        let logits = t2(3, 4, (0..12).map(|v| v as f64).collect());
        let loss = Tensor::masked_cross_entropy(&logits, &[0, 1, 2], &[false, false, false]).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn masked_ce_uniform_logits_closed_form() {
        // uniform logits, V=4, 2 masked-in rows -> 2 ln 4
        let logits = t2(3, 4, vec![0.0; 12]);
        let loss = Tensor::masked_cross_entropy(&logits, &[1, 2, 3], &[true, false, true]).unwrap();
        assert_eq!(loss.item(), 2.0 * 4.0f64.ln());
    }

    #[test]
    fn masked_ce_decreases_with_margin() {
        // one-hot-correct logits: loss shrinks monotonically as margin grows
        let mut prev = f64::INFINITY;
        for margin in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let logits = t2(1, 3, vec![margin, 0.0, 0.0]);
            let loss = Tensor::masked_cross_entropy(&logits, &[0], &[true]).unwrap();
            assert!(loss.item() < prev);
            prev = loss.item();
        }
    }

    #[test]
    fn masked_ce_rejects_out_of_range_target() {
        let logits = t2(1, 3, vec![0.0; 3]);
        let err = Tensor::masked_cross_entropy(&logits, &[3], &[true]).unwrap_err();
        assert!(matches!(err, Error::Index(_)));
    }

    #[test]
    fn masked_ce_invariant_to_masked_out_logits() {
        let base = t2(2, 3, vec![0.3, -0.7, 1.1, 0.0, 0.0, 0.0]);
        let perturbed = t2(2, 3, vec![0.3, -0.7, 1.1, 99.0, -5.0, 3.3]);
        let mask = [true, false];
        let a = Tensor::masked_cross_entropy(&base, &[2, 0], &mask).unwrap();
        let b = Tensor::masked_cross_entropy(&perturbed, &[2, 0], &mask).unwrap();
        assert_eq!(a.item(), b.item());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::<f64>::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_at_three() {
        let x = Tensor::<f64>::param(vec![1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        let y = Tensor::<f64>::param(vec![1], vec![5.0]).unwrap();
        let loss = y.add(&y).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap()[0], 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        // gradient of (f+g) == gradient of f plus gradient of g
        let make = || Tensor::<f64>::param(vec![2], vec![0.4, -1.2]).unwrap();

        let x = make();
        let f = x.mul(&x).unwrap().sum();
        let g = x.scale(3.0).sum();
        let combined = f.add(&g).unwrap();
        combined.backward().unwrap();
        let grad_combined = x.grad().unwrap();

        let x2 = make();
        let f2 = x2.mul(&x2).unwrap().sum();
        f2.backward().unwrap();
        let gf = x2.grad().unwrap();
        x2.zero_grad();
        let g2 = x2.scale(3.0).sum();
        g2.backward().unwrap();
        let gg = x2.grad().unwrap();

        for i in 0..2 {
            assert!((grad_combined[i] - (gf[i] + gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let x = t2(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let left = x.narrow(1, 0, 1).unwrap();
        let right = x.narrow(1, 1, 2).unwrap();
        let back = Tensor::concat(1, &[left, right]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn embedding_lookup_orientation() {
        // table rows become output columns
        let table = t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = Tensor::embedding_lookup(&table, &[2, 0]).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[5.0, 1.0, 6.0, 2.0]);
    }

    #[test]
    fn embedding_lookup_rejects_bad_id() {
        let table = t2(3, 2, vec![0.0; 6]);
        assert!(Tensor::embedding_lookup(&table, &[3]).is_err());
    }

    #[test]
    fn forward_ops_stay_finite_on_finite_inputs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::uniform(vec![6, 6], 50.0, &mut rng);
        let gamma = Tensor::full(vec![6], 1.0f32);
        let beta = Tensor::full(vec![6], 0.0f32);
        assert!(x.softmax(1).unwrap().all_finite());
        assert!(x.layer_norm(&gamma, &beta, 1e-5, 0).unwrap().all_finite());
        assert!(x.relu().all_finite());
        assert!(x.tanh_op().all_finite());
        assert!(x.matmul(&x).unwrap().all_finite());
    }
}
