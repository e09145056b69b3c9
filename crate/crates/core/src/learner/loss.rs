use ndarray::{Array2, ArrayView2};

use super::queue::EmbeddingQueue;
use crate::error::{Error, Result};

/// Contrastive loss of one query against one positive and a set of negatives.
/// Returns exactly 0 when there are no negatives.
pub fn info_nce(q: &[f64], k_pos: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let dot = |k: &[f64]| -> Result<f64> {
        if k.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                actual: k.len(),
            });
        }
        Ok(q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / tau)
    };
    let pos = dot(k_pos)?;
    let negs = negatives.iter().map(|k| dot(k)).collect::<Result<Vec<_>>>()?;
    Ok(nce_from_logits(pos, &negs))
}

/// `-log(e^pos / (e^pos + sum e^neg))`, evaluated with max subtraction.
pub fn nce_from_logits(pos: f64, negs: &[f64]) -> f64 {
    if negs.is_empty() {
        return 0.0;
    }
    let max_neg = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max_neg <= pos {
        negs.iter().map(|l| (l - pos).exp()).sum::<f64>().ln_1p()
    } else {
        let d = max_neg - pos;
        d + ((-d).exp() + negs.iter().map(|l| (l - max_neg).exp()).sum::<f64>()).ln()
    }
}

/// Softmax over `[pos, negs...]`: returns the weight of the positive and of each negative.
fn softmax_weights(pos: f64, negs: &[f64]) -> (f64, Vec<f64>) {
    let m = negs.iter().copied().fold(pos, f64::max);
    let ep = (pos - m).exp();
    let en: Vec<f64> = negs.iter().map(|l| (l - m).exp()).collect();
    let z = ep + en.iter().sum::<f64>();
    (ep / z, en.into_iter().map(|e| e / z).collect())
}

/// Query and key embeddings of one sub-space, one row per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceEmbeddings {
    pub q: Array2<f64>,
    pub k0: Array2<f64>,
    pub k1: Array2<f64>,
    pub k2: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecoLoss {
    pub total: f64,
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
}

/// Batch-mean InfoNCE of `zq` against `positive`, with the queue plus the
/// same-row `hard` keys as negatives. Also returns d(loss)/d(zq).
fn subspace_loss(
    zq: &Array2<f64>,
    positive: &Array2<f64>,
    hard: &[&Array2<f64>],
    queue: ArrayView2<'_, f64>,
    tau: f64,
) -> (f64, Array2<f64>) {
    let batch = zq.nrows();
    let queue_logits = zq.dot(&queue.t()) / tau;
    let mut queue_weights = Array2::<f64>::zeros(queue_logits.dim());
    let mut grad = Array2::<f64>::zeros(zq.dim());
    let mut total = 0.0;
    for b in 0..batch {
        let qrow = zq.row(b);
        let pos = qrow.dot(&positive.row(b)) / tau;
        let mut negs: Vec<f64> = queue_logits.row(b).to_vec();
        negs.extend(hard.iter().map(|h| qrow.dot(&h.row(b)) / tau));
        total += nce_from_logits(pos, &negs);
        if negs.is_empty() {
            continue;
        }
        let (p_pos, p_neg) = softmax_weights(pos, &negs);
        let n_queue = queue_logits.ncols();
        queue_weights.row_mut(b).assign(&ndarray::ArrayView1::from(&p_neg[..n_queue]));
        let mut g = grad.row_mut(b);
        g.scaled_add(p_pos - 1.0, &positive.row(b));
        for (h, &w) in hard.iter().zip(&p_neg[n_queue..]) {
            g.scaled_add(w, &h.row(b));
        }
    }
    grad += &queue_weights.dot(&queue);
    let scale = 1.0 / (tau * batch as f64);
    grad.mapv_inplace(|g| g * scale);
    (total / batch as f64, grad)
}

/// Combined loss over the three sub-spaces together with gradients w.r.t.
/// each sub-space's query embeddings.
pub fn seco_loss_with_grad(
    emb: &[SubspaceEmbeddings; 3],
    queues: &[EmbeddingQueue; 3],
    tau: f64,
    multi_positive_z0: bool,
) -> Result<(SecoLoss, [Array2<f64>; 3])> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let batch = emb[0].q.nrows();
    if batch == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for (e, q) in emb.iter().zip(queues) {
        for m in [&e.q, &e.k0, &e.k1, &e.k2] {
            if m.dim() != (batch, q.dim()) {
                return Err(Error::ShapeMismatch(format!(
                    "embedding {:?} vs batch {batch} x queue dim {}",
                    m.dim(),
                    q.dim()
                )));
            }
        }
    }
    let [e0, e1, e2] = emb;
    let (l0, g0) = if multi_positive_z0 {
        let mut acc = 0.0;
        let mut grad = Array2::zeros(e0.q.dim());
        for pos in [&e0.k0, &e0.k1, &e0.k2] {
            let (l, g) = subspace_loss(&e0.q, pos, &[], queues[0].matrix(), tau);
            acc += l / 3.0;
            grad.scaled_add(1.0 / 3.0, &g);
        }
        (acc, grad)
    } else {
        subspace_loss(&e0.q, &e0.k0, &[], queues[0].matrix(), tau)
    };
    let (l1, g1) = subspace_loss(&e1.q, &e1.k1, &[&e1.k0, &e1.k2], queues[1].matrix(), tau);
    let (l2, g2) = subspace_loss(&e2.q, &e2.k2, &[&e2.k0, &e2.k1], queues[2].matrix(), tau);
    Ok((
        SecoLoss {
            total: l0 + l1 + l2,
            l0,
            l1,
            l2,
        },
        [g0, g1, g2],
    ))
}

/// `L0 + L1 + L2` where sub-space 0 contrasts against its queue only and
/// sub-spaces 1 and 2 add the two other keys of the same location as negatives.
pub fn seco_loss(
    emb: &[SubspaceEmbeddings; 3],
    queues: &[EmbeddingQueue; 3],
    tau: f64,
    multi_positive_z0: bool,
) -> Result<SecoLoss> {
    seco_loss_with_grad(emb, queues, tau, multi_positive_z0).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Array2<f64> {
        let flat: Vec<f64> = (0..rows).flat_map(|_| random_unit(rng, dim)).collect();
        Array2::from_shape_vec((rows, dim), flat).unwrap()
    }

    #[test]
    fn empty_negatives_give_zero() {
        assert_eq!(info_nce(&[1.0, 0.0], &[0.0, 1.0], &[], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        let q = [1.0, 0.0];
        let k = [0.6, 0.8];
        let l = info_nce(&q, &k, &[&k], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(info_nce(&[1.0, 0.0], &[1.0], &[], 0.5).is_err());
        assert!(info_nce(&[1.0, 0.0], &[1.0, 0.0], &[&[1.0]], 0.5).is_err());
        assert!(info_nce(&[1.0], &[1.0], &[], 0.0).is_err());
    }

    #[test]
    fn both_branches_agree_with_naive_formula() {
        for (pos, negs) in [(2.0, vec![1.0, -1.0]), (-1.0, vec![0.5, 3.0]), (0.0, vec![0.0])] {
            let naive = -(f64::exp(pos) / (f64::exp(pos) + negs.iter().map(|l: &f64| l.exp()).sum::<f64>())).ln();
            assert!((nce_from_logits(pos, &negs) - naive).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_decreases_in_positive_logit() {
        let negs = [0.1, -0.3, 0.2];
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let l = nce_from_logits(0.3 + i as f64 * 0.5, &negs);
            assert!(l < prev && l > 0.0);
            prev = l;
        }
    }

    #[test]
    fn empty_queues_leave_two_hard_negatives() {
        let mut rng = seeded(0);
        let dim = 8;
        let emb: [SubspaceEmbeddings; 3] = std::array::from_fn(|_| SubspaceEmbeddings {
            q: random_rows(&mut rng, 1, dim),
            k0: random_rows(&mut rng, 1, dim),
            k1: random_rows(&mut rng, 1, dim),
            k2: random_rows(&mut rng, 1, dim),
        });
        let queues: [EmbeddingQueue; 3] = std::array::from_fn(|_| EmbeddingQueue::new(4, dim).unwrap());
        let l = seco_loss(&emb, &queues, 0.07, false).unwrap();
        assert_eq!(l.l0, 0.0);
        let e = &emb[1];
        let row = |m: &Array2<f64>| m.row(0).to_vec();
        let expect = info_nce(&row(&e.q), &row(&e.k1), &[&row(&e.k0), &row(&e.k2)], 0.07).unwrap();
        assert!((l.l1 - expect).abs() < 1e-12);
    }

    #[test]
    fn equal_embeddings_give_log_counts() {
        let dim = 4;
        let v = Array2::from_shape_fn((2, dim), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let emb: [SubspaceEmbeddings; 3] = std::array::from_fn(|_| SubspaceEmbeddings {
            q: v.clone(),
            k0: v.clone(),
            k1: v.clone(),
            k2: v.clone(),
        });
        let mut queues: [EmbeddingQueue; 3] = std::array::from_fn(|_| EmbeddingQueue::new(16, dim).unwrap());
        for (i, q) in queues.iter_mut().enumerate() {
            for _ in 0..(3 + 2 * i) {
                q.push(v.row(0).as_slice().unwrap()).unwrap();
            }
        }
        let l = seco_loss(&emb, &queues, 0.07, false).unwrap();
        assert!((l.l0 - (1.0f64 + 3.0).ln()).abs() < 1e-12);
        assert!((l.l1 - (3.0f64 + 5.0).ln()).abs() < 1e-12);
        assert!((l.l2 - (3.0f64 + 7.0).ln()).abs() < 1e-12);
        assert!((l.total - (l.l0 + l.l1 + l.l2)).abs() < 1e-15);
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        let dim = 5;
        let batch = 3;
        let emb: [SubspaceEmbeddings; 3] = std::array::from_fn(|_| SubspaceEmbeddings {
            q: random_rows(&mut rng, batch, dim),
            k0: random_rows(&mut rng, batch, dim),
            k1: random_rows(&mut rng, batch, dim),
            k2: random_rows(&mut rng, batch, dim),
        });
        let mut queues: [EmbeddingQueue; 3] = std::array::from_fn(|_| EmbeddingQueue::new(8, dim).unwrap());
        for q in queues.iter_mut() {
            for _ in 0..6 {
                q.push(&random_unit(&mut rng, dim)).unwrap();
            }
        }
        for multi in [false, true] {
            let (_, grads) = seco_loss_with_grad(&emb, &queues, 0.5, multi).unwrap();
            let eps = 1e-6;
            for s in 0..3 {
                for idx in 0..batch * dim {
                    let (b, j) = (idx / dim, idx % dim);
                    let mut plus = emb.clone();
                    plus[s].q[[b, j]] += eps;
                    let mut minus = emb.clone();
                    minus[s].q[[b, j]] -= eps;
                    let fd = (seco_loss(&plus, &queues, 0.5, multi).unwrap().total
                        - seco_loss(&minus, &queues, 0.5, multi).unwrap().total)
                        / (2.0 * eps);
                    assert!((fd - grads[s][[b, j]]).abs() < 1e-7, "space {s} idx {idx}");
                }
            }
        }
    }
}
