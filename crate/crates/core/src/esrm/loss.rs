use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_sum_exp, softmax, Matrix};
use crate::textnorm::MetadataTargets;

use super::encoder::EncoderParams;

/// In-batch contrastive loss and its gradients.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    /// Mean of `per_anchor`.
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    pub grad_anchors: Vec<Vec<f64>>,
    pub grad_positives: Vec<Vec<f64>>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `loss_i = -log softmax_j(a_i·p_j / τ)[i]`, averaged over the batch. Every
/// other positive in the batch acts as a negative for anchor `i`.
pub fn contrastive_loss<V: AsRef<[f64]>>(
    anchors: &[V],
    positives: &[V],
    tau: f64,
) -> Result<ContrastiveOutput> {
    check_tau(tau)?;
    let b = anchors.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs at least 2 pairs, got {b}"
        )));
    }
    if positives.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{b} anchors but {} positives",
            positives.len()
        )));
    }
    let d = anchors[0].as_ref().len();
    if anchors
        .iter()
        .chain(positives)
        .any(|v| v.as_ref().len() != d)
    {
        return Err(Error::InvalidArgument("mixed embedding dimensions".into()));
    }
    let mut per_anchor = Vec::with_capacity(b);
    let mut grad_anchors = vec![vec![0.0; d]; b];
    let mut grad_positives = vec![vec![0.0; d]; b];
    let inv_b = 1.0 / b as f64;
    for (i, a) in anchors.iter().enumerate() {
        let a = a.as_ref();
        let logits: Vec<f64> = positives.iter().map(|p| dot(a, p.as_ref()) / tau).collect();
        per_anchor.push(log_sum_exp(&logits) - logits[i]);
        let mut ds = softmax(&logits);
        ds[i] -= 1.0;
        for (j, (g, p)) in ds.iter().zip(positives).enumerate() {
            let w = g * inv_b / tau;
            axpy(w, p.as_ref(), &mut grad_anchors[i]);
            axpy(w, a, &mut grad_positives[j]);
        }
    }
    let loss = per_anchor.iter().sum::<f64>() * inv_b;
    Ok(ContrastiveOutput {
        loss,
        per_anchor,
        grad_anchors,
        grad_positives,
    })
}

/// Contrastive loss of one anchor against its positive and explicit negatives.
#[derive(Debug, Clone)]
pub struct NegativesOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// `-log softmax(a·p/τ, a·n_1/τ, ..., a·n_k/τ)[0]`
pub fn contrastive_with_negatives<V: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[V],
    tau: f64,
) -> Result<NegativesOutput> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one negative is required".into(),
        ));
    }
    let candidates: Vec<&[f64]> = std::iter::once(positive)
        .chain(negatives.iter().map(AsRef::as_ref))
        .collect();
    let logits: Vec<f64> = candidates.iter().map(|c| dot(anchor, c) / tau).collect();
    let loss = log_sum_exp(&logits) - logits[0];
    let mut ds = softmax(&logits);
    ds[0] -= 1.0;
    let mut grad_anchor = vec![0.0; anchor.len()];
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    for (c, g) in candidates.iter().zip(&ds) {
        axpy(g / tau, c, &mut grad_anchor);
        grads.push(anchor.iter().map(|a| a * g / tau).collect());
    }
    let grad_positive = grads.remove(0);
    Ok(NegativesOutput {
        loss,
        grad_anchor,
        grad_positive,
        grad_negatives: grads,
    })
}

/// Cross-entropy between `softmax(logits)` and a target distribution.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mass: f64 = target.iter().sum();
    let loss = mass * lse - dot(target, logits);
    let grad = softmax(logits)
        .iter()
        .zip(target)
        .map(|(p, q)| mass * p - q)
        .collect();
    (loss, grad)
}

/// Per-head losses for one exercise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetadataLoss {
    pub exercise_type: f64,
    pub difficulty: f64,
    pub concepts: f64,
}

fn head_forward(w: &Matrix, b: &[f64], e: &[f64]) -> Vec<f64> {
    let mut z = w.matvec(e);
    z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
    z
}

/// The three metadata cross-entropies on the stem embedding `e`.
///
/// Head gradients scaled by `weights` (type, difficulty, concepts) are added to
/// `grads`; the returned vector is the weighted gradient with respect to `e`.
pub fn metadata_task_loss(
    e: &[f64],
    targets: &MetadataTargets,
    params: &EncoderParams,
    weights: [f64; 3],
    grads: &mut EncoderParams,
) -> Result<(MetadataLoss, Vec<f64>)> {
    let shape = &params.shape;
    if e.len() != shape.dim
        || targets.exercise_type.len() != shape.n_types
        || targets.difficulty.len() != shape.n_difficulty
        || targets.concepts.len() != shape.n_concepts
    {
        return Err(Error::InvalidArgument(
            "metadata targets do not match the model shape".into(),
        ));
    }
    let mut grad_e = vec![0.0; e.len()];
    let mut losses = [0.0; 3];
    let heads: [(&Matrix, &Vec<f64>, &Vec<f64>); 3] = [
        (&params.type_head, &params.type_bias, &targets.exercise_type),
        (
            &params.difficulty_head,
            &params.difficulty_bias,
            &targets.difficulty,
        ),
        (
            &params.concept_head,
            &params.concept_bias,
            &targets.concepts,
        ),
    ];
    let mut dzs = Vec::with_capacity(3);
    for (k, (w, b, target)) in heads.into_iter().enumerate() {
        let (loss, dz) = cross_entropy(&head_forward(w, b, e), target);
        losses[k] = loss;
        let dz: Vec<f64> = dz.iter().map(|g| g * weights[k]).collect();
        axpy(1.0, &w.t_matvec(&dz), &mut grad_e);
        dzs.push(dz);
    }
    let grad_heads = [
        (&mut grads.type_head, &mut grads.type_bias),
        (&mut grads.difficulty_head, &mut grads.difficulty_bias),
        (&mut grads.concept_head, &mut grads.concept_bias),
    ];
    for ((w, b), dz) in grad_heads.into_iter().zip(&dzs) {
        w.add_outer(1.0, dz, e);
        axpy(1.0, dz, b);
    }
    Ok((
        MetadataLoss {
            exercise_type: losses[0],
            difficulty: losses[1],
            concepts: losses[2],
        },
        grad_e,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esrm::encoder::ModelShape;
    use crate::gradcheck::{self, compare, numeric_gradient_vec, DEFAULT_REL_TOL, DEFAULT_STEP};
    use crate::params::Parameters;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn two_pair_batch_by_hand() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = contrastive_loss(&a, &a, 1.0).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((expected - 0.3133).abs() < 1e-4);
        for l in &out.per_anchor {
            assert!((l - expected).abs() < 1e-12);
        }
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn equal_similarities_give_log_batch() {
        let v = vec![vec![0.6, 0.8]; 5];
        let out = contrastive_loss(&v, &v, 0.1).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let v = vec![vec![1.0, 0.0]];
        assert!(contrastive_loss(&v, &v, 0.1).is_err());
        let w = vec![vec![1.0, 0.0]; 2];
        assert!(contrastive_loss(&w, &w, 0.0).is_err());
        assert!(contrastive_loss(&w, &w, -1.0).is_err());
        assert!(contrastive_loss(&w, &w[..1].to_vec(), 0.1).is_err());
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, d) = (4, 5);
        let a = random_vecs(&mut rng, b, d);
        let p = random_vecs(&mut rng, b, d);
        let out = contrastive_loss(&a, &p, 0.5).unwrap();
        let flat: Vec<f64> = a.iter().chain(&p).flatten().copied().collect();
        let numeric = numeric_gradient_vec(&flat, DEFAULT_STEP, |x| {
            let v: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
            contrastive_loss(&v[..b], &v[b..], 0.5).unwrap().loss
        });
        let analytic: Vec<f64> = out
            .grad_anchors
            .iter()
            .chain(&out.grad_positives)
            .flatten()
            .copied()
            .collect();
        let report = compare(&analytic, &numeric, DEFAULT_REL_TOL);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn negatives_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 4;
        let v = random_vecs(&mut rng, 5, d);
        let out = contrastive_with_negatives(&v[0], &v[1], &v[2..], 0.3).unwrap();
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        let numeric = numeric_gradient_vec(&flat, DEFAULT_STEP, |x| {
            let w: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
            contrastive_with_negatives(&w[0], &w[1], &w[2..], 0.3)
                .unwrap()
                .loss
        });
        let mut analytic = out.grad_anchor.clone();
        analytic.extend(&out.grad_positive);
        analytic.extend(out.grad_negatives.iter().flatten());
        assert!(compare(&analytic, &numeric, DEFAULT_REL_TOL).passed());
    }

    #[test]
    fn negatives_form_matches_in_batch_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_vecs(&mut rng, 3, 4);
        let p = random_vecs(&mut rng, 3, 4);
        let batch = contrastive_loss(&a, &p, 0.2).unwrap();
        let row = contrastive_with_negatives(&a[1], &p[1], &[&p[0][..], &p[2][..]], 0.2).unwrap();
        assert!((batch.per_anchor[1] - row.loss).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_extremes() {
        let (loss, _) = cross_entropy(&[0.0; 4], &[0.0, 1.0, 0.0, 0.0]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let q = [0.25, 0.75];
        let logits = [0.25f64.ln(), 0.75f64.ln()];
        let (loss, grad) = cross_entropy(&logits, &q);
        let entropy = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((loss - entropy).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    fn toy_params(seed: u64) -> EncoderParams {
        EncoderParams::init(
            ModelShape {
                dim: 4,
                vocab_size: 5,
                image_dim: 2,
                n_types: 4,
                n_difficulty: 3,
                n_concepts: 5,
            },
            seed,
        )
        .unwrap()
    }

    fn toy_targets() -> MetadataTargets {
        MetadataTargets {
            exercise_type: vec![0.0, 0.0, 1.0, 0.0],
            difficulty: vec![0.0, 1.0, 0.0],
            concepts: vec![0.5, 0.0, 0.0, 0.5, 0.0],
        }
    }

    #[test]
    fn metadata_gradients_match_finite_differences() {
        let mut p = toy_params(3);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= 20.0);
        }
        let e = [0.5, -0.5, 0.5, 0.5];
        let targets = toy_targets();
        let w = [0.7, 0.5, 0.3];
        let total =
            |l: &MetadataLoss| w[0] * l.exercise_type + w[1] * l.difficulty + w[2] * l.concepts;
        let mut g = p.zeros_like();
        let (_, grad_e) = metadata_task_loss(&e, &targets, &p, w, &mut g).unwrap();
        let report = gradcheck::check(&p, &g, DEFAULT_STEP, DEFAULT_REL_TOL, |q| {
            let mut scratch = q.zeros_like();
            total(
                &metadata_task_loss(&e, &targets, q, w, &mut scratch)
                    .unwrap()
                    .0,
            )
        });
        assert!(report.passed(), "{report:?}");
        let numeric = numeric_gradient_vec(&e, DEFAULT_STEP, |x| {
            let mut scratch = p.zeros_like();
            total(
                &metadata_task_loss(x, &targets, &p, w, &mut scratch)
                    .unwrap()
                    .0,
            )
        });
        assert!(compare(&grad_e, &numeric, DEFAULT_REL_TOL).passed());
    }

    #[test]
    fn uniform_type_prediction_costs_log_four() {
        let mut p = toy_params(1);
        p.fill_zero();
        let mut g = p.zeros_like();
        let (l, _) = metadata_task_loss(&[0.5; 4], &toy_targets(), &p, [1.0; 3], &mut g).unwrap();
        assert!((l.exercise_type - 4f64.ln()).abs() < 1e-12);
        let bad = MetadataTargets {
            exercise_type: vec![1.0],
            ..toy_targets()
        };
        assert!(metadata_task_loss(&[0.5; 4], &bad, &p, [1.0; 3], &mut g).is_err());
    }

    proptest! {
        #[test]
        fn contrastive_is_permutation_equivariant(seed in 0u64..500, shift in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = 5;
            let a = random_vecs(&mut rng, b, 3);
            let p = random_vecs(&mut rng, b, 3);
            let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
            let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
            let pp: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
            let x = contrastive_loss(&a, &p, 0.1).unwrap();
            let y = contrastive_loss(&pa, &pp, 0.1).unwrap();
            prop_assert!((x.loss - y.loss).abs() < 1e-9);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((y.per_anchor[k] - x.per_anchor[i]).abs() < 1e-9);
            }
        }
    }
}
