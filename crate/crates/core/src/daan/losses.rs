use ndcore::{Graph, Scalar, Tensor, Var};

use super::DaanModel;
use crate::error::{Error, Result};

/// Shannon entropy `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    ndcore::entropy(p)
}

/// `1 + exp(-H(p))`: 2 for a one-hot row, `1 + 1/R` for a uniform one.
pub fn uncertainty_weight(p: &[f64]) -> f64 {
    1.0 + (-entropy(p)).exp()
}

/// Per-row adversarial weights: uncertainty weights with suppression on,
/// ones otherwise. Computed from values, so no gradient flows through them.
pub fn uncertainty_weights<T: Scalar>(probs: &Tensor<T>, pus_enabled: bool) -> Vec<T> {
    (0..probs.rows())
        .map(|i| {
            if pus_enabled {
                T::one() + (-ndcore::entropy(probs.row(i))).exp()
            } else {
                T::one()
            }
        })
        .collect()
}

/// `(1 - μ) L_g + μ L_l`.
pub fn adv_loss_dynamic(loss_global: f64, loss_local: f64, mu: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid("mu", format!("{mu} outside [0, 1]")));
    }
    Ok((1.0 - mu) * loss_global + mu * loss_local)
}

/// Proxy A-distance `2(1 - 2ε)` clamped to `[0, 2]`.
pub fn a_distance(error: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * error)).clamp(0.0, 2.0)
}

/// `A_g / (A_g + A_l)` from the discriminators' error rates, or `mu_init`
/// when neither domain pair is distinguishable.
pub fn estimate_mu(err_global: f64, err_local: f64, mu_init: f64) -> Result<f64> {
    for (name, v) in [
        ("global error", err_global),
        ("local error", err_local),
        ("mu_init", mu_init),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(
                "mu estimate",
                format!("{name} {v} outside [0, 1]"),
            ));
        }
    }
    let a_g = a_distance(err_global);
    let a_l = a_distance(err_local);
    if a_g + a_l == 0.0 {
        return Ok(mu_init);
    }
    Ok(a_g / (a_g + a_l))
}

/// `L_y + γ L_tar - λ L_adv`. Training minimizes the same saddle point by
/// reversing gradients into the extractor instead of negating the term.
pub fn total_objective(
    loss_label: f64,
    loss_target: f64,
    loss_adv: f64,
    gamma: f64,
    lambda: f64,
) -> f64 {
    loss_label + gamma * loss_target - lambda * loss_adv
}

/// Discriminator targets: 1 for the first `n_source` rows, 0 after.
pub fn domain_targets<T: Scalar>(n_source: usize, n_target: usize) -> Vec<T> {
    let mut t = vec![T::one(); n_source];
    t.resize(n_source + n_target, T::zero());
    t
}

/// Mean negative log-likelihood of the true reference points.
pub fn loss_label<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(probs, labels)?)
}

/// Mean prediction entropy of target rows.
pub fn loss_target_entropy<T: Scalar>(g: &mut Graph<T>, probs: Var) -> Result<Var> {
    Ok(g.mean_entropy(probs)?)
}

/// A discriminator loss together with the probability nodes it was built on
/// (one for the global discriminator, one per reference point for local).
pub struct AdversarialLoss {
    pub loss: Var,
    pub probs: Vec<Var>,
}

/// Weighted domain cross-entropy of the global discriminator. `features`
/// should already have passed through gradient reversal.
pub fn loss_global<T: Scalar>(
    g: &mut Graph<T>,
    model: &DaanModel<T>,
    features: Var,
    targets: &[T],
    weights: &[T],
) -> Result<AdversarialLoss> {
    let d = model.global_discriminator(g, features)?;
    let loss = g.binary_cross_entropy(d, targets, Some(weights))?;
    Ok(AdversarialLoss {
        loss,
        probs: vec![d],
    })
}

/// Sum over reference points `r` of the weighted domain cross-entropy of
/// discriminator `r` fed `ŷ^r · features`. `class_probs` are predictor
/// outputs taken as constants.
pub fn loss_local<T: Scalar>(
    g: &mut Graph<T>,
    model: &DaanModel<T>,
    features: Var,
    class_probs: &Tensor<T>,
    targets: &[T],
    weights: &[T],
) -> Result<AdversarialLoss> {
    let r_count = model.num_rps();
    if class_probs.shape() != [targets.len(), r_count] {
        return Err(Error::shape(
            "class probabilities",
            format!("[{}, {r_count}]", targets.len()),
            format!("{:?}", class_probs.shape()),
        ));
    }
    let mut total: Option<Var> = None;
    let mut probs = Vec::with_capacity(r_count);
    let mut column = vec![T::zero(); targets.len()];
    for r in 0..r_count {
        for (i, c) in column.iter_mut().enumerate() {
            *c = class_probs.row(i)[r];
        }
        let input = g.scale_rows(features, &column)?;
        let d = model.local_discriminator(g, r, input)?;
        let loss = g.binary_cross_entropy(d, targets, Some(weights))?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
        probs.push(d);
    }
    Ok(AdversarialLoss {
        loss: total.expect("at least one reference point"),
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daan::DaanConfig;
    use crate::radiosim::ImageShape;
    use ndcore::Mode;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]) - LN2).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_weight_values() {
        assert_eq!(uncertainty_weight(&[0.0, 1.0]), 2.0);
        assert!((uncertainty_weight(&[0.25; 4]) - 1.25).abs() < 1e-12);
        assert!((uncertainty_weight(&[0.1; 10]) - 1.1).abs() < 1e-12);
        let t: Tensor<f64> = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(uncertainty_weights(&t, false), vec![1.0, 1.0]);
        let w = uncertainty_weights(&t, true);
        assert_eq!(w[0], 2.0);
        assert!((w[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn dynamic_adversarial_mix() {
        assert_eq!(adv_loss_dynamic(0.7, 0.2, 0.0).unwrap(), 0.7);
        assert_eq!(adv_loss_dynamic(0.7, 0.2, 1.0).unwrap(), 0.2);
        assert_eq!(adv_loss_dynamic(0.3, 0.3, 0.5).unwrap(), 0.3);
        assert!(adv_loss_dynamic(0.3, 0.3, 1.5).is_err());
    }

    #[test]
    fn mu_estimates() {
        assert_eq!(estimate_mu(0.3, 0.3, 0.5).unwrap(), 0.5);
        assert_eq!(estimate_mu(0.5, 0.25, 0.5).unwrap(), 0.0);
        assert_eq!(estimate_mu(0.25, 0.5, 0.5).unwrap(), 1.0);
        assert_eq!(estimate_mu(0.5, 0.9, 0.3).unwrap(), 0.3);
        assert!(estimate_mu(-0.1, 0.5, 0.5).is_err());
        assert_eq!(a_distance(0.0), 2.0);
        assert_eq!(a_distance(0.75), 0.0);
    }

    #[test]
    fn objective_decomposition() {
        assert_eq!(total_objective(1.3, 0.0, 0.0, 0.0, 0.0), 1.3);
        assert_eq!(total_objective(0.0, 0.0, 0.0, 0.1, 1.0), 0.0);
        assert!((total_objective(1.0, 2.0, 0.5, 0.1, 1.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn chance_level_label_loss() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full(&[3, 10], 0.1));
        let l = loss_label(&mut g, p, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    fn tiny(num_rps: usize) -> (DaanModel<f64>, ImageShape) {
        let shape = ImageShape {
            frames: 4,
            subcarriers: 4,
            antennas: 2,
        };
        let cfg = DaanConfig {
            feature_dim: 6,
            conv_channels: vec![2],
            predictor_hidden: vec![5],
            global_disc_hidden: vec![4],
            local_disc_hidden: vec![4],
            ..DaanConfig::new(num_rps)
        };
        (DaanModel::new(cfg, shape, 1).unwrap(), shape)
    }

    fn zero_output_layers(m: &mut DaanModel<f64>) {
        let ids: Vec<_> = (0..m.params().len())
            .map(ndcore::ParamId)
            .filter(|&id| {
                m.params().get(id).name.ends_with(".1.weight")
                    || m.params().get(id).name.ends_with(".1.bias")
            })
            .collect();
        for id in ids {
            m.params_mut().get_mut(id).value.fill(0.0);
        }
    }

    fn features(g: &mut Graph<f64>, rows: usize, width: usize) -> Var {
        let data = (0..rows * width)
            .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4)
            .collect();
        g.constant(Tensor::new(vec![rows, width], data).unwrap())
    }

    #[test]
    fn chance_discriminators() {
        let (mut m, _) = tiny(3);
        zero_output_layers(&mut m);
        let mut g = Graph::new();
        let f = features(&mut g, 4, 6);
        let targets = domain_targets::<f64>(2, 2);
        let ones = vec![1.0; 4];
        let lg = loss_global(&mut g, &m, f, &targets, &ones).unwrap();
        assert!((g.value(lg.loss).item() - LN2).abs() < 1e-12);
        let probs = Tensor::full(&[4, 3], 1.0 / 3.0);
        let ll = loss_local(&mut g, &m, f, &probs, &targets, &ones).unwrap();
        assert!((g.value(ll.loss).item() - 3.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn one_hot_batch_doubles_weighted_losses() {
        let (m, _) = tiny(3);
        let mut g = Graph::new();
        let f = features(&mut g, 4, 6);
        let targets = domain_targets::<f64>(2, 2);
        let probs = Tensor::new(
            vec![4, 3],
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0.],
        )
        .unwrap();
        let plain = uncertainty_weights(&probs, false);
        let pus = uncertainty_weights(&probs, true);
        let a = loss_local(&mut g, &m, f, &probs, &targets, &plain).unwrap();
        let b = loss_local(&mut g, &m, f, &probs, &targets, &pus).unwrap();
        assert_eq!(g.value(b.loss).item(), 2.0 * g.value(a.loss).item());
        let a = loss_global(&mut g, &m, f, &targets, &plain).unwrap();
        let b = loss_global(&mut g, &m, f, &targets, &pus).unwrap();
        assert_eq!(g.value(b.loss).item(), 2.0 * g.value(a.loss).item());
    }

    #[test]
    fn one_hot_batch_zeroes_other_discriminator_inputs() {
        let (m, _) = tiny(3);
        let mut g = Graph::new();
        let f = features(&mut g, 2, 6);
        let probs = Tensor::new(vec![2, 3], vec![0., 1., 0., 0., 0., 1.]).unwrap();
        let ones = vec![1.0; 2];
        let out = loss_local(&mut g, &m, f, &probs, &domain_targets(1, 1), &ones).unwrap();
        // Discriminator 0 only ever sees zero vectors, so both rows agree.
        let d0 = g.value(out.probs[0]);
        assert_eq!(d0.data()[0], d0.data()[1]);
        let d1 = g.value(out.probs[1]);
        assert_ne!(d1.data()[0], d1.data()[1]);
    }

    #[test]
    fn single_class_local_equals_global() {
        let (mut m, _) = tiny(1);
        let global = m.param_ids(crate::daan::ParamGroup::GlobalDisc);
        let local = m.param_ids(crate::daan::ParamGroup::LocalDisc(0));
        for (gid, lid) in global.iter().zip(&local) {
            let v = m.params().get(*gid).value.clone();
            m.params_mut().get_mut(*lid).value = v;
        }
        let mut g = Graph::new();
        let f = features(&mut g, 4, 6);
        let targets = domain_targets::<f64>(2, 2);
        let w = vec![1.0, 1.5, 2.0, 1.0];
        let lg = loss_global(&mut g, &m, f, &targets, &w).unwrap();
        let ll = loss_local(&mut g, &m, f, &Tensor::full(&[4, 1], 1.0), &targets, &w).unwrap();
        assert_eq!(g.value(lg.loss).item(), g.value(ll.loss).item());
    }

    #[test]
    fn entropy_step_sharpens_predictions() {
        let (mut m, shape) = tiny(4);
        let x = Tensor::new(
            vec![3, shape.antennas, shape.frames, shape.subcarriers],
            (0..3 * shape.len())
                .map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.5)
                .collect(),
        )
        .unwrap();
        let batch_entropy = |m: &mut DaanModel<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let f = m.forward_features(&mut g, xv, Mode::Eval).unwrap();
            let p = m.predict_labels(&mut g, f).unwrap();
            let h = loss_target_entropy(&mut g, p).unwrap();
            (g, h)
        };
        let (g, h) = batch_entropy(&mut m);
        let before = g.value(h).item();
        let mut store = m.params().clone();
        g.backward(h, &mut store).unwrap();
        *m.params_mut() = store;
        for id in m.param_ids(crate::daan::ParamGroup::Predictor) {
            let p = m.params_mut().get_mut(id);
            let grad = p.grad.clone();
            p.value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(v, g)| *v -= 0.05 * g);
        }
        let (g, h) = batch_entropy(&mut m);
        assert!(g.value(h).item() < before);
    }
}
