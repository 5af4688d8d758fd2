use dadloc::radiosim::{
    distance_uncertainty, generate_domain, path_loss_db, preset_environment, Environment, Preset,
    ShiftSpec,
};
use proptest::prelude::*;

fn small_hall() -> Environment {
    let mut env = preset_environment(Preset::Hall, 0.1).unwrap();
    env.frames = 4;
    env.subcarriers = 8;
    env
}

proptest! {
    #[test]
    fn path_loss_increases_with_distance(d in 0.01f64..100.0, step in 0.001f64..50.0, n in 1.5f64..6.0) {
        let mut env = small_hall();
        env.pl_exponent = n;
        prop_assert!(path_loss_db(&env, d + step, 0.0) > path_loss_db(&env, d, 0.0));
    }

    #[test]
    fn location_uncertainty_grows_with_distance(near in 0.5f64..10.0, gap in 0.5f64..40.0, delta in 0.5f64..10.0) {
        let mut env = small_hall();
        env.pl_exponent = 4.0;
        let close = distance_uncertainty(&env, near, delta);
        let far = distance_uncertainty(&env, near + gap, delta);
        prop_assert!(close > 0.0 && far > close);
    }
}

#[test]
fn three_db_spans_less_distance_near_the_access_point() {
    let mut env = small_hall();
    env.pl_exponent = 4.0;
    assert!(distance_uncertainty(&env, 2.0, 3.0) < distance_uncertainty(&env, 20.0, 3.0));
}

#[test]
fn local_shift_changes_only_its_reference_points() {
    let env = small_hall();
    let base = generate_domain(&env, &ShiftSpec::none(1.0), 2, true, 9).unwrap();
    let local = ShiftSpec {
        local_rp_set: vec![1, 4],
        local_perturb_db: 3.0,
        seed: 5,
        ..ShiftSpec::none(1.0)
    };
    let shifted = generate_domain(&env, &local, 2, true, 9).unwrap();
    for (i, (a, b)) in base.images.iter().zip(&shifted.images).enumerate() {
        let rp = base.labels.as_ref().unwrap()[i];
        let identical = a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert_eq!(
            identical,
            !local.local_rp_set.contains(&rp),
            "sample {i} at RP {rp}"
        );
    }
}

#[test]
fn global_shift_changes_every_sample() {
    let env = small_hall();
    let base = generate_domain(&env, &ShiftSpec::none(1.0), 1, false, 4).unwrap();
    let global = ShiftSpec {
        global_exponent_delta: 0.3,
        global_gain_db: 6.0,
        ..ShiftSpec::none(1.0)
    };
    let shifted = generate_domain(&env, &global, 1, false, 4).unwrap();
    assert!(base
        .images
        .iter()
        .zip(&shifted.images)
        .all(|(a, b)| a.data != b.data));
}

#[test]
fn generation_is_a_pure_function_of_its_inputs() {
    let env = small_hall();
    let spec = ShiftSpec {
        global_gain_db: 2.0,
        local_rp_set: vec![0],
        local_perturb_db: 1.0,
        ..ShiftSpec::none(0.5)
    };
    let a = generate_domain(&env, &spec, 2, true, 77).unwrap();
    let b = generate_domain(&env, &spec, 2, true, 77).unwrap();
    assert_eq!(a, b);
    let c = generate_domain(&env, &spec, 2, true, 78).unwrap();
    assert_ne!(a.images, c.images);
}

#[test]
fn images_are_normalized_per_sample() {
    let env = small_hall();
    let ds = generate_domain(&env, &ShiftSpec::none(1.0), 1, true, 1).unwrap();
    for img in &ds.images {
        let n = img.data.len() as f64;
        let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = img
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(
            mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4,
            "mean {mean} var {var}"
        );
    }
}
