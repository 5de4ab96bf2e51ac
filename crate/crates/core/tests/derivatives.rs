mod common;

use common::{derivative_errors, random_instance};

#[test]
fn analytic_derivatives_match_finite_differences() {
    for seed in 0..40 {
        let inst = random_instance(1000 + seed, 10);
        let (j, h, x) = derivative_errors(&inst);
        assert!(j < 1e-4 && h < 1e-4 && x < 1e-4, "seed {seed}: gradient {j:e}, hessian {h:e}, cross {x:e}");
    }
}

#[test]
fn fully_free_policy_has_no_pinned_contribution() {
    let mut inst = random_instance(7, 12);
    inst.mask = relsparse::ActiveMask::all(inst.b.len());
    let (j, h, x) = derivative_errors(&inst);
    assert!(j < 1e-4 && h < 1e-4 && x < 1e-4, "{j:e} {h:e} {x:e}");
}

#[test]
fn per_trajectory_terms_average_to_the_gradient() {
    let inst = random_instance(3, 15);
    let p = inst.policy(&inst.beta, &inst.b);
    let bundle = relsparse::derivative_bundle(&p, &relsparse::PolicyParams::new(inst.b.clone()), &inst.d, inst.gamma).unwrap();
    let mut mean = nalgebra::DVector::zeros(inst.b.len());
    for z in &bundle.per_trajectory_z {
        mean += z;
    }
    mean /= bundle.per_trajectory_z.len() as f64;
    assert!((mean - &bundle.gradient).amax() < 1e-12);
}
