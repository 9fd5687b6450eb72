#[path = "common/vine_checks.rs"]
mod checks;

use checks::*;

#[test]
fn three_variable_densities_integrate_to_one() {
    for (name, v) in test_vines() {
        let z = normalization(&v, 80);
        assert!((z - 1.0).abs() <= 1e-3, "{name}: {z}");
    }
}

#[test]
fn three_variable_margins_are_uniform() {
    for (name, v) in test_vines() {
        for var in 0..3 {
            for at in [0.1, 0.5, 0.9] {
                let z = margin_integral(&v, var, at, 40);
                assert!((z - 1.0).abs() <= 1e-3, "{name}, u{} = {at}: {z}", var + 1);
            }
        }
    }
}

#[test]
fn vine_matches_nested_clayton_density() {
    let gap = nested_clayton_gap(4.67, 100, 7);
    assert!(gap < 1e-4, "max relative gap {gap}");
}

#[test]
fn richardson_third_derivative_is_exact_for_cubics() {
    use astro_float::{BigFloat, RoundingMode::ToEven};
    let c = |u: &[BigFloat; 3]| u[0].mul(&u[1], 256, ToEven).mul(&u[2], 256, ToEven).add(&u[0].powi(3, 256, ToEven), 256, ToEven);
    assert!((fd_density(c, [0.3, 0.4, 0.5], 1e-2) - 1.0).abs() < 1e-12);
}

