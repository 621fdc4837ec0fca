use nalgebra::DMatrix;
use proptest::prelude::*;

use hinfsyn_core::analysis::eigvals;
use hinfsyn_core::model::{parse_plant, plant_to_json};
use hinfsyn_core::{PlantModel, TimeDomain};

fn matrix(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1e3..1e3f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
}

fn plant() -> impl Strategy<Value = PlantModel> {
    (1usize..5, 1usize..3, 1usize..3, 1usize..3, any::<bool>()).prop_flat_map(|(n, m, w, z, discrete)| {
        (matrix(n, n), matrix(n, m), matrix(n, w), matrix(z, n), matrix(z, m), prop::option::of(matrix(2, n)), 0.01..10.0f64)
            .prop_map(move |(a, b, e, cz, dz, cy, ts)| {
                let (domain, ts) = if discrete { (TimeDomain::Discrete, Some(ts)) } else { (TimeDomain::Continuous, None) };
                PlantModel::new("prop", a, b, e, cz, dz, cy, domain, ts).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plant_files_round_trip(p in plant()) {
        let back = parse_plant(&plant_to_json(&p)).unwrap();
        prop_assert_eq!(back, p);
    }

    /// Roots of a monic polynomial come back from its companion matrix.
    #[test]
    fn eigvals_match_companion_roots(roots in prop::collection::vec(-5.0..5.0f64, 1..6)) {
        let n = roots.len();
        let mut coeffs = vec![1.0];
        for r in &roots {
            let mut next = vec![0.0; coeffs.len() + 1];
            for (i, c) in coeffs.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= c * r;
            }
            coeffs = next;
        }
        let mut comp = DMatrix::zeros(n, n);
        for j in 0..n {
            comp[(0, j)] = -coeffs[j + 1];
        }
        for i in 1..n {
            comp[(i, i - 1)] = 1.0;
        }
        let spec = eigvals(&comp).unwrap();
        prop_assert_eq!(spec.eigenvalues.len(), n);
        let scale = coeffs.iter().map(|c| c.abs()).sum::<f64>() * 5f64.powi(n as i32);
        for l in &spec.eigenvalues {
            let value = coeffs.iter().fold(num_complex::Complex64::new(0.0, 0.0), |acc, c| acc * l + c);
            prop_assert!(value.norm() <= 1e-8 * scale, "residual {} at {}", value.norm(), l);
        }
        let mut want = roots.clone();
        want.sort_by(f64::total_cmp);
        let separated = want.windows(2).all(|w| w[1] - w[0] >= 0.5);
        if separated {
            let mut got: Vec<f64> = spec.eigenvalues.iter().map(|l| l.re).collect();
            got.sort_by(f64::total_cmp);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-6, "{} vs {}", g, w);
            }
        }
    }
}

#[test]
fn well_separated_companion_roots_are_exact() {
    let comp = DMatrix::from_row_slice(3, 3, &[6.0, -11.0, 6.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let spec = eigvals(&comp).unwrap();
    let mut re: Vec<f64> = spec.eigenvalues.iter().map(|l| l.re).collect();
    re.sort_by(f64::total_cmp);
    for (got, want) in re.iter().zip([1.0, 2.0, 3.0]) {
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
    assert!(spec.eigenvalues.iter().all(|l| l.im.abs() < 1e-10));
}
