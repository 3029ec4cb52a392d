use approx::assert_relative_eq;
use serde::Deserialize;

use metafl::env::Observation;
use metafl::qlearn::{q_forward, Layout};
use metafl::ParamVector;

#[derive(Deserialize)]
struct Golden {
    layer_widths: Vec<usize>,
    params: Vec<f64>,
    hot: usize,
    q: Vec<f64>,
}

fn golden() -> Golden {
    serde_json::from_str(include_str!("fixtures/q_forward_golden.json")).unwrap()
}

fn params(g: &Golden, values: Vec<f64>) -> ParamVector {
    ParamVector::new(values, Layout::from_widths(&g.layer_widths).unwrap(), 1000).unwrap()
}

#[test]
fn forward_matches_stored_golden_vector() {
    let g = golden();
    let q = q_forward(&params(&g, g.params.clone()), &Observation::one_hot(40, g.hot)).unwrap();
    assert_eq!(q.len(), 4);
    for (a, b) in q.iter().zip(&g.q) {
        assert_relative_eq!(*a, *b, max_relative = 1e-12);
    }
}

#[test]
fn input_weights_of_cold_cells_are_never_read() {
    let g = golden();
    let obs = Observation::one_hot(40, g.hot);
    let base = q_forward(&params(&g, g.params.clone()), &obs).unwrap();
    let mut perturbed = g.params.clone();
    // First layer is row-major [outputs][inputs].
    for o in 0..g.layer_widths[1] {
        for i in (0..40).filter(|&i| i != g.hot) {
            perturbed[o * 40 + i] += 3.0;
        }
    }
    assert_eq!(q_forward(&params(&g, perturbed), &obs).unwrap(), base);
}

#[test]
fn observation_length_is_checked() {
    let g = golden();
    assert!(q_forward(&params(&g, g.params.clone()), &Observation::one_hot(39, 0)).is_err());
}
