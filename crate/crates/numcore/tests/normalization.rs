use numcore::{Graph, Tensor};
use proptest::prelude::*;

const EPS: f64 = 1e-5;

fn normalized_moments(values: &[f64], h: usize, w: usize, eps: f64) -> (f64, f64, f64) {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([1, 1, h, w], values).unwrap());
    let (m, s) = g.instance_stats(x).unwrap();
    let std_in = g.value(s).item();
    let m4 = g.reshape(m, &[1, 1, 1, 1]).unwrap();
    let s4 = g.reshape(s, &[1, 1, 1, 1]).unwrap();
    let c = g.affine(s4, 1.0, eps).unwrap();
    let centered = g.sub(x, m4).unwrap();
    let y = g.div(centered, c).unwrap();
    let (m2, s2) = g.instance_stats(y).unwrap();
    (g.value(m2).item(), g.value(s2).item(), std_in)
}

proptest! {
    #[test]
    fn normalization_centers_and_scales(
        h in 1usize..6,
        w in 2usize..6,
        scale in 1e-2f64..10.0,
        shift in -5.0f64..5.0,
        seed in 0u64..1000,
    ) {
        let n = h * w;
        let values: Vec<f64> = (0..n)
            .map(|i| shift + scale * ((i as f64 + 1.0) * (seed as f64 * 0.013 + 0.7)).sin())
            .collect();
        let (mean, std, std_in) = normalized_moments(&values, h, w, EPS);
        prop_assume!(std_in > 1e-3);
        prop_assert!(mean.abs() < 1e-6, "mean {mean}");
        // the guard shrinks the scale to std_in / (std_in + eps)
        prop_assert!((std - std_in / (std_in + EPS)).abs() < 1e-5, "std {std}");
        let (_, exact, _) = normalized_moments(&values, h, w, 0.0);
        prop_assert!((exact - 1.0).abs() < 1e-5);
    }
}

#[test]
fn single_precision_normalization_is_centered() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn([2, 3, 8, 8], |i| ((i * 7919 % 1013) as f32) / 1013.0));
    let (m, s) = g.instance_stats(x).unwrap();
    let m4 = g.reshape(m, &[2, 3, 1, 1]).unwrap();
    let s4 = g.reshape(s, &[2, 3, 1, 1]).unwrap();
    let c = g.affine(s4, 1.0, EPS).unwrap();
    let centered = g.sub(x, m4).unwrap();
    let y = g.div(centered, c).unwrap();
    let (m2, s2) = g.instance_stats(y).unwrap();
    for (&mv, &sv) in g.value(m2).data().iter().zip(g.value(s2).data()) {
        assert!(mv.abs() < 1e-6, "{mv}");
        assert!((sv - 1.0).abs() < 1e-4, "{sv}");
    }
}
