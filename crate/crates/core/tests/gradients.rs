use floodlab::nn::{backward, finite_diff_grad, forward, ModelParams};
use floodlab::objectives::{flooded, mean_loss_and_grad, LossKind};
use ndarray::Array2;
use proptest::prelude::*;

fn arch() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=4, prop::collection::vec(1usize..=5, 0..=2), 1usize..=3)
        .prop_map(|(d, hidden, k)| {
            let mut s = vec![d];
            s.extend(hidden);
            s.push(k);
            s
        })
}

fn n_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

fn case() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>, Vec<u8>, bool)> {
    (arch(), any::<bool>()).prop_flat_map(|(mut sizes, binary)| {
        if binary {
            *sizes.last_mut().unwrap() = 1;
        } else if *sizes.last().unwrap() == 1 {
            *sizes.last_mut().unwrap() = 2;
        }
        let n = 5;
        let p = n_params(&sizes);
        let d = sizes[0];
        (
            Just(sizes),
            prop::collection::vec(-1.0f64..1.0, p),
            prop::collection::vec(-1.0f64..1.0, n * d),
            prop::collection::vec(any::<u8>(), n),
            Just(binary),
        )
    })
}

fn min_hidden_preactivation(p: &ModelParams, x: &Array2<f64>) -> f64 {
    let tr = forward(p, x.view()).unwrap();
    let h = tr.pre_activations.len() - 1;
    tr.pre_activations[..h]
        .iter()
        .flat_map(|z| z.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn backprop_matches_finite_differences((sizes, theta, xs, ys, binary) in case()) {
        let params = ModelParams::from_flat(&sizes, &theta).unwrap();
        let x = Array2::from_shape_vec((5, sizes[0]), xs).unwrap();
        prop_assume!(min_hidden_preactivation(&params, &x) > 1e-4);
        let k = *sizes.last().unwrap();
        let (loss, y): (LossKind, Vec<i32>) = if binary {
            (LossKind::Logistic, ys.iter().map(|v| if v % 2 == 0 { 1 } else { -1 }).collect())
        } else {
            (LossKind::SoftmaxCrossEntropy, ys.iter().map(|v| 1 + (*v as usize % k) as i32).collect())
        };
        let obj = |p: &ModelParams| {
            let tr = forward(p, x.view()).unwrap();
            mean_loss_and_grad(tr.scores.view(), &y, loss).unwrap().0
        };
        let tr = forward(&params, x.view()).unwrap();
        let (l, cot) = mean_loss_and_grad(tr.scores.view(), &y, loss).unwrap();
        let g = backward(&params, &tr, cot.view()).unwrap().to_flat();
        let fd = finite_diff_grad(&params, obj, 1e-6).unwrap().to_flat();
        let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        for (a, b) in g.iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-5 * scale + 1e-8, "{a} vs {b}");
        }

        // the flooded objective differentiates to +-g away from the kink
        for b in [0.5 * l, 2.0 * l + 0.05] {
            let s = flooded(l, b).unwrap().direction.sign();
            let fl = |p: &ModelParams| flooded(obj(p), b).unwrap().flooded_risk;
            let fd = finite_diff_grad(&params, fl, 1e-6).unwrap().to_flat();
            for (a, c) in g.iter().zip(&fd) {
                prop_assert!((s * a - c).abs() <= 1e-5 * scale + 1e-8);
            }
        }
    }
}
