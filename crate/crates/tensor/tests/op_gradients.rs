//! Central finite-difference checks of every differentiable op (f64).

use mdt_tensor::{Graph, Tensor, Var};

fn pseudo(n: usize, seed: f64) -> Vec<f64> {
    // deterministic values in (-1, 1) without an RNG dependency
    (0..n).map(|i| ((i as f64 + 1.0) * 12.9898 + seed * 78.233).sin() * 0.9).collect()
}

fn tensor(shape: &[usize], seed: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, pseudo(n, seed)).unwrap()
}

/// Checks d loss / d inputs where `loss = mse(f(inputs), target)`.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let eval = |ins: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>, Vec<usize>) {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let shape = g.shape(out);
        let target = g.constant(tensor(&shape, 0.77));
        let loss = g.mse(out, target).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs = vars.iter().map(|v| grads.get(*v).cloned()).collect();
        (g.value(loss).item(), gs, shape)
    };
    let (_, grads, _) = eval(&inputs);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads[k].clone().expect("gradient present");
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].make_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].make_mut()[i] -= h;
            let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-7);
            assert!(err < 1e-4, "input {k} coord {i}: analytic {a} numeric {num}");
        }
    }
}

#[test]
fn conv2d_gradients() {
    check(
        vec![tensor(&[2, 2, 5, 5], 0.1), tensor(&[3, 2, 3, 3], 0.2), tensor(&[3], 0.3)],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, (1, 1)).unwrap(),
    );
    check(vec![tensor(&[1, 2, 6, 6], 0.4), tensor(&[2, 2, 3, 3], 0.5)], |g, v| {
        g.conv2d(v[0], v[1], None, 2, (1, 1)).unwrap()
    });
    check(vec![tensor(&[2, 3, 3, 4], 0.6), tensor(&[2, 3, 1, 1], 0.7)], |g, v| {
        g.conv2d(v[0], v[1], None, 1, (0, 0)).unwrap()
    });
    check(vec![tensor(&[2, 5, 8, 8], 0.8), tensor(&[1, 5, 7, 7], 0.9), tensor(&[1], 0.3)], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, (3, 3)).unwrap()
    });
}

#[test]
fn shared_weight_gradients_accumulate() {
    check(vec![tensor(&[1, 3, 6, 6], 0.15), tensor(&[1, 3, 6, 6], 0.25), tensor(&[1, 3, 7, 7], 0.35)], |g, v| {
        let a = g.conv2d(v[0], v[2], None, 1, (3, 3)).unwrap();
        let x2 = g.add(v[1], g.relu(v[1])).unwrap();
        let b = g.conv2d(x2, v[2], None, 1, (3, 3)).unwrap();
        g.add(a, b).unwrap()
    });
}

#[test]
fn instance_norm_gradients() {
    check(
        vec![tensor(&[2, 3, 4, 4], 0.8), tensor(&[3], 0.9), tensor(&[3], 1.0)],
        |g, v| g.instance_norm(v[0], Some(v[1]), Some(v[2]), 1e-5).unwrap(),
    );
}

#[test]
fn pooling_and_resampling_gradients() {
    check(vec![tensor(&[1, 2, 4, 6], 1.1)], |g, v| g.max_pool2d(v[0], 2, 2).unwrap());
    check(vec![tensor(&[1, 2, 5, 5], 1.2)], |g, v| g.avg_pool2d(v[0], 3, 1, 1).unwrap());
    check(vec![tensor(&[2, 2, 3, 3], 1.3)], |g, v| g.upsample_nearest(v[0], 2).unwrap());
    check(vec![tensor(&[2, 3, 3, 2], 1.4)], |g, v| g.global_avg_pool(v[0]).unwrap());
}

#[test]
fn elementwise_and_structural_gradients() {
    check(vec![tensor(&[1, 2, 3, 3], 1.5)], |g, v| g.relu(v[0]));
    check(vec![tensor(&[1, 2, 3, 3], 1.6)], |g, v| g.clamp(v[0], -0.3, 0.4));
    check(vec![tensor(&[2, 1, 3, 3], 1.7), tensor(&[2, 1, 3, 3], 1.8)], |g, v| g.add(v[0], v[1]).unwrap());
    check(vec![tensor(&[2, 1, 2, 2], 1.9), tensor(&[2, 3, 2, 2], 2.0)], |g, v| {
        g.concat_channels(&[v[0], v[1]]).unwrap()
    });
    check(vec![tensor(&[2, 1, 3, 3], 2.1)], |g, v| {
        g.channel_affine(v[0], &[2.0, -1.0, 0.5], &[0.1, 0.2, 0.3]).unwrap()
    });
}

#[test]
fn gram_and_loss_gradients() {
    check(vec![tensor(&[2, 3, 2, 3], 2.2)], |g, v| g.gram(v[0]).unwrap());
    check(vec![tensor(&[1, 2, 2, 2], 2.3), tensor(&[1, 2, 2, 2], 2.4)], |g, v| {
        let a = g.mse(v[0], v[1]).unwrap();
        let b = g.mse(v[1], v[0]).unwrap();
        g.combine(&[(a, 2.0), (b, -0.5)]).unwrap()
    });
}

#[test]
fn unused_parameters_receive_no_gradient() {
    let g = Graph::new();
    let a = g.param(tensor(&[1, 1, 2, 2], 0.1));
    let b = g.param(tensor(&[1, 1, 2, 2], 0.2));
    let c = g.constant(tensor(&[1, 1, 2, 2], 0.3));
    let loss = g.mse(a, c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(a).is_some());
    assert!(grads.get(b).is_none());
    assert!(grads.get(c).is_none());
}
