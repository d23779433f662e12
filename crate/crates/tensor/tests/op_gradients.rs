//! Central finite differences against the tape's analytic gradients, one op at a time.

use controlsr_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn check(inputs: &[Tensor<f64>], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Project the output on a fixed random direction so every element matters.
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        Tensor::<f64>::randn(g.shape(out), 1.0, &mut rng)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let p = g.input(probe.clone());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss);

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("missing gradient");
        for i in 0..input.len() {
            let h = 1e-6;
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / scale < 1e-5,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_ops() {
    let a = rand(&[2, 3, 2, 2], 1);
    let b = rand(&[2, 3, 2, 2], 2);
    check(&[a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
    check(&[a.clone()], &|g, v| g.scale(v[0], -0.7));
    check(&[a.clone()], &|g, v| g.silu(v[0]));
    check(&[a.clone(), b], &|g, v| g.mse(v[0], v[1]).unwrap());
    check(&[a.clone()], &|g, v| g.mean(v[0]));
    check(&[a], &|g, v| g.sum(v[0]));
}

#[test]
fn broadcast_ops() {
    let x = rand(&[2, 3, 2, 2], 3);
    check(&[x.clone(), rand(&[3], 4)], &|g, v| g.add_channel(v[0], v[1]).unwrap());
    check(&[x.clone(), rand(&[3], 5)], &|g, v| g.mul_channel(v[0], v[1]).unwrap());
    check(&[x.clone(), rand(&[2, 3], 6)], &|g, v| g.add_nc(v[0], v[1]).unwrap());
    check(&[x, rand(&[2, 2], 7)], &|g, v| g.add_trailing(v[0], v[1]).unwrap());
}

#[test]
fn convolution() {
    let x = rand(&[2, 3, 5, 4], 8);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let w = rand(&[2, 3, k, k], 9);
        check(&[x.clone(), w], &move |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap());
    }
}

#[test]
fn matmul_family() {
    check(&[rand(&[2, 3, 4], 10), rand(&[5, 4], 11)], &|g, v| g.linear(v[0], v[1]).unwrap());
    check(&[rand(&[2, 3, 4], 12), rand(&[2, 4, 5], 13)], &|g, v| g.bmm(v[0], v[1], false).unwrap());
    check(&[rand(&[2, 3, 4], 14), rand(&[2, 5, 4], 15)], &|g, v| g.bmm(v[0], v[1], true).unwrap());
}

#[test]
fn normalization_and_softmax() {
    check(&[rand(&[2, 3, 5], 16)], &|g, v| g.softmax(v[0]).unwrap());
    check(&[rand(&[2, 4, 3, 3], 17)], &|g, v| g.group_norm(v[0], 2, 1e-5).unwrap());
}

#[test]
fn layout_ops() {
    let x = rand(&[2, 3, 2, 4], 18);
    check(&[x.clone()], &|g, v| g.reshape(v[0], &[6, 8]).unwrap());
    check(&[x.clone()], &|g, v| g.permute(v[0], &[0, 2, 3, 1]).unwrap());
    check(&[x.clone(), rand(&[2, 1, 2, 4], 19)], &|g, v| g.concat_channels(v[0], v[1]).unwrap());
    check(&[x.clone()], &|g, v| g.upsample2x(v[0]).unwrap());
    check(&[x], &|g, v| g.mean_spatial(v[0]).unwrap());
    check(&[rand(&[7], 20)], &|g, v| g.gather(v[0], vec![0, 3, 3, 6, 1, 0], &[2, 3]).unwrap());
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(rand(&[1, 2, 3, 3], 21));
    let w = g.leaf(rand(&[2, 2, 3, 3], 22), true);
    let y = g.conv2d(x, w, 1, 1).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l);
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}
