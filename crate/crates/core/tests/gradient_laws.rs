//! Every layer's backward pass against central differences of its forward
//! pass, on random instances. The scalar loss is `Σ r ⊙ out` for a random
//! projection `r`, so the analytic input gradient is `backward(r)`.

use asu_cnn::activations::ActivationKind;
use asu_cnn::gradcheck::{finite_diff_grad, SkipReason, NETWORK_STEP};
use asu_cnn::layers::{maxpool_backward, maxpool_forward, ConvLayer, ConvSpec, DenseLayer};
use asu_cnn::train::sparse_cce_with_softmax;
use asu_cnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 6;
const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn assert_close(what: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) {
    assert_eq!(analytic.dims(), numeric.dims(), "{what}");
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let scale = a.abs().max(n.abs());
        let ok = if scale < 1e-6 {
            (a - n).abs() < 1e-9
        } else {
            (a - n).abs() / scale < TOL
        };
        assert!(ok, "{what}[{i}]: analytic {a:e} numeric {n:e}");
    }
}

#[test]
fn conv_gradients_match_differences() {
    let shapes = [
        (5, 3, 2, 3, 0, 1),
        (6, 2, 3, 2, 0, 2),
        (7, 3, 1, 4, 1, 2),
        (4, 1, 3, 2, 0, 1),
        (8, 3, 3, 2, 1, 1),
        (6, 3, 2, 2, 0, 3),
    ];
    for (seed, &(n, f, c_in, n_f, p, s)) in (0..INSTANCES).zip(&shapes) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec {
            n,
            f,
            p,
            s,
            n_f,
            c_in,
        };
        let input = random(&mut rng, &[n, n, c_in], 1.0);
        let weights = random(&mut rng, &spec.weight_dims(), 0.5);
        let bias = random(&mut rng, &[n_f], 0.5);
        let layer = ConvLayer::new(spec, weights.clone(), bias.clone()).unwrap();
        let (out, cache) = layer.forward(&input).unwrap();
        let r = random(&mut rng, out.dims(), 1.0);
        let grads = layer.backward(&cache, &r).unwrap();

        let mut params = vec![input, weights, bias];
        let numeric = finite_diff_grad(
            &mut params,
            |p: &Vec<Tensor<f64>>| {
                let l = ConvLayer::new(spec, p[1].clone(), p[2].clone()).unwrap();
                Ok(dot(&l.forward(&p[0]).unwrap().0, &r))
            },
            NETWORK_STEP,
        )
        .unwrap();
        assert!(numeric.skipped.is_empty());
        assert_close("conv input", &grads.input, &numeric.grads[0]);
        assert_close("conv weights", &grads.weights, &numeric.grads[1]);
        assert_close("conv bias", &grads.bias, &numeric.grads[2]);
    }
}

#[test]
fn dense_gradients_match_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (i, o) = (rng.gen_range(1..12), rng.gen_range(1..9));
        let input = random(&mut rng, &[i], 1.0);
        let weights = random(&mut rng, &[i, o], 0.5);
        let bias = random(&mut rng, &[o], 0.5);
        let layer = DenseLayer::new(weights.clone(), bias.clone()).unwrap();
        let (out, cache) = layer.forward(&input).unwrap();
        let r = random(&mut rng, out.dims(), 1.0);
        let grads = layer.backward(&cache, &r).unwrap();

        let mut params = vec![input, weights, bias];
        let numeric = finite_diff_grad(
            &mut params,
            |p: &Vec<Tensor<f64>>| {
                let l = DenseLayer::new(p[1].clone(), p[2].clone()).unwrap();
                Ok(dot(&l.forward(&p[0]).unwrap().0, &r))
            },
            NETWORK_STEP,
        )
        .unwrap();
        assert_close("dense input", &grads.input, &numeric.grads[0]);
        assert_close("dense weights", &grads.weights, &numeric.grads[1]);
        assert_close("dense bias", &grads.bias, &numeric.grads[2]);
    }
}

#[test]
fn maxpool_gradients_match_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (h, w, c) = (
            rng.gen_range(2..9),
            rng.gen_range(2..9),
            rng.gen_range(1..4),
        );
        let input = random(&mut rng, &[h, w, c], 1.0);
        let (out, cache) = maxpool_forward(&input).unwrap();
        let r = random(&mut rng, out.dims(), 1.0);
        let analytic = maxpool_backward(&cache, &r).unwrap();
        let winners = cache.winners().to_vec();

        let mut params = vec![input];
        let numeric = finite_diff_grad(
            &mut params,
            |p: &Vec<Tensor<f64>>| {
                let (o, c) = maxpool_forward(&p[0]).unwrap();
                if c.winners() != winners.as_slice() {
                    return Err(SkipReason::Kink);
                }
                Ok(dot(&o, &r))
            },
            NETWORK_STEP,
        )
        .unwrap();
        // random continuous inputs essentially never tie within 2h
        assert!(numeric.skipped.is_empty());
        assert_close("maxpool input", &analytic, &numeric.grads[0]);
    }
}

#[test]
fn activation_gradients_match_differences() {
    for kind in [ActivationKind::Asu, ActivationKind::Gcu] {
        for seed in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let input = random(&mut rng, &[4, 4, 3], 6.0);
            let r = random(&mut rng, &[4, 4, 3], 1.0);
            let slope = input.map(|z| kind.derivative(z));
            let analytic = Tensor::from_vec(
                &[4, 4, 3],
                slope
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(d, r)| d * r)
                    .collect(),
            )
            .unwrap();
            let mut params = vec![input];
            let numeric = finite_diff_grad(
                &mut params,
                |p: &Vec<Tensor<f64>>| Ok(dot(&p[0].map(|z| kind.eval(z)), &r)),
                NETWORK_STEP,
            )
            .unwrap();
            assert_close(kind.name(), &analytic, &numeric.grads[0]);
        }
    }
}

#[test]
fn loss_gradient_matches_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let logits = random(&mut rng, &[10], 4.0);
        let label = rng.gen_range(0..10);
        let (_, grad) = sparse_cce_with_softmax(logits.data(), label).unwrap();
        let mut params = vec![logits];
        let numeric = finite_diff_grad(
            &mut params,
            |p: &Vec<Tensor<f64>>| Ok(sparse_cce_with_softmax(p[0].data(), label).unwrap().0),
            NETWORK_STEP,
        )
        .unwrap();
        assert_close(
            "loss",
            &Tensor::from_vec(&[10], grad).unwrap(),
            &numeric.grads[0],
        );
    }
}
