//! Central finite-difference checks of every differentiable op, in f64.

use std::sync::Arc;

use gated_tensor::{BnMode, Eager, Graph, Ops, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalarise an output with fixed random weights so every element matters.
fn project<O: Ops<f64>>(o: &O, y: &O::Value, seed: u64) -> O::Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, &o.shape(y), -1.0, 1.0);
    let r = o.constant(r);
    o.sum_all(&o.mul(y, &r).unwrap()).unwrap()
}

fn check<Fwd>(name: &str, inputs: Vec<Tensor<f64>>, f: Fwd)
where
    Fwd: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ins: &[Tensor<f64>]| {
        let g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let l = f(&g, &vs);
        g.value(&l).to_scalar().unwrap()
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| t.zeros_like());
        let stride = (t.numel() / 40).max(1);
        for j in (0..t.numel()).step_by(stride) {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{name}: input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
    println!("{name}: max rel err {worst:.2e}");
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(k, pad) in &[(3usize, 1usize), (1, 0), (7, 3)] {
        let x = random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w = random(&mut rng, &[4, 3, k, k], -0.5, 0.5);
        let b = random(&mut rng, &[4], -0.5, 0.5);
        check(&format!("conv{k}x{k}"), vec![x, w, b], |g, v| {
            let y = g.conv2d(&v[0], &v[1], Some(&v[2]), pad).unwrap();
            project(g, &y, 9)
        });
    }
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 4, 3, 5], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 2, 2], -0.5, 0.5);
    let b = random(&mut rng, &[3], -0.5, 0.5);
    check("conv_transpose", vec![x, w, b], |g, v| {
        let y = g.conv_transpose2x2(&v[0], &v[1], Some(&v[2])).unwrap();
        project(g, &y, 3)
    });
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 2, 4, 4], -1.0, 2.0);
    let w = random(&mut rng, &[2], 0.5, 1.5);
    let b = random(&mut rng, &[2], -0.5, 0.5);
    check("bn_batch", vec![x.clone(), w.clone(), b.clone()], |g, v| {
        let (y, _) = g.batch_norm(&v[0], &v[1], &v[2], &BnMode::Batch { eps: 1e-5 }).unwrap();
        project(g, &y, 4)
    });
    let mode = BnMode::Fixed {
        mean: Tensor::from_vec([2], vec![0.2, -0.1]).unwrap(),
        var: Tensor::from_vec([2], vec![0.5, 2.0]).unwrap(),
        eps: 1e-5,
    };
    check("bn_fixed", vec![x, w, b], |g, v| {
        let (y, _) = g.batch_norm(&v[0], &v[1], &v[2], &mode).unwrap();
        project(g, &y, 5)
    });
}

#[test]
fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
    check("max_pool", vec![x.clone()], |g, v| project(g, &g.max_pool2x2(&v[0]).unwrap(), 1));
    check("global_avg", vec![x.clone()], |g, v| project(g, &g.global_avg_pool(&v[0]).unwrap(), 2));
    check("global_max", vec![x.clone()], |g, v| project(g, &g.global_max_pool(&v[0]).unwrap(), 3));
    check("channel_mean", vec![x.clone()], |g, v| project(g, &g.channel_mean(&v[0]).unwrap(), 4));
    check("channel_max", vec![x], |g, v| project(g, &g.channel_max(&v[0]).unwrap(), 5));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[2, 3, 4, 4], 0.1, 1.0);
    let b = random(&mut rng, &[2, 3, 4, 4], 0.5, 2.0);
    let gate = random(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
    let sp = random(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
    check("pow", vec![a.clone(), b.clone()], |g, v| project(g, &g.pow(&v[0], &v[1]).unwrap(), 1));
    check("div", vec![a.clone(), b.clone()], |g, v| project(g, &g.div(&v[0], &v[1]).unwrap(), 2));
    check("mul_bcast", vec![a.clone(), gate.clone(), sp.clone()], |g, v| {
        let y = g.mul(&g.mul(&v[0], &v[1]).unwrap(), &v[2]).unwrap();
        project(g, &y, 3)
    });
    check("add_sub", vec![a.clone(), gate], |g, v| {
        let y = g.sub(&g.add(&v[0], &v[1]).unwrap(), &g.affine(&v[0], 0.5, 1.0).unwrap()).unwrap();
        project(g, &y, 4)
    });
    check("sigmoid_sqr_abs", vec![sp], |g, v| {
        let y = g.sigmoid(&v[0]).unwrap();
        let z = g.add(&g.sqr(&y).unwrap(), &g.abs(&v[0]).unwrap()).unwrap();
        project(g, &g.mean_all(&z).unwrap(), 5)
    });
    check("clamp_relu", vec![b], |g, v| {
        let y = g.clamp(&g.affine(&v[0], 1.0, -1.0).unwrap(), 0.0, 0.5).unwrap();
        let z = g.relu(&g.affine(&v[0], 1.0, -1.2).unwrap()).unwrap();
        project(g, &g.add(&y, &z).unwrap(), 6)
    });
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
    let b = random(&mut rng, &[2, 3, 5, 6], -1.0, 1.0);
    check("concat_narrow", vec![a.clone(), b], |g, v| {
        let c = g.concat_channels(&[&v[0], &v[1]]).unwrap();
        let n = g.narrow_channels(&c, 1, 3).unwrap();
        g.add(&project(g, &c, 1), &project(g, &n, 2)).unwrap()
    });
    let kh: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
    let kw: Vec<f64> = (0..36).map(|i| ((i * 5) % 13) as f64 / 13.0).collect();
    let (kh, kw) = (Arc::new(kh), Arc::new(kw));
    check("separable_filter", vec![a.clone()], |g, v| {
        let y = g.separable_filter(&v[0], kh.clone(), kw.clone()).unwrap();
        project(g, &y, 3)
    });
    check("tv_sum", vec![a], |g, v| g.tv_sum(&v[0]).unwrap());
}

#[test]
fn eager_and_graph_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let w = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.sigmoid(&g.max_pool2x2(&g.conv2d(&xv, &wv, None, 1).unwrap()).unwrap()).unwrap();
    let e = Eager;
    let z = e.sigmoid(&e.max_pool2x2(&e.conv2d(&x, &w, None, 1).unwrap()).unwrap()).unwrap();
    assert_eq!(g.value(&y), z);
    assert!(!g.requires_grad(y));
}
