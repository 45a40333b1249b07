#![allow(dead_code)]

use gated::nn::{Forward, ParamKind, ParamStore};
use gated_tensor::{Eager, Graph, Ops, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn uniform32(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A scalar-valued function of a few tensors and (optionally) module
/// parameters, written once against any executor.
pub trait TestFn {
    fn eval<O: Ops<f64>>(&self, fw: &Forward<'_, f64, O>, xs: &[O::Value]) -> O::Value;
}

fn project<O: Ops<f64>>(ops: &O, y: &O::Value, weights: &Tensor<f64>) -> O::Value {
    let w = ops.constant(weights.clone());
    ops.sum_all(&ops.mul(y, &w).unwrap()).unwrap()
}

fn value<F: TestFn>(f: &F, store: &ParamStore<f64>, xs: &[Tensor<f64>], weights: &Tensor<f64>, train: bool) -> f64 {
    let fw = Forward::new(&Eager, store, train);
    let y = f.eval(&fw, xs);
    project(&Eager, &y, weights).to_scalar().unwrap()
}

/// Largest relative error between analytic and central-difference
/// gradients over sampled elements of every input and every trainable
/// parameter. Relative error is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn max_grad_error<F: TestFn>(f: &F, store: &ParamStore<f64>, xs: &[Tensor<f64>], train: bool, seed: u64) -> f64 {
    let mut r = rng(seed);
    // random projection so every output element matters
    let probe = {
        let fw = Forward::new(&Eager, store, train);
        f.eval(&fw, xs)
    };
    let weights = uniform(&mut r, probe.shape(), -1.0, 1.0);

    let g = Graph::new();
    let fw = Forward::new(&g, store, train);
    let vars: Vec<_> = xs.iter().map(|x| g.parameter(x.clone())).collect();
    let y = f.eval(&fw, &vars);
    let loss = project(&g, &y, &weights);
    let grads = g.backward(loss).unwrap();
    let param_vars = fw.bound_params();

    let h = 1e-6;
    let samples = 24;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    };
    for (i, x) in xs.iter().enumerate() {
        let ga = grads.get(vars[i]).cloned().unwrap_or_else(|| x.zeros_like());
        for _ in 0..samples.min(x.numel()) {
            let k = r.random_range(0..x.numel());
            let mut plus = xs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = xs.to_vec();
            minus[i].data_mut()[k] -= h;
            let n = (value(f, store, &plus, &weights, train) - value(f, store, &minus, &weights, train)) / (2.0 * h);
            check(ga.data()[k], n);
        }
    }
    for (id, var) in param_vars {
        if store.get(id).kind != ParamKind::Trainable {
            continue;
        }
        let t = store.tensor(id);
        let ga = grads.get(var).cloned().unwrap_or_else(|| t.zeros_like());
        for _ in 0..(samples / 3).clamp(1, t.numel()) {
            let k = r.random_range(0..t.numel());
            let mut plus = store.clone();
            plus.tensor_mut(id).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.tensor_mut(id).data_mut()[k] -= h;
            let n = (value(f, &plus, xs, &weights, train) - value(f, &minus, xs, &weights, train)) / (2.0 * h);
            check(ga.data()[k], n);
        }
    }
    worst
}

/// Empty files standing in for images; scanning never decodes them.
pub fn touch_pairs(dir: &std::path::Path, low: &str, high: &str, names: impl Fn(usize) -> (String, String), n: usize) {
    let (ld, hd) = (dir.join(low), dir.join(high));
    std::fs::create_dir_all(&ld).unwrap();
    std::fs::create_dir_all(&hd).unwrap();
    for i in 0..n {
        let (a, b) = names(i);
        std::fs::write(ld.join(a), b"").unwrap();
        std::fs::write(hd.join(b), b"").unwrap();
    }
}

pub fn lolv1_tree(root: &std::path::Path, train: usize, test: usize) {
    let same = |i: usize| (format!("{}.png", i + 1), format!("{}.png", i + 1));
    touch_pairs(&root.join("our485"), "low", "high", same, train);
    let eval = |i: usize| (format!("{}.png", 500 + i), format!("{}.png", 500 + i));
    touch_pairs(&root.join("eval15"), "low", "high", eval, test);
}

pub fn lolv2_real_tree(root: &std::path::Path, train: usize, test: usize) {
    let base = root.join("Real_captured");
    let names = |off: usize| move |i: usize| (format!("low{:05}.png", off + i), format!("normal{:05}.png", off + i));
    touch_pairs(&base.join("Train"), "Low", "Normal", names(1), train);
    touch_pairs(&base.join("Test"), "Low", "Normal", names(690), test);
}

pub fn lolv2_syn_tree(root: &std::path::Path, train: usize, test: usize) {
    let base = root.join("Synthetic");
    let names = |off: usize| move |i: usize| (format!("r{:06}.png", off + i), format!("r{:06}.png", off + i));
    touch_pairs(&base.join("Train"), "Low", "Normal", names(0), train);
    touch_pairs(&base.join("Test"), "Low", "Normal", names(900), test);
}
