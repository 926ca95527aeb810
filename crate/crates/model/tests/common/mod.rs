#![allow(dead_code)]

use cbct_nn::gradcheck::rel_error;
use cbct_nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

/// `y = x Wᵀ + b` with `W: [out, in]`, written out by hand.
pub fn affine(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (out, inp) = w.dims2();
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b.data()[o];
            for i in 0..inp {
                s += x[r * inp + i] * w.data()[o * inp + i];
            }
            y[r * out + o] = s;
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest relative error between the analytic gradient of `build` with
/// respect to its input and central differences, over every input entry.
pub fn input_gradcheck<F>(store: &ParamStore, x: &Tensor, h: f64, floor: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = build(&mut g, store, xv);
    let analytic = g.backward(out).wrt(xv).expect("input gradient");
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let xv = g.leaf(t);
        let out = build(&mut g, store, xv);
        g.value(out).data()[0]
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (eval(p) - eval(m)) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric, floor));
    }
    worst
}
