mod common;

use cbct_model::encoder::{sinusoidal_2d, Encoder, EncoderConfig, TokenBlock, FEATURE_CHANNELS};
use cbct_model::Error;
use cbct_nn::gradcheck::rel_error;
use cbct_nn::{Graph, ParamStore, Tensor, Var};
use common::*;
use rand::Rng;

fn slim(image_size: usize) -> EncoderConfig {
    EncoderConfig { image_size, stem_width: 4, stage_widths: [8, 16, 32], blocks: 1, heads: 2, mlp_width: 32 }
}

fn images(seed: u64, m: usize, s: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec(&[m, 1, s, s], (0..m * s * s).map(|_| r.random_range(0.0..1.0)).collect())
}

fn encode(enc: &Encoder, store: &ParamStore, x: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::eval();
    let xv = g.input(x.clone());
    let p = enc.encode(&mut g, store, xv).unwrap();
    p.maps.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn pyramid_channels_and_sizes() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(1), EncoderConfig { image_size: 64, ..Default::default() }).unwrap();
    let maps = encode(&enc, &store, &images(2, 2, 64));
    let channels: Vec<usize> = maps.iter().map(|t| t.shape()[1]).collect();
    assert_eq!(channels, FEATURE_CHANNELS.to_vec());
    assert_eq!(channels, vec![256, 128, 64, 16]);
    let sizes: Vec<usize> = maps.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(sizes, vec![8, 16, 32, 64]);
    assert!(maps.iter().all(|t| t.shape()[0] == 2 && t.shape()[2] == t.shape()[3] && t.all_finite()));
}

#[test]
fn map_sizes_scale_with_input() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(3), slim(64)).unwrap();
    for s in [64, 128, 256, 512] {
        let maps = encode(&enc, &store, &images(4, 1, s));
        let sizes: Vec<usize> = maps.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![s / 8, s / 4, s / 2, s]);
    }
}

#[test]
fn batched_equals_one_by_one() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(5), EncoderConfig { image_size: 32, ..Default::default() }).unwrap();
    let x = images(6, 3, 32);
    let batched = encode(&enc, &store, &x);
    for v in 0..3 {
        let single = Tensor::from_vec(&[1, 1, 32, 32], x.data()[v * 1024..(v + 1) * 1024].to_vec());
        let one = encode(&enc, &store, &single);
        for s in 0..4 {
            let per = one[s].len();
            assert!(max_abs_diff(&batched[s].data()[v * per..(v + 1) * per], one[s].data()) < 1e-5);
        }
    }
}

#[test]
fn evaluation_is_bit_reproducible() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(7), EncoderConfig { image_size: 32, ..Default::default() }).unwrap();
    let x = images(8, 2, 32);
    assert_eq!(encode(&enc, &store, &x), encode(&enc, &store, &x));
    let mut store2 = ParamStore::new();
    let enc2 = Encoder::new(&mut store2, &mut rng(7), EncoderConfig { image_size: 32, ..Default::default() }).unwrap();
    assert_eq!(encode(&enc, &store, &x), encode(&enc2, &store2, &x));
}

#[test]
fn input_shape_is_checked() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(9), slim(64)).unwrap();
    assert!(enc.check_input(&[2, 1, 64, 64]).is_ok());
    for bad in [[2, 1, 64, 32], [2, 1, 32, 32], [2, 3, 64, 64], [0, 1, 64, 64]] {
        assert!(matches!(enc.check_input(&bad), Err(Error::Shape(_))), "{bad:?}");
    }
    let mut g = Graph::eval();
    let x = g.input(Tensor::zeros(&[1, 1, 36, 36]));
    assert!(matches!(enc.encode(&mut g, &store, x), Err(Error::Shape(_))));
    for size in [0, 12, 100] {
        assert!(matches!(Encoder::new(&mut ParamStore::new(), &mut rng(1), slim(size)), Err(Error::InvalidArgument(_))));
    }
    let bad_heads = EncoderConfig { heads: 3, ..slim(64) };
    assert!(matches!(Encoder::new(&mut ParamStore::new(), &mut rng(1), bad_heads), Err(Error::InvalidArgument(_))));
}

#[test]
fn encoder_gradients_on_random_weights() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut rng(10), EncoderConfig { image_size: 64, blocks: 2, ..Default::default() }).unwrap();
    let x = images(11, 2, 64);
    let mut r = rng(12);
    let probes: Vec<Tensor> = {
        let mut g = Graph::eval();
        let xv = g.input(x.clone());
        let p = enc.encode(&mut g, &store, xv).unwrap();
        p.maps.iter().map(|&m| random_tensor(&mut r, g.value(m).shape(), 1.0)).collect()
    };
    let loss = |g: &mut Graph, store: &ParamStore| -> Var {
        let xv = g.input(x.clone());
        let p = enc.encode(g, store, xv).unwrap();
        let parts: Vec<Var> = p.maps.iter().zip(&probes).map(|(&m, t)| g.dot_const(m, t)).collect();
        let a = g.add(parts[0], parts[1]);
        let b = g.add(parts[2], parts[3]);
        g.add(a, b)
    };
    let mut g = Graph::new();
    let out = loss(&mut g, &store);
    let grads = g.backward(out);

    // key biases shift every logit of a row equally, so their gradient is
    // identically zero and only finite-difference noise would be compared
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.is_trainable(id) && !store.name(id).ends_with("attn.k.bias"))
        .collect();
    let mut work = store.clone();
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let o = loss(&mut g, s);
        g.value(o).data()[0]
    };
    // small step: biases feed many ReLUs and a wide step can straddle a kink
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..110 {
        let id = ids[r.random_range(0..ids.len())];
        let i = r.random_range(0..store.get(id).len());
        let analytic = grads.param(id).map_or(0.0, |gr| gr[i]);
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let plus = eval(&work);
        work.get_mut(id).data_mut()[i] = orig - h;
        let minus = eval(&work);
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = rel_error(analytic, numeric, 1e-5);
        assert!(err < 1e-3, "{} [{i}]: {err} {analytic} {numeric}", store.name(id));
        worst = worst.max(err);
    }
    assert!(worst < 1e-3);
}

fn block(dim: usize, heads: usize) -> (ParamStore, TokenBlock) {
    let mut store = ParamStore::new();
    let b = TokenBlock::new(&mut store, &mut rng(20), "b", dim, heads, 2 * dim).unwrap();
    // larger projections than the 0.02 init so attention is far from uniform
    let mut r = rng(21);
    for id in [b.q.weight, b.k.weight, b.v.weight, b.out.weight] {
        store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = r.random_range(-0.5..0.5));
    }
    (store, b)
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, b) = block(16, 4);
    let tokens = random_tensor(&mut rng(22), &[20, 16], 1.0);
    let probs = b.attention_probabilities(&store, &tokens);
    assert_eq!(probs.len(), 4);
    for head in probs {
        for row in head.chunks(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let (store, b) = block(8, 2);
    let x = random_tensor(&mut rng(23), &[3, 8], 1.0);
    let mut g = Graph::eval();
    let xv = g.input(x.clone());
    // three sequences of one token each
    let a = b.attend(&mut g, &store, xv, 3, 1);
    let v = affine(x.data(), 3, store.get(b.v.weight), store.get(b.v.bias));
    let want = affine(&v, 3, store.get(b.out.weight), store.get(b.out.bias));
    assert!(max_abs_diff(g.value(a).data(), &want) < 1e-12);
}

#[test]
fn token_block_is_permutation_equivariant() {
    let (store, b) = block(16, 4);
    let x = random_tensor(&mut rng(24), &[12, 16], 1.0);
    let perm: Vec<usize> = (0..12).map(|i| (i * 5 + 2) % 12).collect();
    let run = |x: Tensor| {
        let mut g = Graph::eval();
        let xv = g.input(x);
        let o = b.forward(&mut g, &store, xv, 1, 12);
        g.value(o).clone()
    };
    let base = run(x.clone());
    let px = Tensor::from_vec(&[12, 16], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect());
    let out = run(px);
    for (r, &i) in perm.iter().enumerate() {
        assert!(max_abs_diff(out.row(r), base.row(i)) < 1e-12);
    }
}

#[test]
fn token_width_must_split_into_heads() {
    assert!(matches!(
        TokenBlock::new(&mut ParamStore::new(), &mut rng(1), "b", 10, 3, 8),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn sinusoidal_embedding_layout() {
    let pe = sinusoidal_2d(3, 4, 8);
    assert_eq!(pe.shape(), &[12, 8]);
    // origin token: sin(0)=0, cos(0)=1 in both halves
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    // the row index drives the first half, the column the second
    assert_eq!(&pe.row(1)[..4], &pe.row(0)[..4]);
    assert_eq!(&pe.row(4)[4..], &pe.row(0)[4..]);
    assert!((pe.row(4)[0] - 1f64.sin()).abs() < 1e-15);
}
