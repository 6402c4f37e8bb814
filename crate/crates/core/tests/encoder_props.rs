use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unihead_core::autodiff::{finite_difference_check, FdOptions, Graph, Init, ParameterStore};
use unihead_core::encoder::*;
use unihead_core::Tensor;

const CFG: EncoderConfig = EncoderConfig {
    layers: 2,
    width: 8,
    heads: 2,
    mlp_ratio: 2,
};

/// Encoder plus class token with every value (LN affine included) drawn at random.
fn random_store(seed: u64, cfg: &EncoderConfig) -> ParameterStore {
    let mut store = ParameterStore::new();
    declare_encoder(&mut store, "enc", cfg, seed).unwrap();
    store.declare("token.cls", &[cfg.width], Init::Zero).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths: Vec<String> = store.paths().map(String::from).collect();
    for p in paths {
        let shape = store.get(&p).unwrap().shape().to_vec();
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        store.set(&p, Tensor::new(&shape, v).unwrap()).unwrap();
    }
    store
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> Tensor {
    Tensor::new(&[n, t, d], (0..n * t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn permuting_point_tokens_permutes_outputs() {
    let (k, d) = (6, CFG.width);
    for draw in 0..100u64 {
        let store = random_store(draw, &CFG);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let x = random_tokens(&mut rng, 1, k, d);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut px = vec![0.0; k * d];
        for (dst, &src) in perm.iter().enumerate() {
            px[dst * d..(dst + 1) * d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
        }
        let run = |tokens: Tensor| {
            let mut g = Graph::new();
            let f = g.input(tokens);
            let z = attach_task_token(&mut g, &store, f, TokenKind::Class).unwrap();
            let out = encode(&mut g, &store, z, &CFG, "enc").unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(x.clone());
        let b = run(Tensor::new(&[1, k, d], px).unwrap());
        for c in 0..d {
            assert!((a[c] - b[c]).abs() < 1e-9, "task token moved");
        }
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let (u, v) = (a[(1 + src) * d + c], b[(1 + dst) * d + c]);
                assert!((u - v).abs() < 1e-9, "draw {draw}: {u} vs {v}");
            }
        }
    }
}

fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
        .collect()
}

/// `x · W[:, cols] + b` with `W` stored row-major `[rows, full]`.
fn affine(x: &[f64], w: &Tensor, b: &Tensor, cols: std::ops::Range<usize>) -> Vec<f64> {
    let full = w.shape()[1];
    let start = cols.start;
    cols.map(|j| {
        b.data()[j - start] + x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * full + j]).sum::<f64>()
    })
    .collect()
}

#[test]
fn single_token_matches_dense_oracle() {
    let cfg = EncoderConfig { layers: 1, ..CFG };
    let d = cfg.width;
    let store = random_store(7, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tokens(&mut rng, 1, 1, d);
    let mut g = Graph::new();
    let z = g.input(x.clone());
    let out = encode(&mut g, &store, z, &cfg, "enc").unwrap();

    let p = |s: &str| store.get(&format!("enc.blocks.0.{s}")).unwrap();
    let z0 = x.data();
    // one key: attention weight is exactly 1, so the block reads the value row
    let h = layernorm(z0, p("ln1.gamma").data(), p("ln1.beta").data());
    let v = affine(&h, p("attn.qkv.w"), p("attn.qkv.bv"), 2 * d..3 * d);
    let o = affine(&v, p("attn.out.w"), p("attn.out.b"), 0..d);
    let z1: Vec<f64> = o.iter().zip(z0).map(|(a, b)| a + b).collect();
    let h = layernorm(&z1, p("ln2.gamma").data(), p("ln2.beta").data());
    let m = affine(&h, p("mlp.fc1.w"), p("mlp.fc1.b"), 0..cfg.mlp_ratio * d);
    let m: Vec<f64> = m
        .iter()
        .map(|&u| 0.5 * u * (1.0 + libm::erf(u / std::f64::consts::SQRT_2)))
        .collect();
    let m = affine(&m, p("mlp.fc2.w"), p("mlp.fc2.b"), 0..d);
    let expect: Vec<f64> = m.iter().zip(&z1).map(|(a, b)| a + b).collect();
    for (a, b) in g.value(out).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let store = random_store(3, &CFG);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tokens(&mut rng, 2, 5, CFG.width);
    let w = random_tokens(&mut rng, 2, 6, CFG.width);
    let report = finite_difference_check(
        |g, p| {
            let f = g.input(x.clone());
            let z = attach_task_token(g, p, f, TokenKind::Class)?;
            let out = encode(g, p, z, &CFG, "enc")?;
            let wi = g.input(w.clone());
            let y = g.mul(out, wi)?;
            g.sum(y, None)
        },
        &store,
        &FdOptions {
            eps: 1e-5,
            sample: store.num_coordinates(),
            seed: 0,
            corrupt: None,
        },
    )
    .unwrap();
    assert!(report.checked == store.num_coordinates());
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
