use adgen_core::numeric::{
    grad_check, GradCheckConfig, Graph, OptimConfig, OptimState, Stencil, Tensor, Var,
};
use adgen_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 50;

/// `sum(out * w)` with a fixed random weight, so every output element gets a
/// distinct upstream gradient.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=16), rng.gen_range(1..=16))
}

fn check<F>(name: &str, f: F, params: &[Tensor], seed: u64)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // random rows can have tiny variance, where layer_norm curves sharply
    // enough to defeat the O(eps^2) stencil
    let cfg = GradCheckConfig {
        seed,
        stencil: Stencil::FivePoint,
        ..Default::default()
    };
    let rep = grad_check(f, params, &cfg).unwrap();
    assert!(
        rep.max_rel_err < TOL,
        "{name} seed {seed}: max rel err {:e}",
        rep.max_rel_err
    );
    assert!(rep.checked > 0, "{name} seed {seed}: nothing checked");
}

#[test]
fn binary_ops_pass_grad_check() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k) = dims(&mut rng);
        let n = rng.gen_range(1..=16);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let c = Tensor::randn(&[m, k], 1.0, &mut rng);
        let row = Tensor::randn(&[1, k], 1.0, &mut rng);

        check(
            "matmul",
            |g, v| {
                let o = g.matmul(v[0], v[1])?;
                weighted_sum(g, o, seed)
            },
            &[a.clone(), b],
            seed,
        );
        check(
            "add",
            |g, v| {
                let o = g.add(v[0], v[1])?;
                weighted_sum(g, o, seed)
            },
            &[a.clone(), c.clone()],
            seed,
        );
        check(
            "add_row",
            |g, v| {
                let o = g.add(v[0], v[1])?;
                weighted_sum(g, o, seed)
            },
            &[a.clone(), row.clone()],
            seed,
        );
        check(
            "sub",
            |g, v| {
                let o = g.sub(v[0], v[1])?;
                weighted_sum(g, o, seed)
            },
            &[a.clone(), c.clone()],
            seed,
        );
        check(
            "mul",
            |g, v| {
                let o = g.mul(v[0], v[1])?;
                weighted_sum(g, o, seed)
            },
            &[a.clone(), c],
            seed,
        );
        check(
            "mul_row",
            |g, v| {
                let o = g.mul(v[0], v[1])?;
                weighted_sum(g, o, seed)
            },
            &[a, row],
            seed,
        );
    }
}

#[test]
fn unary_ops_pass_grad_check() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let (m, n) = dims(&mut rng);
        let x = Tensor::randn(&[m, n], 1.0, &mut rng);
        let pos = Tensor::uniform(&[m, n], 0.5, 2.0, &mut rng);
        let xs = [x.clone()];

        check(
            "scale",
            |g, v| {
                let o = g.scale(v[0], -1.7);
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "add_scalar",
            |g, v| {
                let o = g.add_scalar(v[0], 0.3);
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "transpose",
            |g, v| {
                let o = g.transpose(v[0])?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "softmax0",
            |g, v| {
                let o = g.softmax(v[0], 0)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "softmax1",
            |g, v| {
                let o = g.softmax(v[0], 1)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "log_softmax",
            |g, v| {
                let o = g.log_softmax(v[0])?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "log",
            |g, v| {
                let o = g.log(v[0]);
                weighted_sum(g, o, seed)
            },
            &[pos],
            seed,
        );
        check(
            "exp",
            |g, v| {
                let o = g.exp(v[0]);
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "relu",
            |g, v| {
                let o = g.relu(v[0]);
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "sum",
            |g, v| {
                let s = g.sum(v[0]);
                Ok(g.scale(s, 0.5))
            },
            &xs,
            seed,
        );
        check(
            "mean0",
            |g, v| {
                let o = g.mean(v[0], 0)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "mean1",
            |g, v| {
                let o = g.mean(v[0], 1)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        if n > 1 {
            check(
                "layer_norm",
                |g, v| {
                    let o = g.layer_norm(v[0])?;
                    weighted_sum(g, o, seed)
                },
                &xs,
                seed,
            );
        }
    }
}

#[test]
fn indexing_ops_pass_grad_check() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let (m, n) = dims(&mut rng);
        let x = Tensor::randn(&[m, n], 1.0, &mut rng);
        let y = Tensor::randn(&[m, n], 1.0, &mut rng);
        let idx: Vec<usize> = (0..rng.gen_range(1..=16))
            .map(|_| rng.gen_range(0..m))
            .collect();
        let cols: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let (r0, r1) = {
            let a = rng.gen_range(0..m);
            (a, rng.gen_range(a + 1..=m))
        };
        let (c0, c1) = {
            let a = rng.gen_range(0..n);
            (a, rng.gen_range(a + 1..=n))
        };
        let xs = [x.clone()];

        // repeated indices exercise gradient accumulation in the lookup
        check(
            "embedding",
            |g, v| {
                let o = g.embedding(v[0], &idx)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "pick",
            |g, v| {
                let o = g.pick(v[0], &cols)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "slice0",
            |g, v| {
                let o = g.slice(v[0], 0, r0, r1)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "slice1",
            |g, v| {
                let o = g.slice(v[0], 1, c0, c1)?;
                weighted_sum(g, o, seed)
            },
            &xs,
            seed,
        );
        check(
            "concat0",
            |g, v| {
                let o = g.concat(&[v[0], v[1]], 0)?;
                weighted_sum(g, o, seed)
            },
            &[x.clone(), y.clone()],
            seed,
        );
        check(
            "concat1",
            |g, v| {
                let o = g.concat(&[v[0], v[1]], 1)?;
                weighted_sum(g, o, seed)
            },
            &[x, y],
            seed,
        );
    }
}

#[test]
fn composite_attention_block_passes_grad_check() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3000);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let wq = Tensor::randn(&[8, 8], 0.4, &mut rng);
        let wk = Tensor::randn(&[8, 8], 0.4, &mut rng);
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let p = g.softmax(s, 1)?;
            let h = g.matmul(p, v[0])?;
            let r = g.add(h, v[0])?;
            let n = g.layer_norm(r)?;
            weighted_sum(g, n, seed)
        };
        check("attention", f, &[x, wq, wk], seed);
    }
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
        }
    }
    out
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (m, k) = dims(&mut rng);
        let n = rng.gen_range(1..=16);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let p = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(p).data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[7, 9], 1.0, &mut rng);
        let b = Tensor::randn(&[9, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let va = g.param(&a);
        let vb = g.param(&b);
        let p = g.matmul(va, vb).unwrap();
        let s = g.log_softmax(p).unwrap();
        let l = g.sum(s);
        let loss = g.value(l).item();
        let mut grads = g.backward(l).unwrap();
        (loss, grads.take(va).unwrap(), grads.take(vb).unwrap())
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

/// Independent Adam: bias-corrected moments, no weight decay.
fn adam_oracle(w: &mut [f64], grads: &[Vec<f64>], lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_hand_applied_update_rule() {
    let grads = vec![
        vec![2.0, -0.5, 0.0],
        vec![1.0, 0.25, -3.0],
        vec![-0.1, 4.0, 1e-3],
    ];
    let mut expected = vec![1.0, -2.0, 0.5];
    adam_oracle(&mut expected, &grads, 0.01);

    let mut params = vec![Tensor::row(&[1.0, -2.0, 0.5])];
    let mut state = OptimState::new(OptimConfig {
        lr: 0.01,
        ..Default::default()
    });
    for g in &grads {
        state.step(&mut params, &[Some(Tensor::row(g))]).unwrap();
    }
    assert_eq!(state.steps(), 3);
    for (a, b) in params[0].data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn adam_first_step_on_square_is_lr() {
    // f(w) = w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4, step = lr * 2 / (2 + eps)
    let mut params = vec![Tensor::scalar(1.0)];
    let mut state = OptimState::new(OptimConfig {
        lr: 0.1,
        ..Default::default()
    });
    state
        .step(&mut params, &[Some(Tensor::scalar(2.0))])
        .unwrap();
    let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    assert!((params[0].item() - expected).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        vals in proptest::collection::vec(-500.0f64..500.0, 1..60),
    ) {
        let cols = vals.len().div_ceil(rows);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        for axis in [0, 1] {
            let s = g.softmax(x, axis).unwrap();
            let t = g.value(s).clone();
            prop_assert!(t.all_finite());
            if axis == 1 {
                for r in 0..rows {
                    let sum: f64 = t.row_slice(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                }
            } else {
                for c in 0..cols {
                    let sum: f64 = (0..rows).map(|r| t.get(r, c)).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax(vals in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&vals));
        let s = g.softmax(x, 1).unwrap();
        let l = g.log_softmax(x).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g.value(l).data()) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a < 1e-300);
        }
    }
}
