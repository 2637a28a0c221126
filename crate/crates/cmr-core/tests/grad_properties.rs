//! Property sweep: every differentiable operation passes the finite
//! difference check on random small shapes (extents <= 5), with inputs
//! sampled away from activation kinks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use cmr_core::autodiff::{grad_check, Graph, NodeId, Tensor, TensorError};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            // keep clear of relu kinks and log domain edges
            if v.abs() < 5e-3 {
                5e-3_f64.copysign(if v == 0.0 { 1.0 } else { v })
            } else {
                v
            }
        })
        .collect()
}

fn rand_shape2(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=5), rng.gen_range(1..=5))
}

fn check<F>(name: &str, t: &Tensor, f: F)
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    let err = grad_check(f, t, H).unwrap();
    assert!(err < TOL, "{name}: max rel err {err}");
}

#[test]
fn elementwise_and_scale_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let (m, n) = rand_shape2(&mut rng);
        let t = Tensor::new(rand_data(&mut rng, m * n), &[m, n]).unwrap();
        let other = Tensor::new(rand_data(&mut rng, m * n), &[m, n]).unwrap();

        let o = other.clone();
        check("add", &t, move |g, x| {
            let y = g.leaf(o.clone());
            let s = g.add(x, y)?;
            let sq = g.mul(s, s)?;
            g.sum(sq, None)
        });
        let o = other.clone();
        check("sub", &t, move |g, x| {
            let y = g.leaf(o.clone());
            let s = g.sub(x, y)?;
            let sq = g.mul(s, s)?;
            g.sum(sq, None)
        });
        let o = other.clone();
        check("mul", &t, move |g, x| {
            let y = g.leaf(o.clone());
            let s = g.mul(x, y)?;
            g.sum(s, None)
        });
        check("scale", &t, |g, x| {
            let s = g.scale(x, -1.7);
            let sq = g.mul(s, s)?;
            g.sum(sq, None)
        });
        check("relu", &t, |g, x| {
            let r = g.relu(x);
            let sq = g.mul(r, r)?;
            g.sum(sq, None)
        });
        check("tanh", &t, |g, x| {
            let r = g.tanh(x);
            let sq = g.mul(r, r)?;
            g.sum(sq, None)
        });
        check("exp", &t, |g, x| {
            let r = g.exp(x);
            g.sum(r, None)
        });
        // log needs positive inputs
        let pos = Tensor::new(
            rand_data(&mut rng, m * n).iter().map(|v| v.abs() + 0.5).collect(),
            &[m, n],
        )
        .unwrap();
        check("log", &pos, |g, x| {
            let r = g.log(x)?;
            let sq = g.mul(r, r)?;
            g.sum(sq, None)
        });
    }
}

#[test]
fn scalar_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::new(rand_data(&mut rng, 4), &[4]).unwrap();
    check("scalar broadcast grad to scalar side", &Tensor::new(vec![0.7], &[1]).unwrap(), {
        let t = t.clone();
        move |g, s| {
            let x = g.leaf(t.clone());
            let y = g.mul(x, s)?;
            let sq = g.mul(y, y)?;
            g.sum(sq, None)
        }
    });
    check("scalar broadcast grad to tensor side", &t, |g, x| {
        let s = g.leaf(Tensor::new(vec![-0.4], &[1]).unwrap());
        let y = g.add(x, s)?;
        let sq = g.mul(y, y)?;
        g.sum(sq, None)
    });
}

#[test]
fn matmul_transpose_reshape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let (m, k) = rand_shape2(&mut rng);
        let n = rng.gen_range(1..=5);
        let a = Tensor::new(rand_data(&mut rng, m * k), &[m, k]).unwrap();
        let b = Tensor::new(rand_data(&mut rng, k * n), &[k, n]).unwrap();
        let bc = b.clone();
        check("matmul lhs", &a, move |g, x| {
            let y = g.leaf(bc.clone());
            let c = g.matmul(x, y)?;
            let sq = g.mul(c, c)?;
            g.sum(sq, None)
        });
        let ac = a.clone();
        check("matmul rhs", &b, move |g, y| {
            let x = g.leaf(ac.clone());
            let c = g.matmul(x, y)?;
            let sq = g.mul(c, c)?;
            g.sum(sq, None)
        });
        check("transpose", &a, |g, x| {
            let tr = g.transpose(x)?;
            let sq = g.mul(tr, tr)?;
            g.sum(sq, None)
        });
        check("reshape", &a, move |g, x| {
            let r = g.reshape(x, &[k * m])?;
            let sq = g.mul(r, r)?;
            g.sum(sq, None)
        });
    }
}

#[test]
fn reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let (m, n) = rand_shape2(&mut rng);
        let t = Tensor::new(rand_data(&mut rng, m * n), &[m, n]).unwrap();
        for axis in [None, Some(0), Some(1)] {
            let tc = t.clone();
            check(&format!("sum axis {axis:?}"), &tc, move |g, x| {
                let r = g.sum(x, axis)?;
                let sq = g.mul(r, r)?;
                g.sum(sq, None)
            });
            let tc = t.clone();
            check(&format!("mean axis {axis:?}"), &tc, move |g, x| {
                let r = g.mean(x, axis)?;
                let sq = g.mul(r, r)?;
                g.sum(sq, None)
            });
        }
        // max: resample until groups have clear winners so the subgradient
        // is well-defined at the probe point
        let data: Vec<f64> = (0..m * n).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let t = Tensor::new(data, &[m, n]).unwrap();
        for axis in [None, Some(0), Some(1)] {
            let tc = t.clone();
            check(&format!("max axis {axis:?}"), &tc, move |g, x| {
                let r = g.max(x, axis)?;
                let sq = g.mul(r, r)?;
                g.sum(sq, None)
            });
        }
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let (m, n) = rand_shape2(&mut rng);
        let t = Tensor::new(rand_data(&mut rng, m * n), &[m, n]).unwrap();
        let other = Tensor::new(rand_data(&mut rng, m * n), &[m, n]).unwrap();

        let oc = other.clone();
        check("concat axis 0", &t, move |g, x| {
            let y = g.leaf(oc.clone());
            let c = g.concat(&[x, y], 0)?;
            let sq = g.mul(c, c)?;
            g.sum(sq, None)
        });
        let oc = other.clone();
        check("concat axis 1", &t, move |g, x| {
            let y = g.leaf(oc.clone());
            let c = g.concat(&[x, y], 1)?;
            let sq = g.mul(c, c)?;
            g.sum(sq, None)
        });
        if n >= 2 {
            let len = rng.gen_range(1..n);
            let start = rng.gen_range(0..=(n - len));
            check("slice cols", &t, move |g, x| {
                let s = g.slice(x, 1, start, len)?;
                let sq = g.mul(s, s)?;
                g.sum(sq, None)
            });
        }
        let sq_n = rng.gen_range(2..=5);
        let sq_t = Tensor::new(rand_data(&mut rng, sq_n * sq_n), &[sq_n, sq_n]).unwrap();
        check("diag", &sq_t, |g, x| {
            let d = g.diag(x)?;
            let sq = g.mul(d, d)?;
            g.sum(sq, None)
        });
        let v = Tensor::new(rand_data(&mut rng, m), &[m]).unwrap();
        check("expand_cols", &v, move |g, x| {
            let e = g.expand_cols(x, n)?;
            let sq = g.mul(e, e)?;
            g.sum(sq, None)
        });
        check("add_bias x side", &t, move |g, x| {
            let b = g.constant(vec![0.3; n], &[n])?;
            let y = g.add_bias(x, b)?;
            let sq = g.mul(y, y)?;
            g.sum(sq, None)
        });
        let bias = Tensor::new(rand_data(&mut rng, n), &[n]).unwrap();
        let tc = t.clone();
        check("add_bias bias side", &bias, move |g, b| {
            let x = g.leaf(tc.clone());
            let y = g.add_bias(x, b)?;
            let sq = g.mul(y, y)?;
            g.sum(sq, None)
        });
    }
}

#[test]
fn table_lookup_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = 5;
    let cols = 4;
    let table = Tensor::new(rand_data(&mut rng, rows * cols), &[rows, cols]).unwrap();
    let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..rows)).collect();
    check("gather_rows", &table, move |g, t| {
        let r = g.gather_rows(t, &ids)?;
        let sq = g.mul(r, r)?;
        g.sum(sq, None)
    });
}

#[test]
fn normalization_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let (m, n) = (rng.gen_range(1..=5), rng.gen_range(2..=5));
        let t = Tensor::new(rand_data(&mut rng, m * n), &[m, n]).unwrap();
        let w = Tensor::new(rand_data(&mut rng, m * n), &[m, n]).unwrap();

        let wc = w.clone();
        check("softmax_rows", &t, move |g, x| {
            let s = g.softmax_rows(x)?;
            let wid = g.leaf(wc.clone());
            let p = g.mul(s, wid)?;
            g.sum(p, None)
        });
        let wc = w.clone();
        check("normalize_rows", &t, move |g, x| {
            let s = g.normalize_rows(x)?;
            let wid = g.leaf(wc.clone());
            let p = g.mul(s, wid)?;
            g.sum(p, None)
        });
        let gamma = Tensor::new(rand_data(&mut rng, n), &[n]).unwrap();
        let beta = Tensor::new(rand_data(&mut rng, n), &[n]).unwrap();
        if n >= 2 {
            let (gc, bc) = (gamma.clone(), beta.clone());
            check("layer_norm x", &t, move |g, x| {
                let gid = g.leaf(gc.clone());
                let bid = g.leaf(bc.clone());
                let y = g.layer_norm(x, gid, bid, 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum(sq, None)
            });
            let tc = t.clone();
            let bc = beta.clone();
            check("layer_norm gamma", &gamma, move |g, gm| {
                let xid = g.leaf(tc.clone());
                let bid = g.leaf(bc.clone());
                let y = g.layer_norm(xid, gm, bid, 1e-5)?;
                let sq = g.mul(y, y)?;
                g.sum(sq, None)
            });
        }
        // masked softmax with one live column masked out
        if n >= 3 {
            let mask: Vec<bool> = (0..n).map(|j| j != 1).collect();
            let wc = w.clone();
            check("softmax_rows_masked", &t, move |g, x| {
                let s = g.softmax_rows_masked(x, &mask)?;
                let wid = g.leaf(wc.clone());
                let p = g.mul(s, wid)?;
                g.sum(p, None)
            });
        }
    }
}
