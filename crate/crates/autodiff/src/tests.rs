use super::*;
use ndarray::{ArrayD, IxDyn};

fn fill(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            lo + u * (hi - lo)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central-difference check of `build` (a scalar function of its inputs)
/// against the analytic gradient, for every input element.
fn fd_check(
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    inputs: &[ArrayD<f64>],
    eps: f64,
    tol: f64,
) {
    let eval = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let loss = build(&mut g, &ids);
        g.scalar_value(loss)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.grad(loss, &ids);

    for (pi, input) in inputs.iter().enumerate() {
        let analytic = g
            .value(grads[pi].expect("input should receive a gradient"))
            .clone();
        assert_eq!(analytic.shape(), input.shape());
        for flat in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[pi].as_slice_mut().unwrap()[flat] += eps;
            minus[pi].as_slice_mut().unwrap()[flat] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[flat];
            let denom = a.abs().max(fd.abs()).max(1e-4);
            assert!(
                (a - fd).abs() / denom < tol,
                "input {pi} elem {flat}: analytic {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let x = fill(&[3, 4], 1, 0.2, 1.5);
    fd_check(
        |g, ids| {
            let e = g.exp(ids[0]);
            let l = g.ln(ids[0]);
            let q = g.sqrt(ids[0]);
            let s = g.square(ids[0]);
            let sig = g.sigmoid(ids[0]);
            let a = g.add(e, l);
            let b = g.add(q, s);
            let c = g.add(a, b);
            let d = g.add(c, sig);
            g.sum_all(d)
        },
        &[x],
        1e-6,
        1e-6,
    );
}

#[test]
fn arithmetic_gradients_match_finite_differences() {
    let a = fill(&[2, 3], 2, -1.0, 1.0);
    let b = fill(&[2, 3], 3, 0.5, 2.0);
    fd_check(
        |g, ids| {
            let m = g.mul(ids[0], ids[1]);
            let d = g.div(ids[0], ids[1]);
            let s = g.sub(m, d);
            let n = g.neg(s);
            let sc = g.mul_scalar(n, 1.7);
            let sc = g.add_scalar(sc, 0.3);
            let sq = g.square(sc);
            g.mean_all(sq)
        },
        &[a, b],
        1e-6,
        1e-6,
    );
}

#[test]
fn piecewise_ops_match_finite_differences_away_from_kinks() {
    // values kept away from the kink locations
    let x = fill(&[20], 4, 0.1, 1.0);
    let x = &x - &ArrayD::from_elem(IxDyn(&[20]), 0.55); // mix of signs, none near 0
    fd_check(
        |g, ids| {
            let r = g.leaky_relu(ids[0], 0.2);
            let c = g.clamp(ids[0], -0.3, 0.3);
            let s = g.add(r, c);
            g.sum_all(s)
        },
        &[x],
        1e-7,
        1e-5,
    );
}

#[test]
fn reduction_and_broadcast_gradients() {
    let x = fill(&[2, 3, 4], 5, -1.0, 1.0);
    let b = fill(&[1, 3, 1], 6, -1.0, 1.0);
    fd_check(
        |g, ids| {
            let bb = g.broadcast_to(ids[1], &[2, 3, 4]);
            let y = g.mul(ids[0], bb);
            let m = g.sum_axes(y, &[0, 2]);
            let sq = g.square(m);
            g.sum_all(sq)
        },
        &[x, b],
        1e-6,
        1e-6,
    );
}

#[test]
fn matmul_reshape_permute_gradients() {
    let a = fill(&[3, 4], 7, -1.0, 1.0);
    let b = fill(&[4, 2], 8, -1.0, 1.0);
    fd_check(
        |g, ids| {
            let m = g.matmul(ids[0], ids[1]); // [3,2]
            let p = g.permute(m, &[1, 0]); // [2,3]
            let r = g.reshape(p, &[6]);
            let s = g.square(r);
            g.sum_all(s)
        },
        &[a, b],
        1e-6,
        1e-6,
    );
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let x = fill(&[2, 2, 4, 4, 4], 9, -1.0, 1.0);
    let w = fill(&[3, 2, 4, 4, 4], 10, -0.5, 0.5);
    fd_check(
        |g, ids| {
            let y = g.conv3d(ids[0], ids[1], 2, 1);
            let s = g.square(y);
            g.sum_all(s)
        },
        &[x, w],
        1e-5,
        1e-5,
    );
}

#[test]
fn conv_transpose3d_gradients_match_finite_differences() {
    let x = fill(&[1, 3, 2, 2, 2], 11, -1.0, 1.0);
    let w = fill(&[3, 2, 4, 4, 4], 12, -0.5, 0.5);
    fd_check(
        |g, ids| {
            let y = g.conv_transpose3d(ids[0], ids[1], 2, 1);
            let s = g.square(y);
            g.sum_all(s)
        },
        &[x, w],
        1e-5,
        1e-5,
    );
}

#[test]
fn pointwise_conv_gradients() {
    let x = fill(&[2, 3, 3, 3, 3], 13, -1.0, 1.0);
    let w = fill(&[2, 3, 1, 1, 1], 14, -0.5, 0.5);
    fd_check(
        |g, ids| {
            let y = g.conv3d(ids[0], ids[1], 1, 0);
            let s = g.square(y);
            g.sum_all(s)
        },
        &[x, w],
        1e-5,
        1e-5,
    );
}

#[test]
fn concat_slice_gradients() {
    let a = fill(&[2, 2, 2, 2, 2], 15, -1.0, 1.0);
    let b = fill(&[2, 3, 2, 2, 2], 16, -1.0, 1.0);
    fd_check(
        |g, ids| {
            let c = g.concat_channels(&[ids[0], ids[1]]); // 5 channels
            let mid = g.slice_channels(c, 1, 3);
            let s = g.square(mid);
            g.sum_all(s)
        },
        &[a, b],
        1e-6,
        1e-6,
    );
}

#[test]
fn second_order_gradient_penalty_path() {
    // f(w) = || d/dx c(x; w) ||^2 with c a tiny conv net; check df/dw by FD.
    let x0 = fill(&[2, 1, 4, 4, 4], 17, -1.0, 1.0);
    let w0 = fill(&[2, 1, 4, 4, 4], 18, -0.5, 0.5);
    let v0 = fill(&[16, 1], 19, -0.5, 0.5); // 2 channels x 2^3 spatial

    let eval = |w: &ArrayD<f64>, v: &ArrayD<f64>| -> (f64, Option<(ArrayD<f64>, ArrayD<f64>)>) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let wn = g.leaf(w.clone());
        let vn = g.leaf(v.clone());
        let h = g.conv3d(x, wn, 2, 1); // [2, 2, 2, 2, 2]
        let act = g.sigmoid(h);
        let flat = g.reshape(act, &[2, 16]);
        let score = g.matmul(flat, vn); // [2, 1]
        let total = g.sum_all(score);
        let gx = g.grad(total, &[x])[0].expect("x grad");
        let sq = g.square(gx);
        let f = g.sum_all(sq);
        let grads = g.grad(f, &[wn, vn]);
        let out = grads[0].zip(grads[1]).map(|(gw, gv)| {
            (g.value(gw).clone(), g.value(gv).clone())
        });
        (g.scalar_value(f), out)
    };

    let (_, grads) = eval(&w0, &v0);
    let (gw, gv) = grads.expect("second-order grads");
    let eps = 1e-5;

    for flat in 0..w0.len() {
        let mut plus = w0.clone();
        let mut minus = w0.clone();
        plus.as_slice_mut().unwrap()[flat] += eps;
        minus.as_slice_mut().unwrap()[flat] -= eps;
        let fd = (eval(&plus, &v0).0 - eval(&minus, &v0).0) / (2.0 * eps);
        let a = gw.as_slice().unwrap()[flat];
        let denom = a.abs().max(fd.abs()).max(1e-4);
        assert!(
            (a - fd).abs() / denom < 1e-4,
            "w[{flat}]: analytic {a} vs fd {fd}"
        );
    }
    for flat in 0..v0.len() {
        let mut plus = v0.clone();
        let mut minus = v0.clone();
        plus.as_slice_mut().unwrap()[flat] += eps;
        minus.as_slice_mut().unwrap()[flat] -= eps;
        let fd = (eval(&w0, &plus).0 - eval(&w0, &minus).0) / (2.0 * eps);
        let a = gv.as_slice().unwrap()[flat];
        let denom = a.abs().max(fd.abs()).max(1e-4);
        assert!(
            (a - fd).abs() / denom < 1e-4,
            "v[{flat}]: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn unreachable_input_gets_no_gradient() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(fill(&[3], 20, -1.0, 1.0));
    let b = g.leaf(fill(&[3], 21, -1.0, 1.0));
    let s = g.square(a);
    let loss = g.sum_all(s);
    let grads = g.grad(loss, &[a, b]);
    assert!(grads[0].is_some());
    assert!(grads[1].is_none());
}

#[test]
fn reused_node_accumulates_gradient() {
    // loss = sum(x * x + x) -> dloss/dx = 2x + 1
    let x0 = fill(&[4], 22, -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let xx = g.mul(x, x);
    let s = g.add(xx, x);
    let loss = g.sum_all(s);
    let gx = g.grad(loss, &[x])[0].unwrap();
    let expect = x0.mapv(|v| 2.0 * v + 1.0);
    for (a, b) in g.value(gx).iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn detach_blocks_gradient_flow() {
    let x0 = fill(&[4], 23, 0.5, 1.5);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let d = g.detach(x);
    let y = g.mul(x, d); // derivative should treat d as constant
    let loss = g.sum_all(y);
    let gx = g.grad(loss, &[x])[0].unwrap();
    for (a, b) in g.value(gx).iter().zip(x0.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn sigmoid_output_range_and_values() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(fill(&[100], 24, -8.0, 8.0));
    let y = g.sigmoid(x);
    for &v in g.value(y).iter() {
        assert!(v > 0.0 && v < 1.0);
    }
    let z = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.0));
    let s = g.sigmoid(z);
    assert!((g.scalar_value(s) - 0.5).abs() < 1e-12);
}
