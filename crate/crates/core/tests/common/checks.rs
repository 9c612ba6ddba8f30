//! Oracle comparisons and finite-difference checks shared by the
//! primitive tests and the acceptance run. Each check returns what it
//! measured; callers decide the tolerance.

use inflate3d_core::ops::*;
use inflate3d_core::Tensor;
use rand::Rng;

use super::*;

fn rec(out: &mut Vec<(&'static str, f64)>, name: &'static str, fd: f64, analytic: f64) {
    out.push((name, rel_err(fd, analytic)));
}

/// Largest deviation of `conv3d_forward` from the brute-force oracle over
/// `cases` random geometries.
pub fn conv_oracle(cases: usize, seed: u64) -> f32 {
    let mut r = rng(seed);
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let (x, w, spec) = random_conv_case(&mut r);
        let fast = conv3d_forward(&x, &w, &spec).unwrap();
        let slow = naive_conv3d(&x, &w, &spec);
        if fast.shape() != slow.shape() {
            return f32::INFINITY;
        }
        worst = worst.max(fast.max_abs_diff(&slow).unwrap());
    }
    worst
}

/// Same for max and average pooling, alternating.
pub fn pool_oracle(cases: usize, seed: u64) -> f32 {
    let mut r = rng(seed);
    let mut worst = 0.0f32;
    for case in 0..cases {
        let kind = if case % 2 == 0 {
            PoolKind::Max
        } else {
            PoolKind::Avg
        };
        let (x, spec) = random_pool_case(&mut r, kind);
        let (fast, _) = pool3d_forward(&x, &spec).unwrap();
        let slow = naive_pool3d(&x, &spec);
        if fast.shape() != slow.shape() {
            return f32::INFINITY;
        }
        worst = worst.max(fast.max_abs_diff(&slow).unwrap());
    }
    worst
}

/// Every backward check for one seed.
pub fn fd_all(seed: u64) -> Vec<(&'static str, f64)> {
    [
        fd_conv,
        fd_pool,
        fd_batchnorm,
        fd_activations,
        fd_linear,
        fd_lstm,
    ]
    .iter()
    .flat_map(|f| f(seed))
    .collect()
}

pub fn random_conv_case(r: &mut impl Rng) -> (Tensor, Tensor, ConvSpec) {
    let pad = |r: &mut dyn rand::RngCore| {
        if r.random_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        }
    };
    let (n, c, o) = (
        r.random_range(1..=2),
        r.random_range(1..=3),
        r.random_range(1..=3),
    );
    let ext: [usize; 3] = [
        r.random_range(1..=5),
        r.random_range(1..=7),
        r.random_range(1..=7),
    ];
    let mut kernel = [0; 3];
    let mut stride = [0; 3];
    let mut padding = [Padding::Same; 3];
    for a in 0..3 {
        padding[a] = pad(r);
        kernel[a] = r.random_range(1..=3);
        if padding[a] == Padding::Valid {
            kernel[a] = kernel[a].min(ext[a]);
        }
        stride[a] = r.random_range(1..=3);
    }
    let planar = kernel[0] == 1 && r.random_bool(0.5);
    let x = random_tensor(&[n, c, ext[0], ext[1], ext[2]], r);
    let w = if planar {
        random_tensor(&[o, c, kernel[1], kernel[2]], r)
    } else {
        random_tensor(&[o, c, kernel[0], kernel[1], kernel[2]], r)
    };
    (
        x,
        w,
        ConvSpec {
            kernel,
            stride,
            padding,
            use_bias: false,
        },
    )
}

pub fn random_pool_case(r: &mut impl Rng, kind: PoolKind) -> (Tensor, PoolSpec) {
    let ext: [usize; 3] = [
        r.random_range(1..=5),
        r.random_range(1..=7),
        r.random_range(1..=7),
    ];
    let mut spec = PoolSpec::new(kind, [1; 3], [1; 3], Padding::Same);
    for a in 0..3 {
        spec.padding[a] = if r.random_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        spec.kernel[a] = r.random_range(1..=3);
        if spec.padding[a] == Padding::Valid {
            spec.kernel[a] = spec.kernel[a].min(ext[a]);
        }
        spec.stride[a] = r.random_range(1..=3);
    }
    let x = separated_tensor(
        &[
            r.random_range(1..=2),
            r.random_range(1..=3),
            ext[0],
            ext[1],
            ext[2],
        ],
        r,
    );
    (x, spec)
}

pub fn random_lstm(f: usize, h: usize, r: &mut impl Rng) -> LstmParams {
    let mut p = LstmParams::zeros(f, h);
    p.w_input = random_tensor(&[4 * h, f], r).scale(0.5);
    p.w_hidden = random_tensor(&[4 * h, h], r).scale(0.5);
    p.bias = random_tensor(&[4 * h], r).scale(0.5);
    for bn in [&mut p.bn_input, &mut p.bn_hidden] {
        bn.gamma = (0..4 * h).map(|_| r.random_range(0.2..0.6)).collect();
        bn.beta = (0..4 * h).map(|_| r.random_range(-0.2..0.2)).collect();
    }
    p
}

pub fn fd_conv(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(seed);
    let (x, w, spec) = random_conv_case(&mut r);
    let y = conv3d_forward(&x, &w, &spec).unwrap();
    let g = random_tensor(y.shape(), &mut r);
    let (gx, gw) = conv3d_backward(&g, &x, &w, &spec).unwrap();
    let dx = random_tensor(x.shape(), &mut r);
    let dw = random_tensor(w.shape(), &mut r);
    let fx = |xv: &Tensor| weighted_sum(&conv3d_forward(xv, &w, &spec).unwrap(), &g);
    let fw = |wv: &Tensor| weighted_sum(&conv3d_forward(&x, wv, &spec).unwrap(), &g);
    rec(
        &mut out,
        "conv input",
        directional_fd(&fx, &x, &dx, 0.5),
        gx.dot(&dx),
    );
    rec(
        &mut out,
        "conv kernel",
        directional_fd(&fw, &w, &dw, 0.5),
        gw.dot(&dw),
    );
    out
}

pub fn fd_pool(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let mut r = rng(seed);
        let (x, spec) = random_pool_case(&mut r, kind);
        let (y, cache) = pool3d_forward(&x, &spec).unwrap();
        let g = random_tensor(y.shape(), &mut r);
        let gx = pool3d_backward(&g, x.shape(), &spec, &cache).unwrap();
        let dx = random_tensor(x.shape(), &mut r);
        let f = |xv: &Tensor| weighted_sum(&pool3d_forward(xv, &spec).unwrap().0, &g);
        rec(
            &mut out,
            "pool input",
            directional_fd(&f, &x, &dx, 1e-2),
            gx.dot(&dx),
        );
    }
    out
}

pub fn fd_batchnorm(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(seed);
    let x = random_tensor(&[3, 4, 2, 3, 3], &mut r);
    let mut state = BatchNormState::new(4);
    state.gamma = (0..4).map(|_| r.random_range(0.5..1.5)).collect();
    state.beta = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
    let (y, cache) = batchnorm_forward(&x, &mut state.clone(), Mode::Train).unwrap();
    let g = random_tensor(y.shape(), &mut r);
    let (gx, ggamma, gbeta) = batchnorm_backward(&g, &cache, &state.gamma).unwrap();
    let dx = random_tensor(x.shape(), &mut r);
    let f = |xv: &Tensor| {
        weighted_sum(
            &batchnorm_forward(xv, &mut state.clone(), Mode::Train)
                .unwrap()
                .0,
            &g,
        )
    };
    rec(
        &mut out,
        "bn input",
        directional_fd(&f, &x, &dx, 1e-2),
        gx.dot(&dx),
    );

    let gamma = tensor(&[4], state.gamma.clone());
    let dgamma = random_tensor(&[4], &mut r);
    let fg = |gv: &Tensor| {
        let mut s = state.clone();
        s.gamma = gv.data().to_vec();
        weighted_sum(&batchnorm_forward(&x, &mut s, Mode::Train).unwrap().0, &g)
    };
    rec(
        &mut out,
        "bn gamma",
        directional_fd(&fg, &gamma, &dgamma, 1e-2),
        tensor(&[4], ggamma).dot(&dgamma),
    );
    let beta = tensor(&[4], state.beta.clone());
    let fb = |bv: &Tensor| {
        let mut s = state.clone();
        s.beta = bv.data().to_vec();
        weighted_sum(&batchnorm_forward(&x, &mut s, Mode::Train).unwrap().0, &g)
    };
    rec(
        &mut out,
        "bn beta",
        directional_fd(&fb, &beta, &dgamma, 1e-2),
        tensor(&[4], gbeta).dot(&dgamma),
    );

    // inference mode is an affine map of the input
    let (_, icache) = batchnorm_forward(&x, &mut state.clone(), Mode::Infer).unwrap();
    let (igx, _, _) = batchnorm_backward(&g, &icache, &state.gamma).unwrap();
    let fi = |xv: &Tensor| {
        weighted_sum(
            &batchnorm_forward(xv, &mut state.clone(), Mode::Infer)
                .unwrap()
                .0,
            &g,
        )
    };
    rec(
        &mut out,
        "bn infer input",
        directional_fd(&fi, &x, &dx, 1e-2),
        igx.dot(&dx),
    );
    out
}

pub fn fd_activations(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(seed);
    let x = separated_tensor(&[2, 3, 2, 2, 2], &mut r);
    let g = random_tensor(x.shape(), &mut r);
    let dx = random_tensor(x.shape(), &mut r);
    let f = |xv: &Tensor| weighted_sum(&relu(xv), &g);
    rec(
        &mut out,
        "relu",
        directional_fd(&f, &x, &dx, 0.02),
        relu_backward(&g, &x).unwrap().dot(&dx),
    );

    let probs = softmax_channels(&x).unwrap();
    let f = |xv: &Tensor| weighted_sum(&softmax_channels(xv).unwrap(), &g);
    let an = softmax_channels_backward(&g, &probs).unwrap().dot(&dx);
    rec(&mut out, "softmax", directional_fd(&f, &x, &dx, 1e-2), an);

    let labels = [r.random_range(0..3), r.random_range(0..3)];
    let (_, p) = softmax_cross_entropy(&x, &labels).unwrap();
    let f = |xv: &Tensor| softmax_cross_entropy(xv, &labels).unwrap().0 as f64;
    let an = softmax_cross_entropy_backward(&p, &labels)
        .unwrap()
        .dot(&dx);
    rec(
        &mut out,
        "cross entropy",
        directional_fd(&f, &x, &dx, 0.05),
        an,
    );

    let pos = tensor(
        x.shape(),
        (0..x.len()).map(|_| r.random_range(0.2f32..1.0)).collect(),
    );
    let f = |pv: &Tensor| nll_loss(pv, &labels).unwrap() as f64;
    let an = nll_loss_backward(&pos, &labels).unwrap().dot(&dx);
    rec(&mut out, "nll", directional_fd(&f, &pos, &dx, 0.05), an);
    out
}

pub fn fd_linear(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(seed);
    let x = random_tensor(&[3, 2, 1, 2, 2], &mut r);
    let w = random_tensor(&[4, 8], &mut r);
    let b = random_tensor(&[4], &mut r);
    let g = random_tensor(&[3, 4], &mut r);
    let (gx, gw, gb) = linear_backward(&g, &x, &w).unwrap();
    let (dx, dw, db) = (
        random_tensor(x.shape(), &mut r),
        random_tensor(w.shape(), &mut r),
        random_tensor(&[4], &mut r),
    );
    let fx = |v: &Tensor| weighted_sum(&linear_forward(v, &w, Some(&b)).unwrap(), &g);
    let fw = |v: &Tensor| weighted_sum(&linear_forward(&x, v, Some(&b)).unwrap(), &g);
    let fb = |v: &Tensor| weighted_sum(&linear_forward(&x, &w, Some(v)).unwrap(), &g);
    rec(
        &mut out,
        "linear input",
        directional_fd(&fx, &x, &dx, 0.5),
        gx.dot(&dx),
    );
    rec(
        &mut out,
        "linear weight",
        directional_fd(&fw, &w, &dw, 0.5),
        gw.dot(&dw),
    );
    rec(
        &mut out,
        "linear bias",
        directional_fd(&fb, &b, &db, 0.5),
        gb.dot(&db),
    );
    out
}

pub fn fd_lstm(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(seed);
    let (n, f, h, t) = (3, 4, 3, 4);
    let params = random_lstm(f, h, &mut r);
    let xs = random_tensor(&[n, f, t], &mut r);
    let (hs, cache) = lstm_sequence_forward(&xs, &mut params.clone(), Mode::Train).unwrap();
    let g = random_tensor(hs.shape(), &mut r);
    let (gx, grads) = lstm_sequence_backward(&g, &cache, &params).unwrap();
    let run = |p: &LstmParams, x: &Tensor| {
        weighted_sum(
            &lstm_sequence_forward(x, &mut p.clone(), Mode::Train)
                .unwrap()
                .0,
            &g,
        )
    };

    let dx = random_tensor(xs.shape(), &mut r);
    rec(
        &mut out,
        "lstm input",
        directional_fd(&|v| run(&params, v), &xs, &dx, 1e-2),
        gx.dot(&dx),
    );

    let dwi = random_tensor(params.w_input.shape(), &mut r);
    let fwi = |v: &Tensor| {
        run(
            &LstmParams {
                w_input: v.clone(),
                ..params.clone()
            },
            &xs,
        )
    };
    rec(
        &mut out,
        "lstm w_input",
        directional_fd(&fwi, &params.w_input, &dwi, 1e-2),
        grads.w_input.dot(&dwi),
    );

    let dwh = random_tensor(params.w_hidden.shape(), &mut r);
    let fwh = |v: &Tensor| {
        run(
            &LstmParams {
                w_hidden: v.clone(),
                ..params.clone()
            },
            &xs,
        )
    };
    rec(
        &mut out,
        "lstm w_hidden",
        directional_fd(&fwh, &params.w_hidden, &dwh, 1e-2),
        grads.w_hidden.dot(&dwh),
    );

    let db = random_tensor(&[4 * h], &mut r);
    let fb = |v: &Tensor| {
        run(
            &LstmParams {
                bias: v.clone(),
                ..params.clone()
            },
            &xs,
        )
    };
    rec(
        &mut out,
        "lstm bias",
        directional_fd(&fb, &params.bias, &db, 1e-2),
        grads.bias.dot(&db),
    );

    let gi = tensor(&[4 * h], params.bn_input.gamma.clone());
    let fgi = |v: &Tensor| {
        let mut p = params.clone();
        p.bn_input.gamma = v.data().to_vec();
        run(&p, &xs)
    };
    rec(
        &mut out,
        "lstm gamma_input",
        directional_fd(&fgi, &gi, &db, 1e-2),
        tensor(&[4 * h], grads.gamma_input.clone()).dot(&db),
    );
    let gh = tensor(&[4 * h], params.bn_hidden.gamma.clone());
    let fgh = |v: &Tensor| {
        let mut p = params.clone();
        p.bn_hidden.gamma = v.data().to_vec();
        run(&p, &xs)
    };
    rec(
        &mut out,
        "lstm gamma_hidden",
        directional_fd(&fgh, &gh, &db, 1e-2),
        tensor(&[4 * h], grads.gamma_hidden.clone()).dot(&db),
    );
    let bh = tensor(&[4 * h], params.bn_hidden.beta.clone());
    let fbh = |v: &Tensor| {
        let mut p = params.clone();
        p.bn_hidden.beta = v.data().to_vec();
        run(&p, &xs)
    };
    rec(
        &mut out,
        "lstm beta_hidden",
        directional_fd(&fbh, &bh, &db, 1e-2),
        tensor(&[4 * h], grads.beta_hidden.clone()).dot(&db),
    );
    out
}

/// Compares the receptive-field analyzer against the delta probe on every
/// node and all three axes of toy I3D. Returns the number of comparisons
/// and a description of each disagreement.
pub fn rf_mismatches() -> (usize, Vec<String>) {
    use inflate3d_core::graph::{build, receptive_fields, ArchConfig, Family};
    let g = build(&ArchConfig::toy(Family::I3d, 4, 0.25, 16, 32)).unwrap();
    let analytic = receptive_fields(&g).unwrap();
    // (axis, input extents, scan length): each probe input is at least
    // twice the largest extent on the probed axis
    let probes = [
        (0, [256, 32, 32], 18),
        (1, [16, 1248, 32], 66),
        (2, [16, 32, 1248], 66),
    ];
    let mut compared = 0;
    let mut bad = Vec::new();
    for (axis, input, scan) in probes {
        let probed = probe_fields(&g, input, axis, scan);
        for (i, node) in g.nodes.iter().enumerate() {
            // analyzer axes are (t, x, y) with x the width
            let k = [0, 2, 1][axis];
            let a = analytic[i].map(|a| (a.extent[k], a.stride[k]));
            let p = probed[i].map(|p| (p.extent, p.stride));
            compared += 1;
            if a != p {
                bad.push(format!(
                    "{} axis {axis}: analyzer {a:?} probe {p:?}",
                    node.id
                ));
            }
        }
    }
    (compared, bad)
}
