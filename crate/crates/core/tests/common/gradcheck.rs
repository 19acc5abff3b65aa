//! Central finite differences (f64, h = 1e-4) against every backward pass.

use super::{fd_check, probe, random_tensor, rng, FdStats};
use voxres::layers::{Activation, Algorithm, BatchNorm3d, Conv3d, ConvUnit, Dense, GlobalAvgPool3d, Stride, VoxRes};
use voxres::optim::{bce_with_logits, l2_penalty};
use voxres::{Model, ModelConfig, Shape5, Tensor};

pub const SEEDS: u64 = 20;
pub const LAYER_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely; it sits well above
/// the ~1e-10 rounding noise of an h = 1e-4 quotient.
const FLOOR: f64 = 1e-5;
const KINK: f64 = 1e-6;

fn with_coord(t: &Tensor<f64>, i: usize, d: f64) -> Tensor<f64> {
    let mut t = t.clone();
    t.data_mut()[i] += d;
    t
}

/// One finite-difference comparison and the bounds it must meet.
#[derive(Debug, Clone)]
pub struct Check {
    pub what: String,
    pub stats: FdStats,
    pub tol: f64,
    /// Largest allowed share of kink-skipped coordinates.
    pub max_skip: f64,
}

impl Check {
    /// Layers skip at most 1 in 20 coordinates; whole networks, where one
    /// weight feeds thousands of ReLUs, at most 1 in 4.
    fn layer(what: String, stats: FdStats) -> Self {
        Check {
            what,
            stats,
            tol: LAYER_TOL,
            max_skip: 0.05,
        }
    }

    pub fn problem(&self) -> Option<String> {
        let s = self.stats;
        let total = s.checked + s.skipped;
        if s.checked == 0 {
            Some(format!("{}: nothing checked", self.what))
        } else if s.skipped as f64 > self.max_skip * total as f64 {
            Some(format!(
                "{}: {} of {total} coordinates sat on kinks",
                self.what, s.skipped
            ))
        } else if s.worst > self.tol {
            Some(format!(
                "{}: worst relative error {:.3e} > {:e}",
                self.what, s.worst, self.tol
            ))
        } else {
            None
        }
    }
}

fn all(n: usize) -> std::ops::Range<usize> {
    0..n
}

pub fn conv3d_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let stride = if seed % 2 == 0 { Stride::One } else { Stride::Two };
        let cin = 1 + (seed as usize % 4);
        let cout = 1 + (seed as usize / 4) % 3;
        let x = random_tensor::<f64>(&[2, cin, 4, 3, 5], &mut r, 1.0);
        let conv = Conv3d::new(
            random_tensor(&[cout, cin, 3, 3, 3], &mut r, 0.5),
            random_tensor(&[cout], &mut r, 0.5),
            stride,
        )
        .unwrap();
        for algo in [Algorithm::Direct, Algorithm::Lowered] {
            let (y, ctx) = conv.forward_with(&x, algo).unwrap();
            let p = random_tensor::<f64>(y.shape(), &mut r, 1.0);
            let g = conv.backward_with(&p, &ctx, algo).unwrap();
            let loss = |c: &Conv3d<f64>, x: &Tensor<f64>| probe(&c.forward_with(x, algo).unwrap().0, &p);
            let mut s = fd_check(
                g.x.data(),
                all(x.len()),
                |i, d| loss(&conv, &with_coord(&x, i, d)),
                FLOOR,
                KINK,
            );
            s.merge(fd_check(
                g.weight.data(),
                all(conv.weight.len()),
                |i, d| {
                    let mut c = conv.clone();
                    c.weight.data_mut()[i] += d;
                    loss(&c, &x)
                },
                FLOOR,
                KINK,
            ));
            s.merge(fd_check(
                g.bias.data(),
                all(cout),
                |i, d| {
                    let mut c = conv.clone();
                    c.bias.data_mut()[i] += d;
                    loss(&c, &x)
                },
                FLOOR,
                KINK,
            ));
            out.push(Check {
                max_skip: 0.0,
                ..Check::layer(format!("conv seed {seed} {algo:?}"), s)
            });
        }
    }
    out
}

pub fn batchnorm_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let c = 1 + seed as usize % 3;
        let x = random_tensor::<f64>(&[2, c, 2, 3, 2], &mut r, 2.0);
        let mut bn = BatchNorm3d::<f64>::new(c).unwrap();
        bn.gamma = random_tensor(&[c], &mut r, 1.5);
        bn.beta = random_tensor(&[c], &mut r, 1.0);
        let (y, ctx) = bn.forward(&x, true).unwrap();
        let p = random_tensor::<f64>(y.shape(), &mut r, 1.0);
        let g = bn.backward(&p, &ctx).unwrap();
        let loss = |b: &BatchNorm3d<f64>, x: &Tensor<f64>| probe(&b.forward(x, true).unwrap().0, &p);
        let mut s = fd_check(
            g.x.data(),
            all(x.len()),
            |i, d| loss(&bn, &with_coord(&x, i, d)),
            FLOOR,
            KINK,
        );
        s.merge(fd_check(
            g.gamma.data(),
            all(c),
            |i, d| {
                let mut b = bn.clone();
                b.gamma.data_mut()[i] += d;
                loss(&b, &x)
            },
            FLOOR,
            KINK,
        ));
        s.merge(fd_check(
            g.beta.data(),
            all(c),
            |i, d| {
                let mut b = bn.clone();
                b.beta.data_mut()[i] += d;
                loss(&b, &x)
            },
            FLOOR,
            KINK,
        ));
        out.push(Check::layer(format!("bn seed {seed}"), s));

        // Inference mode is affine in x.
        let (yi, ctxi) = bn.forward(&x, false).unwrap();
        let gi = bn.backward(&random_tensor(yi.shape(), &mut r, 1.0), &ctxi);
        assert!(gi.is_ok());
    }
    out
}

pub fn activation_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut r = rng(200 + seed);
        let x = random_tensor::<f64>(&[3, 17], &mut r, 1.0);
        for act in [Activation::Relu, Activation::LeakyRelu { slope: 0.01 }] {
            let (y, ctx) = act.forward(&x);
            let p = random_tensor::<f64>(y.shape(), &mut r, 1.0);
            let gx = act.backward(&p, &ctx).unwrap();
            let s = fd_check(
                gx.data(),
                all(x.len()),
                |i, d| probe(&act.forward(&with_coord(&x, i, d)).0, &p),
                FLOOR,
                KINK,
            );
            out.push(Check::layer(format!("{act:?} seed {seed}"), s));
        }
    }
    out
}

pub fn dense_and_pool_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        let (n, i, o) = (1 + seed as usize % 3, 2 + seed as usize % 5, 1 + seed as usize % 4);
        let x = random_tensor::<f64>(&[n, i], &mut r, 1.0);
        let dense = Dense::new(random_tensor(&[i, o], &mut r, 1.0), random_tensor(&[o], &mut r, 1.0)).unwrap();
        let (y, ctx) = dense.forward(&x).unwrap();
        let p = random_tensor::<f64>(y.shape(), &mut r, 1.0);
        let g = dense.backward(&p, &ctx).unwrap();
        let loss = |l: &Dense<f64>, x: &Tensor<f64>| probe(&l.forward(x).unwrap().0, &p);
        let mut s = fd_check(
            g.x.data(),
            all(x.len()),
            |k, d| loss(&dense, &with_coord(&x, k, d)),
            FLOOR,
            KINK,
        );
        s.merge(fd_check(
            g.weight.data(),
            all(i * o),
            |k, d| {
                let mut l = dense.clone();
                l.weight.data_mut()[k] += d;
                loss(&l, &x)
            },
            FLOOR,
            KINK,
        ));
        s.merge(fd_check(
            g.bias.data(),
            all(o),
            |k, d| {
                let mut l = dense.clone();
                l.bias.data_mut()[k] += d;
                loss(&l, &x)
            },
            FLOOR,
            KINK,
        ));
        out.push(Check::layer(format!("dense seed {seed}"), s));

        let xp = random_tensor::<f64>(&[2, 3, 2, 3, 4], &mut r, 1.0);
        let (yp, pctx) = GlobalAvgPool3d.forward(&xp).unwrap();
        let pp = random_tensor::<f64>(yp.shape(), &mut r, 1.0);
        let gp = GlobalAvgPool3d.backward(&pp, &pctx).unwrap();
        let s = fd_check(
            gp.data(),
            all(xp.len()),
            |k, d| probe(&GlobalAvgPool3d.forward(&with_coord(&xp, k, d)).unwrap().0, &pp),
            FLOOR,
            KINK,
        );
        out.push(Check::layer(format!("pool seed {seed}"), s));
    }
    out
}

/// Checks every input and parameter coordinate of a composite layer whose
/// parameters are reachable through `params_mut`.
fn composite_check<L: Clone>(
    what: String,
    layer: &L,
    x: &Tensor<f64>,
    p: &Tensor<f64>,
    forward: impl Fn(&L, &Tensor<f64>) -> Tensor<f64>,
    grads: (Tensor<f64>, Vec<(&'static str, Tensor<f64>)>),
    param: impl Fn(&mut L, &str) -> *mut Tensor<f64>,
) -> Check {
    let loss = |l: &L, x: &Tensor<f64>| probe(&forward(l, x), p);
    let mut s = fd_check(
        grads.0.data(),
        all(x.len()),
        |i, d| loss(layer, &with_coord(x, i, d)),
        FLOOR,
        KINK,
    );
    for (name, g) in &grads.1 {
        s.merge(fd_check(
            g.data(),
            all(g.len()),
            |i, d| {
                let mut l = layer.clone();
                // SAFETY: the pointer targets a tensor owned by `l`, which outlives this use.
                unsafe { (*param(&mut l, name)).data_mut()[i] += d };
                loss(&l, x)
            },
            FLOOR,
            KINK,
        ));
    }
    Check::layer(what, s)
}

pub fn conv_unit_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        let stride = if seed % 2 == 0 { Stride::One } else { Stride::Two };
        let (cin, cout) = (1 + seed as usize % 2, 2);
        let mut unit = ConvUnit::<f64>::new(cin, cout, stride).unwrap();
        unit.conv.weight = random_tensor(unit.conv.weight.shape(), &mut r, 0.5);
        unit.conv.bias = random_tensor(&[cout], &mut r, 0.5);
        unit.bn.gamma = random_tensor(&[cout], &mut r, 1.5);
        unit.bn.beta = random_tensor(&[cout], &mut r, 0.5);
        let x = random_tensor::<f64>(&[2, cin, 4, 4, 3], &mut r, 1.0);
        let (y, ctx) = unit.forward(&x, true).unwrap();
        let p = random_tensor::<f64>(y.shape(), &mut r, 1.0);
        let grads = unit.backward(&p, &ctx).unwrap();
        out.push(composite_check(
            format!("conv unit seed {seed}"),
            &unit,
            &x,
            &p,
            |u, x| u.forward(x, true).unwrap().0,
            grads,
            |u, name| {
                u.params_mut()
                    .into_iter()
                    .find(|(n, _, _)| *n == name)
                    .map(|(_, _, t)| t as *mut Tensor<f64>)
                    .unwrap()
            },
        ));
    }
    out
}

pub fn voxres_gradients() -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        let c = 2;
        let mut block = VoxRes::<f64>::new(c).unwrap();
        for (_, _, t) in block.params_mut() {
            *t = random_tensor(t.shape(), &mut r, 0.6);
        }
        let x = random_tensor::<f64>(&[2, c, 3, 4, 3], &mut r, 1.0);
        let (y, ctx) = block.forward(&x, true).unwrap();
        let p = random_tensor::<f64>(y.shape(), &mut r, 1.0);
        let grads = block.backward(&p, &ctx).unwrap();
        out.push(composite_check(
            format!("voxres seed {seed}"),
            &block,
            &x,
            &p,
            |b, x| b.forward(x, true).unwrap().0,
            grads,
            |b, name| {
                b.params_mut()
                    .into_iter()
                    .find(|(n, _, _)| *n == name)
                    .map(|(_, _, t)| t as *mut Tensor<f64>)
                    .unwrap()
            },
        ));
    }
    out
}

fn mini_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_shape: Shape5 {
            n: 2,
            c: 1,
            d: 8,
            h: 8,
            w: 8,
        },
        initial_filters: 2,
        main_filters: 3,
        stages: 1,
        fc_width: 4,
        seed,
        ..Default::default()
    }
}

/// Whole-network BCE gradient on ≥100 sampled coordinates, 1e-3 relative.
pub fn network_gradients() -> Check {
    use rand::Rng;
    let mut total = FdStats::default();
    for seed in 0..3 {
        let model = Model::<f32>::build(mini_config(seed)).unwrap().cast::<f64>();
        let mut r = rng(600 + seed);
        let x =
            Tensor::<f64>::from_vec(&[2, 1, 8, 8, 8], (0..1024).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let labels = [1.0, 0.0];
        let (z, ctx) = model.forward(&x, true).unwrap();
        let (_, gz) = bce_with_logits(&z, &labels).unwrap();
        let grads = model.backward(&ctx, &gz).unwrap();
        let loss = |m: &Model<f64>| bce_with_logits(&m.forward(&x, true).unwrap().0, &labels).unwrap().0;
        let names: Vec<String> = grads.keys().cloned().collect();
        for name in &names {
            let g = grads.get(name).unwrap();
            let picks: Vec<usize> = (0..g.len().min(3)).map(|_| r.random_range(0..g.len())).collect();
            let s = fd_check(
                g.data(),
                picks,
                |i, d| {
                    let mut m = model.clone();
                    let mut state = m.parameters_mut();
                    let p = state.iter_mut().find(|p| &p.name == name).unwrap();
                    p.tensor.data_mut()[i] += d;
                    drop(state);
                    loss(&m)
                },
                1e-5,
                KINK,
            );
            total.merge(s);
        }
    }
    assert!(total.checked >= 100, "only {} coordinates checked", total.checked);
    Check {
        what: "network".into(),
        stats: total,
        tol: 1e-3,
        max_skip: 0.25,
    }
}

/// BCE plus L2 through the same path the trainer uses, 1e-5 relative.
pub fn combined_loss_gradients() -> Check {
    use rand::Rng;
    let lambda = 0.05;
    let model = Model::<f32>::build(mini_config(9)).unwrap().cast::<f64>();
    let mut r = rng(700);
    let x = Tensor::<f64>::from_vec(&[2, 1, 8, 8, 8], (0..1024).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let labels = [0.0, 1.0];
    let total_loss = |m: &Model<f64>| {
        let (bce, _) = bce_with_logits(&m.forward(&x, true).unwrap().0, &labels).unwrap();
        let (l2, _) = l2_penalty(&m.parameters(), lambda).unwrap();
        bce + l2
    };
    let (z, ctx) = model.forward(&x, true).unwrap();
    let (_, gz) = bce_with_logits(&z, &labels).unwrap();
    let mut grads = model.backward(&ctx, &gz).unwrap();
    let (_, l2) = l2_penalty(&model.parameters(), lambda).unwrap();
    voxres::optim::accumulate(&mut grads, &l2).unwrap();
    let mut s = FdStats::default();
    for name in [
        "stem1.conv.weight",
        "stage1.res1.conv1.weight",
        "fc.weight",
        "out.weight",
        "out.bias",
        "stem2.bn.gamma",
    ] {
        let g = grads.get(name).unwrap();
        let picks: Vec<usize> = (0..12).map(|_| r.random_range(0..g.len())).collect();
        s.merge(fd_check(
            g.data(),
            picks,
            |i, d| {
                let mut m = model.clone();
                let mut params = m.parameters_mut();
                params.iter_mut().find(|p| p.name == name).unwrap().tensor.data_mut()[i] += d;
                drop(params);
                total_loss(&m)
            },
            1e-5,
            KINK,
        ));
    }
    Check {
        what: "network bce + l2".into(),
        stats: s,
        tol: 1e-5,
        max_skip: 0.25,
    }
}
