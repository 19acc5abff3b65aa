//! Forward passes against independent textbook implementations.

mod common;

use common::*;
use voxres::layers::{Algorithm, Stride};
use voxres::{Model, ModelConfig, Shape5, Tensor};

#[test]
fn conv_matches_seven_loop_oracle() {
    for seed in 0..50 {
        for algo in [Algorithm::Direct, Algorithm::Lowered] {
            let (case, worst) = conv_oracle_case(seed, algo);
            assert!(worst <= 1e-5, "{algo:?} {case}: error {worst:e}");
        }
    }
}

#[test]
fn extents_halve_with_ceiling() {
    for e in [7usize, 8, 110, 200] {
        assert_eq!(Stride::One.out_extent(e), e);
        assert_eq!(Stride::Two.out_extent(e), (e + 1) / 2);
    }
    // 110×200×200 through stem2 and three stage reductions
    let cfg = ModelConfig::default();
    let mut want = [110usize, 200, 200];
    for _ in 0..4 {
        want = want.map(|e| (e + 1) / 2);
    }
    assert_eq!(want, [7, 13, 13]);
    assert_eq!(cfg.prepool_extent().unwrap(), want);
}

fn get<'a>(m: &'a voxres::ParamSet<f64>, name: &str) -> &'a Tensor<f64> {
    m.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

/// Per-channel normalization; batch statistics when `training`, else running ones.
fn bn(x: &Tensor<f64>, s: &voxres::ParamSet<f64>, prefix: &str, training: bool) -> Tensor<f64> {
    let [n, c, d, h, w] = <[usize; 5]>::try_from(x.shape()).unwrap();
    let sp = d * h * w;
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| x.data()[(b * c + ch) * sp..][..sp].to_vec())
            .collect();
        let (mean, var) = if training {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (
                m,
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64,
            )
        } else {
            (
                get(s, &format!("{prefix}.running_mean")).data()[ch],
                get(s, &format!("{prefix}.running_var")).data()[ch],
            )
        };
        let g = get(s, &format!("{prefix}.gamma")).data()[ch];
        let b = get(s, &format!("{prefix}.beta")).data()[ch];
        for bn in 0..n {
            for v in &mut out.data_mut()[(bn * c + ch) * sp..][..sp] {
                *v = g * (*v - mean) / (var + 1e-5).sqrt() + b;
            }
        }
    }
    out
}

fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

fn conv(x: &Tensor<f64>, s: &voxres::ParamSet<f64>, prefix: &str, stride: usize) -> Tensor<f64> {
    naive_conv(
        x,
        get(s, &format!("{prefix}.weight")),
        get(s, &format!("{prefix}.bias")),
        stride,
    )
}

fn conv_unit(x: &Tensor<f64>, s: &voxres::ParamSet<f64>, unit: &str, stride: usize, training: bool) -> Tensor<f64> {
    relu(&bn(
        &conv(x, s, &format!("{unit}.conv"), stride),
        s,
        &format!("{unit}.bn"),
        training,
    ))
}

fn voxres(x: &Tensor<f64>, s: &voxres::ParamSet<f64>, unit: &str, training: bool) -> Tensor<f64> {
    let h = relu(&bn(x, s, &format!("{unit}.bn1"), training));
    let h = conv(&h, s, &format!("{unit}.conv1"), 1);
    let h = relu(&bn(&h, s, &format!("{unit}.bn2"), training));
    let h = conv(&h, s, &format!("{unit}.conv2"), 1);
    Tensor::from_vec(x.shape(), h.data().iter().zip(x.data()).map(|(a, b)| a + b).collect()).unwrap()
}

fn dense(x: &[f64], s: &voxres::ParamSet<f64>, unit: &str) -> Vec<f64> {
    let w = get(s, &format!("{unit}.weight"));
    let b = get(s, &format!("{unit}.bias"));
    let (k, out) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| b.data()[o] + (0..k).map(|i| x[i] * w.data()[i * out + o]).sum::<f64>())
        .collect()
}

/// The network assembled by hand from the oracles above.
fn recomposed(x: &Tensor<f64>, s: &voxres::ParamSet<f64>, stages: usize, training: bool) -> Vec<f64> {
    let mut h = conv_unit(x, s, "stem1", 1, training);
    h = conv_unit(&h, s, "stem2", 2, training);
    h = conv_unit(&h, s, "transition", 1, training);
    for st in 1..=stages {
        h = voxres(&h, s, &format!("stage{st}.res1"), training);
        h = voxres(&h, s, &format!("stage{st}.res2"), training);
        h = conv_unit(&h, s, &format!("stage{st}.down"), 2, training);
    }
    let [n, c, d, hh, w] = <[usize; 5]>::try_from(h.shape()).unwrap();
    let sp = d * hh * w;
    let mut logits = Vec::new();
    for b in 0..n {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| h.data()[(b * c + ch) * sp..][..sp].iter().sum::<f64>() / sp as f64)
            .collect();
        let fc: Vec<f64> = dense(&pooled, s, "fc")
            .into_iter()
            .map(|v| if v > 0.0 { v } else { 0.01 * v })
            .collect();
        logits.extend(dense(&fc, s, "out"));
    }
    logits
}

#[test]
fn model_matches_layer_by_layer_recomposition() {
    let cfg = ModelConfig {
        input_shape: Shape5 {
            n: 2,
            c: 1,
            d: 16,
            h: 16,
            w: 16,
        },
        initial_filters: 3,
        main_filters: 4,
        stages: 1,
        fc_width: 5,
        seed: 4,
        ..Default::default()
    };
    let mut model: Model<f64> = Model::build(cfg.clone()).unwrap();
    // Non-trivial BN parameters and running statistics.
    let mut r = rng(9);
    for (name, t) in model.state_mut() {
        if name.ends_with("gamma") || name.ends_with("running_var") {
            let u: Tensor<f64> = random_tensor(t.shape(), &mut r, 0.4);
            *t = u.map(|v| 1.0 + v);
        } else if name.ends_with("beta") || name.ends_with("running_mean") || name.ends_with("bias") {
            *t = random_tensor(t.shape(), &mut r, 0.2);
        }
    }
    let state = model.state();
    let x: Tensor<f64> = random_tensor(&[2, 1, 16, 16, 16], &mut r, 1.0);
    for training in [false, true] {
        let (y, _) = model.forward(&x, training).unwrap();
        let want = recomposed(&x, &state, 1, training);
        assert_eq!(y.shape(), [2, 1]);
        for (a, b) in y.data().iter().zip(&want) {
            assert!(rel_err(*a, *b, 1.0) <= 1e-5, "training={training}: {a} vs {b}");
        }
    }
    // Same weights in f32 agree with the f64 oracle to single precision.
    let y32 = model.cast::<f32>().predict(&x.cast()).unwrap();
    for (a, b) in y32.data().iter().zip(&recomposed(&x, &state, 1, false)) {
        assert!(rel_err(*a as f64, *b, 1.0) <= 1e-4, "{a} vs {b}");
    }
}
