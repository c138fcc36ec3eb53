mod common;

use common::{binary, check, project, signed, uniform, FRACTION, WORST};
use hfunet::autograd::{Tape, Var};
use hfunet::gradcheck::GradReport;
use hfunet::model::tcl::{self, AttnVars, Fusion, QueryKey, TclVars};
use hfunet::tensor::{Tensor, TensorError};

fn assert_ok(name: &str, r: &GradReport) {
    assert!(r.passes(FRACTION, WORST), "{name}: {r:?}");
}

fn op(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>) {
    let r = check(inputs, |t, v| {
        let y = f(t, v)?;
        project(t, y, 99)
    });
    assert_ok(name, &r);
}

#[test]
fn convolutions() {
    for pad in [0, 1] {
        let k = if pad == 0 { 1 } else { 3 };
        op(
            &format!("conv2d k{k}"),
            &[uniform(&[2, 3, 6, 6], -1.0, 1.0, 1), uniform(&[4, 3, k, k], -0.5, 0.5, 2), uniform(&[4], -0.1, 0.1, 3)],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), pad),
        );
    }
    op("conv2d without bias", &[uniform(&[1, 2, 5, 7], -1.0, 1.0, 4), uniform(&[3, 2, 3, 3], -0.5, 0.5, 5)], |t, v| {
        t.conv2d(v[0], v[1], None, 1)
    });
    op(
        "conv transpose",
        &[uniform(&[2, 4, 3, 3], -1.0, 1.0, 6), uniform(&[4, 2, 2, 2], -0.5, 0.5, 7), uniform(&[2], -0.1, 0.1, 8)],
        |t, v| t.conv_transpose2(v[0], v[1], Some(v[2])),
    );
}

#[test]
fn pooling_and_resizing() {
    op("max pool", &[uniform(&[2, 3, 8, 8], -1.0, 1.0, 10)], |t, v| t.max_pool2(v[0]));
    op("avg pool", &[uniform(&[1, 2, 8, 8], -1.0, 1.0, 11)], |t, v| t.avg_pool(v[0], 4));
    op("upsample", &[uniform(&[1, 2, 3, 3], -1.0, 1.0, 12)], |t, v| t.upsample(v[0], 2));
}

#[test]
fn elementwise() {
    op("relu", &[signed(&[2, 3, 4, 4], 0.01, 1.0, 20)], |t, v| Ok(t.relu(v[0])));
    let ab = [uniform(&[2, 3, 4], -1.0, 1.0, 21), uniform(&[2, 3, 4], -1.0, 1.0, 22)];
    op("lincomb", &ab, |t, v| t.lincomb(v[0], 0.3, v[1], -1.7));
    op("add", &ab, |t, v| t.add(v[0], v[1]));
    op("sub", &ab, |t, v| t.sub(v[0], v[1]));
    op("scale", &ab, |t, v| Ok(t.scale(v[0], 2.5)));
    op("add all", &ab, |t, v| t.add_all(&[v[0], v[1], v[0]]));
    op("reshape", &ab, |t, v| t.reshape(v[0], &[6, 4]));
    op("concat", &[uniform(&[2, 3, 4, 4], -1.0, 1.0, 23), uniform(&[2, 1, 4, 4], -1.0, 1.0, 24)], |t, v| {
        t.concat_channels(v[0], v[1])
    });
}

#[test]
fn batched_matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
        op(&format!("bmm {ta} {tb}"), &[uniform(&a, -1.0, 1.0, 30), uniform(&b, -1.0, 1.0, 31)], |t, v| {
            t.bmm(v[0], v[1], ta, tb)
        });
    }
}

#[test]
fn softmaxes_and_selection() {
    op("softmax last", &[uniform(&[2, 3, 5], -2.0, 2.0, 40)], |t, v| t.softmax_last(v[0]));
    op("softmax channels", &[uniform(&[2, 3, 4, 4], -2.0, 2.0, 41)], |t, v| t.softmax_channels(v[0]));
    op("select channel", &[uniform(&[2, 3, 4, 4], -2.0, 2.0, 42)], |t, v| t.select_channel(v[0], 2));
}

#[test]
fn scalar_losses() {
    let y = binary(&[2, 4, 4], 50);
    let r = check(&[uniform(&[2, 4, 4], 0.05, 0.95, 51)], |t, v| t.bce(v[0], y.clone(), 1e-7));
    assert_ok("bce", &r);
    let r = check(&[uniform(&[3, 4], -1.0, 1.0, 52), uniform(&[3, 4], -1.0, 1.0, 53)], |t, v| t.mse(v[0], v[1]));
    assert_ok("mse", &r);
    let r = check(&[uniform(&[3, 4], -1.0, 1.0, 54)], |t, v| Ok(t.sq_norm_half(v[0])));
    assert_ok("sq norm", &r);
}

#[test]
fn attention_masks() {
    op("channel attention", &[uniform(&[2, 4, 4, 4], -0.5, 0.5, 60)], |t, v| Ok(tcl::channel_attention(t, v[0])?.1));
    op(
        "position attention",
        &[
            uniform(&[2, 4, 4, 4], -0.5, 0.5, 61),
            uniform(&[1, 4, 1, 1], -0.5, 0.5, 62),
            uniform(&[1], -0.1, 0.1, 63),
            uniform(&[1, 4, 1, 1], -0.5, 0.5, 64),
            uniform(&[1], -0.1, 0.1, 65),
        ],
        |t, v| Ok(tcl::position_attention(t, v[0], QueryKey { q: (v[1], v[2]), k: (v[3], v[4]) })?.1),
    );
}

fn tcl_inputs(c: usize, attention: bool, seed: u64) -> Vec<Tensor<f64>> {
    let mut v = vec![
        uniform(&[2, c, 4, 4], 0.0, 1.0, seed),
        uniform(&[2, c, 4, 4], 0.0, 1.0, seed + 1),
        uniform(&[c, c, 1, 1], -0.5, 0.5, seed + 2),
        uniform(&[c], 0.05, 0.2, seed + 3),
        uniform(&[c, c, 3, 3], -0.3, 0.3, seed + 4),
        uniform(&[c], 0.05, 0.2, seed + 5),
        uniform(&[c, c, 3, 3], -0.3, 0.3, seed + 6),
        uniform(&[c], 0.05, 0.2, seed + 7),
    ];
    if attention {
        for i in 0..2 {
            v.push(uniform(&[1, c, 1, 1], -0.5, 0.5, seed + 10 + 4 * i));
            v.push(uniform(&[1], -0.1, 0.1, seed + 11 + 4 * i));
            v.push(uniform(&[1, c, 1, 1], -0.5, 0.5, seed + 12 + 4 * i));
            v.push(uniform(&[1], -0.1, 0.1, seed + 13 + 4 * i));
        }
    }
    v
}

fn tcl_vars(v: &[Var]) -> TclVars {
    TclVars {
        bottleneck: (v[2], v[3]),
        conv_a: (v[4], v[5]),
        conv_b: (v[6], v[7]),
        attention: (v.len() > 8).then(|| AttnVars {
            private: QueryKey { q: (v[8], v[9]), k: (v[10], v[11]) },
            public: QueryKey { q: (v[12], v[13]), k: (v[14], v[15]) },
        }),
    }
}

#[test]
fn tcl_block_outputs() {
    let fusions = [
        Fusion::Weighted { alpha: 0.2 },
        Fusion::Attention { channel: true, position: false, averaged: false },
        Fusion::Attention { channel: true, position: true, averaged: true },
    ];
    for (i, fusion) in fusions.into_iter().enumerate() {
        let attention = matches!(fusion, Fusion::Attention { position: true, .. });
        let r = check(&tcl_inputs(3, attention, 100 + 20 * i as u64), |t, v| {
            let out = tcl::tcl_block(t, v[0], v[1], &tcl_vars(v), fusion)?;
            let a = project(t, out.seg, 1)?;
            let b = project(t, out.cont, 2)?;
            let c = project(t, out.public, 3)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        });
        assert_ok(&format!("tcl block {fusion:?}"), &r);
    }
}

#[test]
fn loss_and_fusion_suite_passes() {
    for (name, r) in common::loss_and_fusion_suite() {
        assert_ok(name, &r);
    }
}
