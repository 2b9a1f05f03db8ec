mod common;

use std::collections::HashMap;

use common::{conv_loops, rng, uniform};
use stylekernel::nn::{ParamScope, Parameters};
use stylekernel::store::WeightStore;
use stylekernel::tensor::{Tape, Tensor};
use stylekernel::vgg::Encoder;
use stylekernel::Error;

fn pool(x: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn([h / 2, w / 2, c], |i| {
        let (p, ch) = (i / c, i % c);
        let (y, xx) = (p / (w / 2), p % (w / 2));
        let at = |dy, dx| x.data()[((2 * y + dy) * w + 2 * xx + dx) * c + ch];
        at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1))
    })
}

/// Reference forward of the first eleven VGG-16 layers.
fn naive_taps(enc: &Encoder<f64>, img: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut p = HashMap::new();
    enc.visit(&mut |n, t| {
        p.insert(n.to_owned(), t.clone());
    });
    let (mean, std) = (&p["encoder.input_mean"], &p["encoder.input_std"]);
    let mut x = Tensor::from_fn(img.shape().to_vec(), |i| (img.data()[i] - mean.data()[i % 3]) / std.data()[i % 3]);
    let blocks: [&[&str]; 5] = [
        &["conv1_1", "conv1_2"],
        &["conv2_1", "conv2_2"],
        &["conv3_1", "conv3_2", "conv3_3"],
        &["conv4_1", "conv4_2", "conv4_3"],
        &["conv5_1"],
    ];
    let mut taps = Vec::new();
    for (b, layers) in blocks.iter().enumerate() {
        if b > 0 {
            x = pool(&x);
        }
        for (i, name) in layers.iter().enumerate() {
            let w = &p[&format!("encoder.{name}.weight")];
            let bias = &p[&format!("encoder.{name}.bias")];
            x = conv_loops(&x, w, bias, 1, 1).map(|v| v.max(0.0));
            if i == 0 && b > 0 {
                taps.push(x.clone());
            }
        }
    }
    taps
}

#[test]
fn taps_match_loop_oracle() {
    let mut enc = Encoder::<f32>::random_init(2, &mut rng(1)).cast::<f64>();
    enc.visit_mut(&mut |n, t| {
        if n == "encoder.input_mean" {
            *t = Tensor::from_vec(vec![0.4, 0.5, 0.6]);
        } else if n == "encoder.input_std" {
            *t = Tensor::from_vec(vec![0.2, 0.25, 0.3]);
        }
    });
    let img = uniform(&[32, 16, 3], 1.0, &mut rng(2)).map(f64::abs);
    let tape = Tape::new();
    let pyr = enc.encode(&ParamScope::frozen(&tape), tape.constant(img.clone())).unwrap();
    for (got, want) in pyr.taps().iter().zip(naive_taps(&enc, &img)) {
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.value().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
    let main = enc.encode_main(&ParamScope::frozen(&tape), tape.constant(img)).unwrap();
    assert_eq!(*main.value(), *pyr.relu4_1.value());
}

#[test]
fn full_width_layer_progression() {
    let enc = Encoder::<f32>::random_init(64, &mut rng(0));
    let mut outs = Vec::new();
    enc.visit(&mut |n, t| {
        if n.ends_with(".weight") {
            outs.push(t.shape()[0]);
        }
    });
    assert_eq!(outs, [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]);
    assert_eq!(enc.feature_channels(), 512);
}

#[test]
fn loading_checks_every_layer() {
    let enc = Encoder::<f32>::random_init(2, &mut rng(3));
    let mut store = WeightStore::new();
    store.put_all(&enc);
    assert_eq!(Encoder::from_store(&store, 2).unwrap(), enc);

    let mut wrong = store.clone();
    wrong.insert("encoder.conv3_2.weight", Tensor::zeros([8, 8, 1, 1]));
    let err = Encoder::from_store(&wrong, 2).unwrap_err().to_string();
    assert!(err.contains("encoder.conv3_2.weight"), "{err}");

    let mut missing = store.clone();
    missing.remove("encoder.conv5_3.bias");
    assert!(Encoder::from_store(&missing, 2).is_err());

    // a 19-layer variant has extra convolutions per block
    let mut deeper = store.clone();
    deeper.insert("encoder.conv3_4.weight", Tensor::zeros([8, 8, 3, 3]));
    deeper.insert("encoder.conv3_4.bias", Tensor::zeros([8]));
    let err = Encoder::from_store(&deeper, 2).unwrap_err().to_string();
    assert!(err.contains("conv3_4"), "{err}");
}

#[test]
fn input_extents_must_be_multiples_of_16() {
    let enc = Encoder::<f32>::random_init(2, &mut rng(4));
    let tape = Tape::new();
    let err = enc
        .encode(&ParamScope::frozen(&tape), tape.constant(Tensor::zeros([24, 32, 3])))
        .unwrap_err();
    assert!(matches!(err, Error::InvalidShape { .. }) || err.to_string().contains("16"), "{err}");
    assert!(err.to_string().contains("pad"), "{err}");
}

#[test]
fn backward_through_frozen_encoder_leaves_weights_alone() {
    let enc = Encoder::<f32>::random_init(2, &mut rng(5));
    let before = enc.checksum();
    let tape = Tape::new();
    let x = tape.param(uniform(&[16, 16, 3], 1.0, &mut rng(6)).cast());
    let scope = ParamScope::frozen(&tape);
    let loss = enc.encode(&scope, x).unwrap().relu5_1.sum();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.wrt(x).data().iter().any(|&g| g != 0.0));
    assert!(scope.gradients(&grads).values().all(|g| g.data().iter().all(|&v| v == 0.0)));
    assert_eq!(enc.checksum(), before);
}
