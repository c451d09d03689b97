use super::*;
use crate::imaging::{mosaic, CfaPattern};
use crate::util::rng_from_seed;
use rand::Rng;

fn random_patch(h: usize, w: usize, seed: u64) -> Patch {
    let mut rng = rng_from_seed(seed);
    RgbImage::from_fn(h, w, |_, _, _| rng.gen())
}

fn packed_input(h: usize, w: usize, seed: u64) -> Tensor {
    let img = random_patch(h, w, seed);
    pack_bayer(&mosaic(&img, CfaPattern::Grbg).unwrap())
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let spec = ModelSpec::new(2, 8, 2, 5).unwrap();
    let a = init(&spec);
    let b = init(&spec);
    assert_eq!(a, b);
    for ((name, _), t) in spec.tensor_layout().iter().zip(a.tensors()) {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }
}

#[test]
fn param_count_matches_closed_form() {
    // stem: 36w + w; per block: 2ew^2 + 11ew + w; head: 108w + 12.
    let count = |b: usize, w: usize, e: usize| 145 * w + 12 + b * (2 * e * w * w + 11 * e * w + w);
    for (blocks, width, expansion) in [(3, 16, 2), (1, 4, 2), (3, 24, 3), (2, 10, 5)] {
        let spec = ModelSpec::new(blocks, width, expansion, 0).unwrap();
        assert_eq!(spec.param_count(), count(blocks, width, expansion));
        assert_eq!(init(&spec).param_count(), spec.param_count());
    }
}

#[test]
fn presets_land_near_their_size_points() {
    for (name, target) in [("9k", 9500), ("16k", 16000), ("84k", 84000), ("176k", 176000)] {
        let spec = ModelSpec::preset(name, 0).unwrap();
        let n = spec.param_count() as f64;
        assert!((n - target as f64).abs() / target as f64 <= 0.08, "{name}: {n}");
    }
}

#[test]
fn pack_bayer_2x2_and_4x4_phases() {
    let img = random_patch(2, 2, 1);
    let m = mosaic(&img, CfaPattern::Grbg).unwrap();
    let packed = pack_bayer(&m);
    assert_eq!(packed.shape(), &[4, 1, 1]);
    for t in 0..4 {
        assert_eq!(packed.data()[t], m.get(t / 2, t % 2));
    }

    let img = random_patch(4, 4, 2);
    let m = mosaic(&img, CfaPattern::Grbg).unwrap();
    let packed = pack_bayer(&m);
    for t in 0..4usize {
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(packed.data()[t * 4 + y * 2 + x], m.get(2 * y + t / 2, 2 * x + t % 2));
            }
        }
    }
}

#[test]
fn pack_unpack_roundtrip() {
    let img = random_patch(8, 6, 3);
    let m = mosaic(&img, CfaPattern::Grbg).unwrap();
    let back = unpack_bayer(&pack_bayer(&m), CfaPattern::Grbg).unwrap();
    assert_eq!(back, m);
}

#[test]
fn zero_params_give_zero_output() {
    let spec = ModelSpec::new(2, 8, 2, 0).unwrap();
    let params = ModelParams::zeros_like(&spec);
    let out = forward(&params, &spec, &packed_input(8, 8, 4)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn head_is_linear_in_its_weights() {
    let spec = ModelSpec::new(1, 6, 2, 9).unwrap();
    let params = init(&spec);
    let x = packed_input(8, 8, 5);
    let base = forward(&params, &spec, &x).unwrap();
    let mut doubled = params.clone();
    let n = doubled.tensors().len();
    for v in doubled.tensors_mut()[n - 2].data_mut() {
        *v *= 2.0;
    }
    for v in doubled.tensors_mut()[n - 1].data_mut() {
        *v *= 2.0;
    }
    let out = forward(&doubled, &spec, &x).unwrap();
    for (a, b) in base.data().iter().zip(out.data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

/// Straight-line re-implementation of the forward pass: gather-style convs,
/// no shared kernels with the production path.
fn naive_forward(params: &ModelParams, spec: &ModelSpec, packed: &Tensor) -> Vec<f64> {
    let (h, w) = (packed.shape()[1], packed.shape()[2]);
    let width = spec.width;
    let e = width * spec.expansion;
    let t = params.tensors();

    let conv3 = |input: &[f64], cin: usize, weight: &[f64], bias: &[f64], cout: usize| {
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for i in 0..cin {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let sy = (y as i64 + ky - 1).clamp(0, h as i64 - 1) as usize;
                                let sx = (x as i64 + kx - 1).clamp(0, w as i64 - 1) as usize;
                                acc += weight[(o * cin + i) * 9 + (ky * 3 + kx) as usize]
                                    * input[i * h * w + sy * w + sx];
                            }
                        }
                    }
                    out[o * h * w + y * w + x] = acc;
                }
            }
        }
        out
    };
    let relu = |v: Vec<f64>| v.into_iter().map(|x| if x < 0.0 { 0.0 } else { x }).collect::<Vec<_>>();

    let mut cur = relu(conv3(packed.data(), 4, t[0].data(), t[1].data(), width));
    for b in 0..spec.blocks {
        let base = 2 + b * 6;
        let mut expand = vec![0.0; e * h * w];
        for o in 0..e {
            for p in 0..h * w {
                let mut acc = t[base + 1].data()[o];
                for i in 0..width {
                    acc += t[base].data()[o * width + i] * cur[i * h * w + p];
                }
                expand[o * h * w + p] = acc;
            }
        }
        let expand = relu(expand);
        let mut depth = vec![0.0; e * h * w];
        for c in 0..e {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = t[base + 3].data()[c];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let sy = (y as i64 + ky - 1).clamp(0, h as i64 - 1) as usize;
                            let sx = (x as i64 + kx - 1).clamp(0, w as i64 - 1) as usize;
                            acc += t[base + 2].data()[c * 9 + (ky * 3 + kx) as usize]
                                * expand[c * h * w + sy * w + sx];
                        }
                    }
                    depth[c * h * w + y * w + x] = acc;
                }
            }
        }
        let depth = relu(depth);
        let mut next = cur.clone();
        for o in 0..width {
            for p in 0..h * w {
                let mut acc = t[base + 5].data()[o];
                for i in 0..e {
                    acc += t[base + 4].data()[o * e + i] * depth[i * h * w + p];
                }
                next[o * h * w + p] += acc;
            }
        }
        cur = next;
    }
    let head = conv3(&cur, width, t[t.len() - 2].data(), t[t.len() - 1].data(), 12);
    // Sub-pixel rearrangement to HWC.
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; oh * ow * 3];
    for c in 0..3 {
        for dy in 0..2 {
            for dx in 0..2 {
                let ci = c * 4 + dy * 2 + dx;
                for y in 0..h {
                    for x in 0..w {
                        out[((2 * y + dy) * ow + 2 * x + dx) * 3 + c] = head[ci * h * w + y * w + x];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn forward_matches_straight_line_reference() {
    let spec = ModelSpec::new(2, 8, 3, 42).unwrap();
    let params = init(&spec);
    let x = packed_input(16, 16, 42);
    let got = forward(&params, &spec, &x).unwrap();
    let want = naive_forward(&params, &spec, &x);
    assert_eq!(got.data().len(), want.len());
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let spec = ModelSpec::new(1, 4, 2, 7).unwrap();
    let params = init(&spec);
    let x = packed_input(8, 8, 8);
    let zeros = RgbImage::zeros(8, 8);
    let grads = backward(&params, &spec, &x, &zeros).unwrap();
    for t in grads.tensors() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn head_bias_gradient_is_summed_upstream() {
    let spec = ModelSpec::new(1, 4, 2, 7).unwrap();
    let params = init(&spec);
    let x = packed_input(8, 8, 9);
    let upstream = random_patch(8, 8, 10);
    let grads = backward(&params, &spec, &x, &upstream).unwrap();
    let n = grads.tensors().len();
    let db = grads.tensors()[n - 1].data();
    // Head channel c*4 + dy*2 + dx feeds output pixels (2y+dy, 2x+dx, c).
    for c in 0..3 {
        for dy in 0..2 {
            for dx in 0..2 {
                let mut want = 0.0;
                for y in 0..4 {
                    for x2 in 0..4 {
                        want += upstream.get(2 * y + dy, 2 * x2 + dx, c);
                    }
                }
                let got = db[c * 4 + dy * 2 + dx];
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }
}

/// Central-difference oracle over a handful of parameters. The full sweep
/// over every parameter runs in the acceptance suite.
#[test]
fn analytic_gradients_match_finite_differences_spot() {
    let spec = ModelSpec::new(1, 4, 2, 3).unwrap();
    let mut params = init(&spec);
    let x = packed_input(8, 8, 11);
    let upstream = random_patch(8, 8, 12);
    let grads = backward(&params, &spec, &x, &upstream).unwrap();

    let loss = |p: &ModelParams| -> f64 {
        forward(p, &spec, &x)
            .unwrap()
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let step = 1e-4;
    let mut rng = rng_from_seed(99);
    for _ in 0..24 {
        let ti = rng.gen_range(0..params.tensors().len());
        let n = params.tensors()[ti].len();
        let j = rng.gen_range(0..n);
        let orig = params.tensors()[ti].data()[j];
        params.tensors_mut()[ti].data_mut()[j] = orig + step;
        let up = loss(&params);
        params.tensors_mut()[ti].data_mut()[j] = orig - step;
        let down = loss(&params);
        params.tensors_mut()[ti].data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * step);
        let an = grads.tensors()[ti].data()[j];
        let rel = (an - fd).abs() / (fd.abs() + 1e-8);
        assert!(rel <= 1e-4, "tensor {ti} elem {j}: analytic {an} fd {fd} rel {rel}");
    }
}

#[test]
fn l1_loss_cases() {
    let gt = random_patch(8, 8, 13);
    let (loss, grad) = l1_loss_and_grad(&gt, &gt).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.data().iter().all(|&v| v == 0.0));

    let mut pred = gt.clone();
    for v in pred.data_mut() {
        *v += 0.25;
    }
    let n = gt.data().len() as f64;
    let (loss, grad) = l1_loss_and_grad(&pred, &gt).unwrap();
    assert!((loss - 0.25).abs() < 1e-12);
    assert!(grad.data().iter().all(|&v| (v - 1.0 / n).abs() < 1e-18));

    // Finite-difference spot check of the gradient.
    let pred = random_patch(8, 8, 14);
    let (_, grad) = l1_loss_and_grad(&pred, &gt).unwrap();
    let step = 1e-7;
    for idx in [0usize, 37, 100] {
        let mut up = pred.clone();
        up.data_mut()[idx] += step;
        let mut down = pred.clone();
        down.data_mut()[idx] -= step;
        let fd = (l1_loss_and_grad(&up, &gt).unwrap().0 - l1_loss_and_grad(&down, &gt).unwrap().0)
            / (2.0 * step);
        assert!((fd - grad.data()[idx]).abs() < 1e-6);
    }
}

#[test]
fn adam_zero_grads_and_zero_lr_leave_params_unchanged() {
    let spec = ModelSpec::new(1, 4, 1, 2).unwrap();
    let params = init(&spec);
    let zeros = ModelParams::zeros_like(&spec);
    let state = AdamState::new(&spec);
    let (p2, s2) = adam_step(&params, &zeros, &state, 1e-3).unwrap();
    assert_eq!(p2, params);
    assert_eq!(s2.t, 1);

    let mut rng = rng_from_seed(15);
    let mut grads = ModelParams::zeros_like(&spec);
    for t in grads.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
    }
    let (p3, _) = adam_step(&params, &grads, &state, 0.0).unwrap();
    assert_eq!(p3, params);
}

#[test]
fn adam_first_step_is_signed_lr() {
    // With uniform gradient g, the bias-corrected first step is
    // -lr * g / (|g| + eps) which is within eps of -lr * sgn(g).
    let spec = ModelSpec::new(1, 4, 1, 2).unwrap();
    let params = init(&spec);
    let mut grads = ModelParams::zeros_like(&spec);
    for t in grads.tensors_mut() {
        for v in t.data_mut() {
            *v = 0.5;
        }
    }
    let lr = 1e-3;
    let (p2, s2) = adam_step(&params, &grads, &AdamState::new(&spec), lr).unwrap();
    let expected_delta = -lr * 0.5 / (0.5 + ADAM_EPS);
    for (a, b) in params.tensors().iter().zip(p2.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(((y - x) - expected_delta).abs() < 1e-15);
        }
    }
    assert_eq!(s2.t, 1);
}

#[test]
fn adam_is_pure_and_repeatable() {
    let spec = ModelSpec::new(1, 4, 1, 6).unwrap();
    let params = init(&spec);
    let mut grads = ModelParams::zeros_like(&spec);
    let mut rng = rng_from_seed(16);
    for t in grads.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
    }
    let state = AdamState::new(&spec);
    let a = adam_step(&params, &grads, &state, 1e-3).unwrap();
    let b = adam_step(&params, &grads, &state, 1e-3).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.m, b.1.m);
    assert_eq!(state.t, 0);
}

#[test]
fn adam_rejects_nonfinite_grads() {
    let spec = ModelSpec::new(1, 4, 1, 6).unwrap();
    let params = init(&spec);
    let mut grads = ModelParams::zeros_like(&spec);
    grads.tensors_mut()[0].data_mut()[0] = f64::NAN;
    assert!(adam_step(&params, &grads, &AdamState::new(&spec), 1e-3).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::new(2, 8, 2, 21).unwrap();
    let mut ckpt = Checkpoint::fresh(spec);
    ckpt.meta = CheckpointMeta { epoch: 3, phase: "general".into(), seed: 21 };
    // Give adam some non-trivial state.
    let mut grads = ModelParams::zeros_like(&spec);
    let mut rng = rng_from_seed(22);
    for t in grads.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
    }
    let (p, s) = adam_step(&ckpt.params, &grads, &ckpt.adam, 1e-3).unwrap();
    ckpt.params = p;
    ckpt.adam = s;

    let path = dir.path().join("model.ckpt.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    // Re-saving must produce identical bytes.
    let path2 = dir.path().join("model2.ckpt.json");
    save_checkpoint(&back, &path2).unwrap();
    assert_eq!(std::fs::read(path.with_extension("bin")).unwrap(),
               std::fs::read(path2.with_extension("bin")).unwrap());
}

#[test]
fn checkpoint_mismatched_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::fresh(ModelSpec::new(1, 4, 2, 1).unwrap());
    let path = dir.path().join("m.ckpt.json");
    save_checkpoint(&ckpt, &path).unwrap();

    // Claim a different width in the manifest; blob no longer matches.
    let mut manifest: serde_json::Value = crate::util::read_json(&path).unwrap();
    manifest["spec"]["width"] = serde_json::json!(8);
    crate::util::write_json(&path, &manifest).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn seeded_fixture_has_known_count_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::new(1, 4, 2, 77).unwrap();
    let ckpt = Checkpoint::fresh(spec);
    let path = dir.path().join("fixture.ckpt.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params.param_count(), 748);
    let first = back.params.tensors()[0].data()[0];
    assert_eq!(first, ckpt.params.tensors()[0].data()[0]);
    assert!(first.is_finite() && first != 0.0);
}
