use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Direct six-loop cross-correlation used as the conv oracle.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
    let (c, h, wd) = x.chw().unwrap();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * spec.pad - k) / spec.stride + 1;
    let wo = (wd + 2 * spec.pad - k) / spec.stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b.data()[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd;
                            let (sy, sx) = match (inside, spec.padding) {
                                (true, _) => (sy as usize, sx as usize),
                                (false, Padding::Zero) => continue,
                                (false, Padding::Replicate) => (
                                    sy.clamp(0, h as isize - 1) as usize,
                                    sx.clamp(0, wd as isize - 1) as usize,
                                ),
                            };
                            s += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                * x.data()[(ic * h + sy) * wd + sx];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = s;
            }
        }
    }
    Tensor::new(&[o, ho, wo], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_identity_kernel_copies_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 5, 4], -1.0, 1.0);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for i in 0..3 {
        w.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(Tensor::zeros(&[3])));
    let y = tape.conv2d(xv, wv, bv, ConvSpec::same(1, Padding::Zero)).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_zero_weights_give_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 4, 4], 3.0));
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let b = tape.constant(Tensor::new(&[2], vec![0.25, -1.5]).unwrap());
    let y = tape.conv2d(x, w, b, ConvSpec::same(3, Padding::Zero)).unwrap();
    let v = tape.value(y).data();
    assert!(v[..16].iter().all(|&p| p == 0.25));
    assert!(v[16..].iter().all(|&p| p == -1.5));
}

#[test]
fn conv_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (shape, o, spec) in [
        ([2, 7, 6], 3, ConvSpec::same(3, Padding::Zero)),
        ([3, 8, 8], 2, ConvSpec { stride: 2, pad: 1, padding: Padding::Replicate }),
        ([1, 5, 9], 4, ConvSpec::same(3, Padding::Replicate)),
    ] {
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[o, shape[0], 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[o], -1.0, 1.0);
        let expect = conv_reference(&x, &w, &b, spec);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = tape.conv2d(xv, wv, bv, spec).unwrap();
        assert_eq!(tape.value(y).shape(), expect.shape());
        assert!(max_abs_diff(tape.value(y).data(), expect.data()) < 1e-12);
    }
}

#[test]
fn conv_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (shape, spec) in [
        ([2, 5, 5], ConvSpec::same(3, Padding::Zero)),
        ([3, 6, 4], ConvSpec::same(3, Padding::Replicate)),
        ([2, 7, 7], ConvSpec { stride: 2, pad: 1, padding: Padding::Zero }),
    ] {
        let inputs = vec![
            rand_tensor(&mut rng, &shape, -1.0, 1.0),
            rand_tensor(&mut rng, &[2, shape[0], 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, (shape[1] + 2 - 3) / spec.stride + 1, (shape[2] + 2 - 3) / spec.stride + 1], -1.0, 1.0),
        ];
        let report = grad_check(
            move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], v[2], spec)?;
                let p = t.mul(y, v[3])?;
                Ok(t.sum(p))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}

#[test]
fn gated_conv_saturated_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let wf = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bf = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let spec = ConvSpec::same(3, Padding::Zero);
    let plain = conv_reference(&x, &wf, &bf, spec);
    for (bias, expect_open) in [(20.0, true), (-20.0, false)] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = (tape.constant(wf.clone()), tape.constant(bf.clone()));
        let g = (tape.constant(Tensor::zeros(&[3, 2, 3, 3])), tape.constant(Tensor::full(&[3], bias)));
        let y = tape.gated_conv(xv, f, g, spec).unwrap();
        let out = tape.value(y).data();
        if expect_open {
            assert!(max_abs_diff(out, plain.data()) < 1e-7);
        } else {
            assert!(out.iter().all(|v| v.abs() < 1e-7));
        }
    }
}

#[test]
fn gated_conv_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (c, h, w) in [(2, 5, 5), (3, 4, 6), (1, 6, 3)] {
        let inputs = vec![
            rand_tensor(&mut rng, &[c, h, w], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, c, 3, 3], -0.7, 0.7),
            rand_tensor(&mut rng, &[2], -0.5, 0.5),
            rand_tensor(&mut rng, &[2, c, 3, 3], -0.7, 0.7),
            rand_tensor(&mut rng, &[2], -0.5, 0.5),
            rand_tensor(&mut rng, &[2, h, w], -1.0, 1.0),
        ];
        let report = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.gated_conv(v[0], (v[1], v[2]), (v[3], v[4]), ConvSpec::same(3, Padding::Replicate))?;
                let p = t.mul(y, v[5])?;
                Ok(t.sum(p))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}

/// Scalar bilinear reference, independent of the stencil code.
fn bilinear_reference(img: &Tensor<f64>, x: f64, y: f64) -> Option<Vec<f64>> {
    let (c, h, w) = img.chw().unwrap();
    if !(0.0..=(w - 1) as f64).contains(&x) || !(0.0..=(h - 1) as f64).contains(&y) {
        return None;
    }
    let px = |yy: usize, xx: usize, ci: usize| img.data()[(ci * h + yy.min(h - 1)) * w + xx.min(w - 1)];
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    Some(
        (0..c)
            .map(|ci| {
                px(y0, x0, ci) * (1.0 - fx) * (1.0 - fy)
                    + px(y0, x0 + 1, ci) * fx * (1.0 - fy)
                    + px(y0 + 1, x0, ci) * (1.0 - fx) * fy
                    + px(y0 + 1, x0 + 1, ci) * fx * fy
            })
            .collect(),
    )
}

#[test]
fn bilinear_exact_centers_and_midpoints() {
    let img = Tensor::new(&[1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let coords = Tensor::new(&[1, 4, 2], vec![2.0, 1.0, 0.0, 0.0, 0.5, 0.0, 1.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let (i, c) = (tape.constant(img), tape.constant(coords));
    let (out, valid) = tape.bilinear_sample(i, c).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0, 0.0, 0.5, 2.5]);
    assert!(valid.iter().all(|&v| v));
}

#[test]
fn bilinear_out_of_range_is_zero_and_invalid() {
    let img = Tensor::full(&[2, 3, 3], 1.0);
    let coords = Tensor::new(&[1, 3, 2], vec![-0.1, 1.0, 1.0, 2.01, 1.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let (i, c) = (tape.constant(img), tape.constant(coords));
    let (out, valid) = tape.bilinear_sample(i, c).unwrap();
    assert_eq!(valid, vec![false, false, true]);
    assert_eq!(tape.value(out).data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn bilinear_matches_reference_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (c, h, w, th, tw) in [(3, 6, 5, 4, 4), (1, 4, 7, 3, 5), (2, 5, 5, 2, 6)] {
        let img = rand_tensor(&mut rng, &[c, h, w], 0.0, 1.0);
        // Keep samples off integer grid lines where the bilinear slope jumps.
        let coords_data: Vec<f64> = (0..th * tw)
            .flat_map(|_| {
                let x = rng.gen_range(0..w - 1) as f64 + rng.gen_range(0.1..0.9);
                let y = rng.gen_range(0..h - 1) as f64 + rng.gen_range(0.1..0.9);
                [x, y]
            })
            .collect();
        let coords = Tensor::new(&[th, tw, 2], coords_data).unwrap();
        let mut tape = Tape::new();
        let (iv, cv) = (tape.constant(img.clone()), tape.constant(coords.clone()));
        let (out, _) = tape.bilinear_sample(iv, cv).unwrap();
        let n = th * tw;
        for t in 0..n {
            let p = &coords.data()[2 * t..2 * t + 2];
            let expect = bilinear_reference(&img, p[0], p[1]).unwrap();
            for ci in 0..c {
                assert!((tape.value(out).data()[ci * n + t] - expect[ci]).abs() < 1e-12);
            }
        }
        let weights = rand_tensor(&mut rng, &[c, th, tw], -1.0, 1.0);
        let report = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let (s, _) = t.bilinear_sample(v[0], v[1])?;
                let p = t.mul(s, v[2])?;
                Ok(t.sum(p))
            },
            &[img, coords, weights],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}

fn pool_reference(x: &Tensor<f64>, k: usize) -> Vec<f64> {
    let (c, h, w) = x.chw().unwrap();
    let mut out = Vec::new();
    for ci in 0..c {
        for oy in 0..h.div_ceil(k) {
            for ox in 0..w.div_ceil(k) {
                let mut vals = Vec::new();
                for y in oy * k..((oy + 1) * k).min(h) {
                    for xx in ox * k..((ox + 1) * k).min(w) {
                        vals.push(x.data()[(ci * h + y) * w + xx]);
                    }
                }
                out.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    out
}

#[test]
fn avg_pool_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 8, 8], 0.3));
    let p = tape.avg_pool(c, 4).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 0.3f64).abs() < 1e-15));

    let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
    let x = tape.constant(Tensor::new(&[1, 4, 4], checker).unwrap());
    let p = tape.avg_pool(x, 4).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for shape in [[3, 9, 7], [1, 4, 4], [2, 13, 16]] {
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let expect = pool_reference(&x, 4);
        let xv = tape.constant(x.clone());
        let p = tape.avg_pool(xv, 4).unwrap();
        assert!(max_abs_diff(tape.value(p).data(), &expect) < 1e-12);
        let w = rand_tensor(&mut rng, tape.value(p).shape(), -1.0, 1.0);
        let report = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let p = t.avg_pool(v[0], 4)?;
                let m = t.mul(p, v[1])?;
                Ok(t.sum(m))
            },
            &[x, w],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4);
    }
}

fn tv_reference(x: &Tensor<f64>) -> f64 {
    let (c, h, w) = x.chw().unwrap();
    let at = |ci: usize, y: usize, xx: usize| x.data()[(ci * h + y) * w + xx];
    let mut s = 0.0;
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                if xx + 1 < w {
                    s += (at(ci, y, xx + 1) - at(ci, y, xx)).abs();
                }
                if y + 1 < h {
                    s += (at(ci, y + 1, xx) - at(ci, y, xx)).abs();
                }
            }
        }
    }
    s / (h * w) as f64
}

#[test]
fn total_variation_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[1, 5, 5], 0.7));
    let tv = tape.total_variation(c).unwrap();
    assert_eq!(tape.value(tv).item(), 0.0);

    let x = tape.constant(Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let tv = tape.total_variation(x).unwrap();
    assert_eq!(tape.value(tv).item(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for shape in [[1, 6, 5], [3, 4, 4], [1, 9, 2]] {
        let x = rand_tensor(&mut rng, &shape, 0.0, 1.0);
        let xv = tape.constant(x.clone());
        let tv = tape.total_variation(xv).unwrap();
        assert!((tape.value(tv).item() - tv_reference(&x)).abs() < 1e-12);
        let report = grad_check(|t: &mut Tape<f64>, v: &[Var]| t.total_variation(v[0]), &[x], 1e-7).unwrap();
        assert!(report.max_rel_err < 1e-4);
    }
}

#[test]
fn grad_check_square_sum() {
    let report = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &[Tensor::full(&[1], 1.0)],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "{report:?}");
}

#[test]
fn grad_check_conv_sigmoid_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0),
        rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
        rand_tensor(&mut rng, &[3], -0.5, 0.5),
    ];
    let report = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v[2], ConvSpec::same(3, Padding::Zero))?;
            let s = t.sigmoid(y);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4);
}

#[test]
fn grad_check_abs_away_from_kink_and_at_kink() {
    // Away from zero |x| is smooth and the check passes.
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let a = t.abs(v[0]);
        Ok(t.sum(a))
    };
    let ok = grad_check(f, &[Tensor::new(&[3], vec![0.5, -0.3, 1.2]).unwrap()], 1e-6).unwrap();
    assert!(ok.max_rel_err < 1e-8);
    // Within eps of the kink the central quotient straddles both slopes and
    // no longer matches the one-sided derivative.
    let at_kink = grad_check(f, &[Tensor::new(&[1], vec![1e-9]).unwrap()], 1e-6).unwrap();
    assert!(at_kink.max_rel_err > 0.5);
}

#[test]
fn sobel_and_normalize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for shape in [[1, 5, 5], [3, 6, 4], [2, 4, 7]] {
        let x = rand_tensor(&mut rng, &shape, 0.0, 1.0);
        let report = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let s = t.sobel_magnitude(v[0])?;
                Ok(t.sum(s))
            },
            &[x],
            1e-7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
    for (h, w) in [(3, 3), (4, 2), (2, 5)] {
        let x = rand_tensor(&mut rng, &[3, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[3, h, w], -1.0, 1.0);
        let report = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let n = t.normalize_vectors(v[0], [0.0, 0.0, -1.0])?;
                let m = t.mul(n, v[1])?;
                Ok(t.sum(m))
            },
            &[x, wt],
            1e-7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}

#[test]
fn normalize_falls_back_with_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[3, 1, 2], vec![0.0, 3.0, 0.0, 0.0, 0.0, 4.0]).unwrap());
    let n = tape.normalize_vectors(x, [0.0, 0.0, -1.0]).unwrap();
    assert_eq!(tape.value(n).data(), &[0.0, 0.6, 0.0, 0.0, -1.0, 0.8]);
    let s = tape.sum(n);
    let g = tape.backward(s).unwrap();
    let gx = g.get(x).unwrap().data();
    assert_eq!([gx[0], gx[2], gx[4]], [0.0, 0.0, 0.0]);
}

#[test]
fn backward_of_sum_is_sum_of_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let build = |tape: &mut Tape<f64>, x: Var| {
        let s = tape.sigmoid(x);
        let a = tape.total_variation(s).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let b = tape.mean(sq);
        (a, b)
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let (a, b) = build(&mut tape, xv);
    let total = tape.add(a, b).unwrap();
    let g_total = tape.backward(total).unwrap().get(xv).unwrap().clone();
    let g_a = tape.backward(a).unwrap().get(xv).unwrap().clone();
    let g_b = tape.backward(b).unwrap().get(xv).unwrap().clone();
    for ((t, a), b) in g_total.data().iter().zip(g_a.data()).zip(g_b.data()) {
        assert!((t - (a + b)).abs() < 1e-14);
    }
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[3, 5, 5], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let p = tape.avg_pool(xv, 2).unwrap();
    let u = tape.upsample2(p, 5, 5).unwrap();
    let s = tape.sobel_magnitude(u).unwrap();
    let f = tape.hflip(xv).unwrap();
    let n = tape.normalize_vectors(f, [0.0, 0.0, 1.0]).unwrap();
    let a = tape.sum(s);
    let b = tape.sum(n);
    let total = tape.add(a, b).unwrap();
    tape.backward(total).unwrap();
    assert_eq!(tape.value(xv), &x);
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
    let v = rand_tensor(&mut rng, &[3], 0.1, 1.0);
    let wt = rand_tensor(&mut rng, &[3, 3, 8], -1.0, 1.0);
    let report = grad_check(
        |t: &mut Tape<f64>, x: &[Var]| {
            let cat = t.concat_channels(&[x[0], x[1]])?;
            let ch = t.mul_channel(cat, x[2])?;
            let pl = t.mul_plane(ch, x[1])?;
            let fl = t.hflip(pl)?;
            let wide = t.concat_width(pl, fl)?;
            let m = t.mul(wide, x[3])?;
            let up = t.upsample2(m, 5, 16)?;
            let sl = t.slice_channels(up, 1, 2)?;
            let d = t.dot_dir(up, [0.3, -0.2, 0.9])?;
            let r = t.relu(d);
            let s1 = t.mean(sl);
            let s2 = t.sum(r);
            t.add(s1, s2)
        },
        &[a, b, v, wt],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
