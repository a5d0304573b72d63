//! Differentiable tensor ops.
//!
//! Every op pushes one node; backward closures capture the (cheaply
//! cloneable) tensors they need. Feature maps are `[C, H, W]`, sequence
//! activations are `[rows, cols]`, conv weights are `[C_out, C_in, kh, kw]`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

fn unary(tape: &Tape, x: &Var, out: Tensor, dfn: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    tape.check(x);
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let xval = x.value().clone();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            if sink.wants(xid) {
                let gx = Tensor::from_vec(
                    xval.shape().to_vec(),
                    xval.data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&x, &go)| go * dfn(x, 0.0))
                        .collect(),
                );
                sink.add(xid, gx);
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn add(tape: &Tape, a: &Var, b: &Var) -> Var {
    tape.check(a);
    tape.check(b);
    let out = a.value().add(b.value());
    let rg = tape.any_requires(&[a, b]);
    let (aid, bid) = (a.id, b.id);
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(aid, g.clone());
            sink.add(bid, g.clone());
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn sub(tape: &Tape, a: &Var, b: &Var) -> Var {
    tape.check(a);
    tape.check(b);
    let out = a.value().sub(b.value());
    let rg = tape.any_requires(&[a, b]);
    let (aid, bid) = (a.id, b.id);
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(aid, g.clone());
            sink.add(bid, g.scale(-1.0));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn mul(tape: &Tape, a: &Var, b: &Var) -> Var {
    tape.check(a);
    tape.check(b);
    let out = a.value().mul(b.value());
    let rg = tape.any_requires(&[a, b]);
    let (aid, bid) = (a.id, b.id);
    let (av, bv) = (a.value().clone(), b.value().clone());
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            if sink.wants(aid) {
                sink.add(aid, g.mul(&bv));
            }
            if sink.wants(bid) {
                sink.add(bid, g.mul(&av));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn mul_scalar(tape: &Tape, x: &Var, s: f64) -> Var {
    tape.check(x);
    let out = x.value().scale(s);
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(xid, g.scale(s));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn add_scalar(tape: &Tape, x: &Var, s: f64) -> Var {
    tape.check(x);
    let out = x.value().map(|v| v + s);
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(xid, g.clone());
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

/// `sum_i coeff_i * x_i`, all same shape.
pub fn lincomb(tape: &Tape, terms: &[(&Var, f64)]) -> Var {
    assert!(!terms.is_empty());
    let mut out = terms[0].0.value().scale(terms[0].1);
    for (v, c) in &terms[1..] {
        tape.check(v);
        out.accumulate(v.value(), *c);
    }
    let refs: Vec<&Var> = terms.iter().map(|(v, _)| *v).collect();
    let rg = tape.any_requires(&refs);
    let ids: Vec<(usize, f64)> = terms.iter().map(|(v, c)| (v.id, *c)).collect();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            for &(id, c) in &ids {
                if sink.wants(id) {
                    sink.add(id, g.scale(c));
                }
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn relu(tape: &Tape, x: &Var) -> Var {
    let out = x.value().map(|v| v.max(0.0));
    unary(tape, x, out, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(tape: &Tape, x: &Var, slope: f64) -> Var {
    let out = x.value().map(|v| if v > 0.0 { v } else { slope * v });
    unary(tape, x, out, move |x, _| if x > 0.0 { 1.0 } else { slope })
}

pub fn silu(tape: &Tape, x: &Var) -> Var {
    let out = x.value().map(|v| v / (1.0 + (-v).exp()));
    unary(tape, x, out, |x, _| {
        let s = 1.0 / (1.0 + (-x).exp());
        s * (1.0 + x * (1.0 - s))
    })
}

pub fn sigmoid(tape: &Tape, x: &Var) -> Var {
    let out = x.value().map(|v| 1.0 / (1.0 + (-v).exp()));
    unary(tape, x, out, |x, _| {
        let s = 1.0 / (1.0 + (-x).exp());
        s * (1.0 - s)
    })
}

pub fn tanh(tape: &Tape, x: &Var) -> Var {
    let out = x.value().map(f64::tanh);
    unary(tape, x, out, |x, _| 1.0 - x.tanh() * x.tanh())
}

pub fn square(tape: &Tape, x: &Var) -> Var {
    let out = x.value().map(|v| v * v);
    unary(tape, x, out, |x, _| 2.0 * x)
}

pub fn abs(tape: &Tape, x: &Var) -> Var {
    let out = x.value().map(f64::abs);
    unary(tape, x, out, |x, _| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// `sqrt(x + eps)`; keeps gradients finite at zero.
pub fn sqrt_eps(tape: &Tape, x: &Var, eps: f64) -> Var {
    let out = x.value().map(|v| (v + eps).sqrt());
    unary(tape, x, out, move |x, _| 0.5 / (x + eps).sqrt())
}

pub fn sum_all(tape: &Tape, x: &Var) -> Var {
    tape.check(x);
    let out = Tensor::scalar(x.value().sum());
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let shape = x.value().shape().to_vec();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(xid, Tensor::full(shape.clone(), g.data()[0]));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn mean_all(tape: &Tape, x: &Var) -> Var {
    let n = x.value().numel() as f64;
    let s = sum_all(tape, x);
    mul_scalar(tape, &s, 1.0 / n)
}

/// Mean over channels: `[C,H,W] -> [1,H,W]`.
pub fn mean_channels(tape: &Tape, x: &Var) -> Var {
    tape.check(x);
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 3);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let src = x.value().data();
    let mut out = vec![0.0; hw];
    for ci in 0..c {
        for i in 0..hw {
            out[i] += src[ci * hw + i];
        }
    }
    let inv = 1.0 / c as f64;
    for v in &mut out {
        *v *= inv;
    }
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let mut gx = vec![0.0; c * hw];
            for ci in 0..c {
                for i in 0..hw {
                    gx[ci * hw + i] = gd[i] * inv;
                }
            }
            sink.add(xid, Tensor::from_vec(vec![c, h, w], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![1, h, w], out), rg, backward)
}

/// Elementwise product with a constant `[H,W]` map, broadcast over channels.
pub fn mul_map(tape: &Tape, x: &Var, map: &Tensor) -> Var {
    tape.check(x);
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 3);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(map.shape(), &[h, w]);
    let hw = h * w;
    let src = x.value().data();
    let md = map.data();
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        for i in 0..hw {
            out[ci * hw + i] = src[ci * hw + i] * md[i];
        }
    }
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let map = map.clone();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let md = map.data();
            let mut gx = vec![0.0; c * hw];
            for ci in 0..c {
                for i in 0..hw {
                    gx[ci * hw + i] = gd[ci * hw + i] * md[i];
                }
            }
            sink.add(xid, Tensor::from_vec(vec![c, h, w], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![c, h, w], out), rg, backward)
}

pub fn matmul(tape: &Tape, a: &Var, b: &Var) -> Var {
    tape.check(a);
    tape.check(b);
    let out = a.value().matmul(b.value());
    let rg = tape.any_requires(&[a, b]);
    let (aid, bid) = (a.id, b.id);
    let (av, bv) = (a.value().clone(), b.value().clone());
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            if sink.wants(aid) {
                sink.add(aid, g.matmul_nt(&bv));
            }
            if sink.wants(bid) {
                sink.add(bid, av.matmul_tn(g));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn transpose2d(tape: &Tape, x: &Var) -> Var {
    tape.check(x);
    let out = x.value().transpose2d();
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(xid, g.transpose2d());
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

/// Row-broadcast bias add: `[N,D] + [D]`.
pub fn add_bias_rows(tape: &Tape, x: &Var, b: &Var) -> Var {
    tape.check(x);
    tape.check(b);
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 2);
    let (n, d) = (shape[0], shape[1]);
    assert_eq!(b.shape(), &[d]);
    let bd = b.value().data();
    let mut out = x.value().data().to_vec();
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += bd[j];
        }
    }
    let rg = tape.any_requires(&[x, b]);
    let (xid, bid) = (x.id, b.id);
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(xid, g.clone());
            if sink.wants(bid) {
                let gd = g.data();
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        gb[j] += gd[i * d + j];
                    }
                }
                sink.add(bid, Tensor::from_vec(vec![d], gb));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![n, d], out), rg, backward)
}

/// Channel-broadcast bias add: `[C,H,W] + [C]`.
pub fn add_bias_chw(tape: &Tape, x: &Var, b: &Var) -> Var {
    tape.check(x);
    tape.check(b);
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 3);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(b.shape(), &[c]);
    let hw = h * w;
    let bd = b.value().data();
    let mut out = x.value().data().to_vec();
    for ci in 0..c {
        for i in 0..hw {
            out[ci * hw + i] += bd[ci];
        }
    }
    let rg = tape.any_requires(&[x, b]);
    let (xid, bid) = (x.id, b.id);
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(xid, g.clone());
            if sink.wants(bid) {
                let gd = g.data();
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    for i in 0..hw {
                        gb[ci] += gd[ci * hw + i];
                    }
                }
                sink.add(bid, Tensor::from_vec(vec![c], gb));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![c, h, w], out), rg, backward)
}

fn reflect_index(i: isize, n: isize) -> isize {
    if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    }
}

/// Gather index map for im2col: `out[hw * k + col] = input linear index or -1`.
fn conv_index_map(
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> (Vec<i64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let k = cin * kh * kw;
    let mut map = vec![-1i64; oh * ow * k];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * k;
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let (iy, ix) = match mode {
                            PadMode::Zero => {
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    map[base + ci * kh * kw + ky * kw + kx] = -1;
                                    continue;
                                }
                                (iy, ix)
                            }
                            PadMode::Reflect => (
                                reflect_index(iy, h as isize),
                                reflect_index(ix, w as isize),
                            ),
                        };
                        map[base + ci * kh * kw + ky * kw + kx] =
                            (ci * h * w + iy as usize * w + ix as usize) as i64;
                    }
                }
            }
        }
    }
    (map, oh, ow)
}

/// 2-D convolution, `[C_in,H,W] * [C_out,C_in,kh,kw] -> [C_out,H',W']`.
pub fn conv2d(
    tape: &Tape,
    x: &Var,
    weight: &Var,
    bias: Option<&Var>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Var {
    tape.check(x);
    tape.check(weight);
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
    assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,kh,kw]");
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
    if mode == PadMode::Reflect {
        assert!(pad < h && pad < w, "reflect pad too large");
    }
    let (map, oh, ow) = conv_index_map(cin, h, w, kh, kw, stride, pad, mode);
    let map = Arc::new(map);
    let k = cin * kh * kw;
    let hw = oh * ow;

    let xd = x.value().data();
    let mut cols = vec![0.0; hw * k];
    for (dst, &idx) in cols.iter_mut().zip(map.iter()) {
        if idx >= 0 {
            *dst = xd[idx as usize];
        }
    }
    let cols = Tensor::from_vec(vec![hw, k], cols);
    let w_mat = weight.value().reshape(vec![cout, k]);
    // [Cout, K] x [HW, K]^T -> [Cout, HW]
    let mut out = w_mat.matmul_nt(&cols);
    if let Some(b) = bias {
        tape.check(b);
        assert_eq!(b.shape(), &[cout]);
        let bd = b.value().data();
        let od = out.data_mut();
        for c in 0..cout {
            for i in 0..hw {
                od[c * hw + i] += bd[c];
            }
        }
    }
    let out = out.reshape(vec![cout, oh, ow]);

    let mut parents: Vec<&Var> = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let rg = tape.any_requires(&parents);
    let (xid, wid) = (x.id, weight.id);
    let bid = bias.map(|b| b.id);
    let xshape = vec![cin, h, w];
    let wshape = ws.clone();
    let wv = weight.value().clone();
    let map_b = map.clone();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let g_mat = g.reshape(vec![cout, hw]);
            if sink.wants(wid) {
                // dW = g [Cout,HW] x cols [HW,K]
                let dw = g_mat.matmul(&cols);
                sink.add(wid, dw.reshape(wshape.clone()));
            }
            if sink.wants(xid) {
                let w_mat = wv.reshape(vec![cout, k]);
                // dcols = W^T g -> [K, HW]
                let dcols = w_mat.matmul_tn(&g_mat);
                let dc = dcols.data();
                let mut gx = vec![0.0; cin * h * w];
                for hw_i in 0..hw {
                    let base = hw_i * k;
                    for kk in 0..k {
                        let idx = map_b[base + kk];
                        if idx >= 0 {
                            gx[idx as usize] += dc[kk * hw + hw_i];
                        }
                    }
                }
                sink.add(xid, Tensor::from_vec(xshape.clone(), gx));
            }
            if let Some(bid) = bid {
                if sink.wants(bid) {
                    let gd = g_mat.data();
                    let mut gb = vec![0.0; cout];
                    for c in 0..cout {
                        for i in 0..hw {
                            gb[c] += gd[c * hw + i];
                        }
                    }
                    sink.add(bid, Tensor::from_vec(vec![cout], gb));
                }
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn upsample_nearest2x(tape: &Tape, x: &Var) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 3);
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.value().data();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xq in 0..ow {
                out[ci * oh * ow + y * ow + xq] = xd[ci * h * w + (y / 2) * w + xq / 2];
            }
        }
    }
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..oh {
                    for xq in 0..ow {
                        gx[ci * h * w + (y / 2) * w + xq / 2] +=
                            gd[ci * oh * ow + y * ow + xq];
                    }
                }
            }
            sink.add(xid, Tensor::from_vec(vec![c, h, w], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![c, oh, ow], out), rg, backward)
}

/// Non-overlapping average pooling by integer factor.
pub fn avg_pool(tape: &Tape, x: &Var, factor: usize) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 3);
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0);
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let xd = x.value().data();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += xd[ci * h * w + (oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                out[ci * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = gd[ci * oh * ow + oy * ow + ox] * inv;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                gx[ci * h * w + (oy * factor + dy) * w + ox * factor + dx] += go;
                            }
                        }
                    }
                }
            }
            sink.add(xid, Tensor::from_vec(vec![c, h, w], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![c, oh, ow], out), rg, backward)
}

fn bilinear_taps(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (in_n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize (half-pixel centers). Identity when sizes match.
pub fn bilinear_resize(tape: &Tape, x: &Var, oh: usize, ow: usize) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 3);
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let xd = x.value().data();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[ci * oh * ow + oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let go = gd[ci * oh * ow + oy * ow + ox];
                        let base = ci * h * w;
                        gx[base + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                        gx[base + y0 * w + x1] += go * (1.0 - fy) * fx;
                        gx[base + y1 * w + x0] += go * fy * (1.0 - fx);
                        gx[base + y1 * w + x1] += go * fy * fx;
                    }
                }
            }
            sink.add(xid, Tensor::from_vec(vec![c, h, w], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![c, oh, ow], out), rg, backward)
}

pub fn concat_channels(tape: &Tape, a: &Var, b: &Var) -> Var {
    tape.check(a);
    tape.check(b);
    let (asn, bsn) = (a.shape().to_vec(), b.shape().to_vec());
    assert_eq!(asn.len(), 3);
    assert_eq!(bsn.len(), 3);
    assert_eq!(&asn[1..], &bsn[1..], "spatial mismatch in concat");
    let (ca, cb, h, w) = (asn[0], bsn[0], asn[1], asn[2]);
    let mut out = Vec::with_capacity((ca + cb) * h * w);
    out.extend_from_slice(a.value().data());
    out.extend_from_slice(b.value().data());
    let rg = tape.any_requires(&[a, b]);
    let (aid, bid) = (a.id, b.id);
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            if sink.wants(aid) {
                sink.add(aid, Tensor::from_vec(vec![ca, h, w], gd[..ca * h * w].to_vec()));
            }
            if sink.wants(bid) {
                sink.add(bid, Tensor::from_vec(vec![cb, h, w], gd[ca * h * w..].to_vec()));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![ca + cb, h, w], out), rg, backward)
}

/// Column slice of a `[N,D]` matrix.
pub fn slice_cols(tape: &Tape, x: &Var, start: usize, len: usize) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 2);
    let (n, d) = (xs[0], xs[1]);
    assert!(start + len <= d);
    let xd = x.value().data();
    let mut out = vec![0.0; n * len];
    for i in 0..n {
        out[i * len..(i + 1) * len].copy_from_slice(&xd[i * d + start..i * d + start + len]);
    }
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                gx[i * d + start..i * d + start + len]
                    .copy_from_slice(&gd[i * len..(i + 1) * len]);
            }
            sink.add(xid, Tensor::from_vec(vec![n, d], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![n, len], out), rg, backward)
}

/// Column-wise concat of `[N,D_i]` matrices.
pub fn concat_cols(tape: &Tape, parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let n = parts[0].shape()[0];
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| {
            tape.check(p);
            assert_eq!(p.shape().len(), 2);
            assert_eq!(p.shape()[0], n);
            p.shape()[1]
        })
        .collect();
    let d: usize = dims.iter().sum();
    let mut out = vec![0.0; n * d];
    let mut off = 0;
    for (p, &pd) in parts.iter().zip(dims.iter()) {
        let src = p.value().data();
        for i in 0..n {
            out[i * d + off..i * d + off + pd].copy_from_slice(&src[i * pd..(i + 1) * pd]);
        }
        off += pd;
    }
    let rg = tape.any_requires(parts);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let mut off = 0;
            for (&id, &pd) in ids.iter().zip(dims.iter()) {
                if sink.wants(id) {
                    let mut gp = vec![0.0; n * pd];
                    for i in 0..n {
                        gp[i * pd..(i + 1) * pd]
                            .copy_from_slice(&gd[i * d + off..i * d + off + pd]);
                    }
                    sink.add(id, Tensor::from_vec(vec![n, pd], gp));
                }
                off += pd;
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![n, d], out), rg, backward)
}

/// Row-wise softmax with an optional keep-mask over columns.
/// Fully masked rows yield all-zero rows instead of NaN.
pub fn masked_softmax_rows(tape: &Tape, x: &Var, keep: Option<&[bool]>) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 2);
    let (n, d) = (xs[0], xs[1]);
    if let Some(k) = keep {
        assert_eq!(k.len(), d);
    }
    let xd = x.value().data();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..d {
            if keep.is_none_or(|k| k[j]) {
                mx = mx.max(row[j]);
            }
        }
        if mx == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let mut denom = 0.0;
        for j in 0..d {
            if keep.is_none_or(|k| k[j]) {
                let e = (row[j] - mx).exp();
                out[i * d + j] = e;
                denom += e;
            }
        }
        for j in 0..d {
            out[i * d + j] /= denom;
        }
    }
    let out = Tensor::from_vec(vec![n, d], out);
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let yv = out.clone();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let yd = yv.data();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += gd[i * d + j] * yd[i * d + j];
                }
                for j in 0..d {
                    gx[i * d + j] = yd[i * d + j] * (gd[i * d + j] - dot);
                }
            }
            sink.add(xid, Tensor::from_vec(vec![n, d], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}

pub fn softmax_rows(tape: &Tape, x: &Var) -> Var {
    masked_softmax_rows(tape, x, None)
}

/// Replace whole columns of a row-stochastic matrix and rescale the rest
/// so each row keeps unit mass where possible. Forward-only: sampling
/// machinery, never part of a training graph.
pub fn override_columns(tape: &Tape, weights: &Var, overrides: &BTreeMap<usize, Vec<f64>>) -> Var {
    tape.check(weights);
    let ws = weights.shape().to_vec();
    assert_eq!(ws.len(), 2);
    let (n, d) = (ws[0], ws[1]);
    for (col, vals) in overrides {
        assert!(*col < d, "override column out of range");
        assert_eq!(vals.len(), n, "override column length mismatch");
    }
    let wd = weights.value().data();
    let mut out = wd.to_vec();
    for i in 0..n {
        let mut override_mass = 0.0;
        let mut rest_mass = 0.0;
        for j in 0..d {
            if overrides.contains_key(&j) {
                override_mass += overrides[&j][i];
            } else {
                rest_mass += wd[i * d + j];
            }
        }
        let target_rest = (1.0 - override_mass).max(0.0);
        let scale = if rest_mass > 1e-12 { target_rest / rest_mass } else { 0.0 };
        for j in 0..d {
            out[i * d + j] = match overrides.get(&j) {
                Some(vals) => vals[i],
                None => wd[i * d + j] * scale,
            };
        }
    }
    let rg = tape.any_requires(&[weights]);
    let backward = rg.then(|| {
        Box::new(move |_: &Tensor, _: &mut crate::tape::GradSink| {
            panic!("override_columns has no backward pass; it is sampling-only");
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![n, d], out), rg, backward)
}

/// Group normalization over `[C,H,W]` with per-channel affine.
pub fn group_norm(
    tape: &Tape,
    x: &Var,
    gamma: &Var,
    beta: &Var,
    groups: usize,
    eps: f64,
) -> Var {
    tape.check(x);
    tape.check(gamma);
    tape.check(beta);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 3);
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    assert_eq!(gamma.shape(), &[c]);
    assert_eq!(beta.shape(), &[c]);
    let gc = c / groups;
    let hw = h * w;
    let gn = gc * hw;
    let xd = x.value().data();
    let gamma_d = gamma.value().data();
    let beta_d = beta.value().data();
    let mut xhat = vec![0.0; c * hw];
    let mut out = vec![0.0; c * hw];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let span = g * gc * hw..(g + 1) * gc * hw;
        let mean: f64 = xd[span.clone()].iter().sum::<f64>() / gn as f64;
        let var: f64 = xd[span.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gn as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[g] = istd;
        for ci in 0..gc {
            let ch = g * gc + ci;
            for i in 0..hw {
                let idx = ch * hw + i;
                let xh = (xd[idx] - mean) * istd;
                xhat[idx] = xh;
                out[idx] = gamma_d[ch] * xh + beta_d[ch];
            }
        }
    }
    let rg = tape.any_requires(&[x, gamma, beta]);
    let (xid, gid, bid) = (x.id, gamma.id, beta.id);
    let xhat = Tensor::from_vec(vec![c, h, w], xhat);
    let gamma_v = gamma.value().clone();
    let backward = rg.then(|| {
        Box::new(move |g_out: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g_out.data();
            let xh = xhat.data();
            let gamma_d = gamma_v.data();
            if sink.wants(gid) {
                let mut gg = vec![0.0; c];
                for ch in 0..c {
                    for i in 0..hw {
                        gg[ch] += gd[ch * hw + i] * xh[ch * hw + i];
                    }
                }
                sink.add(gid, Tensor::from_vec(vec![c], gg));
            }
            if sink.wants(bid) {
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    for i in 0..hw {
                        gb[ch] += gd[ch * hw + i];
                    }
                }
                sink.add(bid, Tensor::from_vec(vec![c], gb));
            }
            if sink.wants(xid) {
                let mut gx = vec![0.0; c * hw];
                for g in 0..groups {
                    let istd = inv_std[g];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ci in 0..gc {
                        let ch = g * gc + ci;
                        for i in 0..hw {
                            let idx = ch * hw + i;
                            let dxh = gd[idx] * gamma_d[ch];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[idx];
                        }
                    }
                    let m1 = sum_dxhat / gn as f64;
                    let m2 = sum_dxhat_xhat / gn as f64;
                    for ci in 0..gc {
                        let ch = g * gc + ci;
                        for i in 0..hw {
                            let idx = ch * hw + i;
                            let dxh = gd[idx] * gamma_d[ch];
                            gx[idx] = istd * (dxh - m1 - xh[idx] * m2);
                        }
                    }
                }
                sink.add(xid, Tensor::from_vec(vec![c, h, w], gx));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![c, h, w], out), rg, backward)
}

/// Layer normalization over the last dim of `[N,D]` with affine.
pub fn layer_norm(tape: &Tape, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
    tape.check(x);
    tape.check(gamma);
    tape.check(beta);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 2);
    let (n, d) = (xs[0], xs[1]);
    assert_eq!(gamma.shape(), &[d]);
    assert_eq!(beta.shape(), &[d]);
    let xd = x.value().data();
    let gamma_d = gamma.value().data();
    let beta_d = beta.value().data();
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat[i * d + j] = xh;
            out[i * d + j] = gamma_d[j] * xh + beta_d[j];
        }
    }
    let rg = tape.any_requires(&[x, gamma, beta]);
    let (xid, gid, bid) = (x.id, gamma.id, beta.id);
    let xhat = Tensor::from_vec(vec![n, d], xhat);
    let gamma_v = gamma.value().clone();
    let backward = rg.then(|| {
        Box::new(move |g_out: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g_out.data();
            let xh = xhat.data();
            let gamma_d = gamma_v.data();
            if sink.wants(gid) {
                let mut gg = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        gg[j] += gd[i * d + j] * xh[i * d + j];
                    }
                }
                sink.add(gid, Tensor::from_vec(vec![d], gg));
            }
            if sink.wants(bid) {
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        gb[j] += gd[i * d + j];
                    }
                }
                sink.add(bid, Tensor::from_vec(vec![d], gb));
            }
            if sink.wants(xid) {
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let istd = inv_std[i];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = gd[i * d + j] * gamma_d[j];
                        m1 += dxh;
                        m2 += dxh * xh[i * d + j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dxh = gd[i * d + j] * gamma_d[j];
                        gx[i * d + j] = istd * (dxh - m1 - xh[i * d + j] * m2);
                    }
                }
                sink.add(xid, Tensor::from_vec(vec![n, d], gx));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![n, d], out), rg, backward)
}

/// Row gather from an embedding table `[V,D]` by token ids.
pub fn embedding(tape: &Tape, table: &Var, ids: &[usize]) -> Var {
    tape.check(table);
    let ts = table.shape().to_vec();
    assert_eq!(ts.len(), 2);
    let (v, d) = (ts[0], ts[1]);
    for &id in ids {
        assert!(id < v, "token id {id} out of vocabulary size {v}");
    }
    let n = ids.len();
    let td = table.value().data();
    let mut out = vec![0.0; n * d];
    for (i, &id) in ids.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
    }
    let rg = tape.any_requires(&[table]);
    let tid = table.id;
    let ids = ids.to_vec();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            if sink.wants(tid) {
                let gd = g.data();
                let mut gt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gd[i * d + j];
                    }
                }
                sink.add(tid, Tensor::from_vec(vec![v, d], gt));
            }
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![n, d], out), rg, backward)
}

/// Zero out rows flagged `false`; used to keep PAD rows exactly zero.
pub fn mask_rows(tape: &Tape, x: &Var, keep: &[bool]) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 2);
    let (n, d) = (xs[0], xs[1]);
    assert_eq!(keep.len(), n);
    let xd = x.value().data();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        if keep[i] {
            out[i * d..(i + 1) * d].copy_from_slice(&xd[i * d..(i + 1) * d]);
        }
    }
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let keep = keep.to_vec();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            let gd = g.data();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                if keep[i] {
                    gx[i * d..(i + 1) * d].copy_from_slice(&gd[i * d..(i + 1) * d]);
                }
            }
            sink.add(xid, Tensor::from_vec(vec![n, d], gx));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(Tensor::from_vec(vec![n, d], out), rg, backward)
}

/// `[C,H,W] -> [H*W, C]` token-major view for attention.
pub fn chw_to_sc(tape: &Tape, x: &Var) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 3);
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let flat = reshape(tape, x, vec![c, h * w]);
    transpose2d(tape, &flat)
}

/// `[H*W, C] -> [C,H,W]`.
pub fn sc_to_chw(tape: &Tape, x: &Var, h: usize, w: usize) -> Var {
    tape.check(x);
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 2);
    assert_eq!(xs[0], h * w);
    let t = transpose2d(tape, x);
    reshape(tape, &t, vec![xs[1], h, w])
}

pub fn reshape(tape: &Tape, x: &Var, shape: Vec<usize>) -> Var {
    tape.check(x);
    let out = x.value().reshape(shape);
    let rg = tape.any_requires(&[x]);
    let xid = x.id;
    let orig = x.value().shape().to_vec();
    let backward = rg.then(|| {
        Box::new(move |g: &Tensor, sink: &mut crate::tape::GradSink| {
            sink.add(xid, g.reshape(orig.clone()));
        }) as Box<dyn FnOnce(&Tensor, &mut crate::tape::GradSink)>
    });
    tape.push(out, rg, backward)
}
