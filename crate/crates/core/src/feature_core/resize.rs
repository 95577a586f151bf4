use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizePolicy {
    pub mode: ResizeMode,
    pub align_corners: bool,
}

impl Default for ResizePolicy {
    fn default() -> Self {
        Self { mode: ResizeMode::Bilinear, align_corners: true }
    }
}

/// Source taps along one axis: output index `o` reads `lo[o]` with weight
/// `1 - frac[o]` and `hi[o]` with weight `frac[o]`.
#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(n_in: usize, n_out: usize, align_corners: bool) -> Self {
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = if align_corners {
                if n_out == 1 {
                    0.0
                } else {
                    o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                }
            } else {
                ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0)
            };
            let l = (src.floor() as usize).min(n_in - 1);
            let f = src - l as f64;
            if f <= 0.0 || l + 1 >= n_in {
                lo.push(l);
                hi.push(l);
                frac.push(0.0);
            } else {
                lo.push(l);
                hi.push(l + 1);
                frac.push(f);
            }
        }
        Self { lo, hi, frac }
    }
}

struct Plan {
    a: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    ys: AxisTaps,
    xs: AxisTaps,
}

fn plan(shape: &[usize], out_h: usize, out_w: usize, policy: ResizePolicy) -> Result<Plan> {
    ensure!(shape.len() == 4, Shape, "bilinear_resize expects [A,H,W,C], got {:?}", shape);
    ensure!(out_h >= 1 && out_w >= 1, Dimension, "output dims must be positive, got {out_h}x{out_w}");
    ensure!(shape.iter().all(|&d| d >= 1), Dimension, "input dims must be positive, got {:?}", shape);
    let ResizeMode::Bilinear = policy.mode;
    Ok(Plan {
        a: shape[0],
        h: shape[1],
        w: shape[2],
        c: shape[3],
        oh: out_h,
        ow: out_w,
        ys: AxisTaps::new(shape[1], out_h, policy.align_corners),
        xs: AxisTaps::new(shape[2], out_w, policy.align_corners),
    })
}

fn forward<T: Real>(p: &Plan, x: &[T]) -> Vec<T> {
    let Plan { a, h, w, c, oh, ow, .. } = *p;
    let mut out = vec![T::zero(); a * oh * ow * c];
    for ai in 0..a {
        let base = ai * h * w * c;
        for i in 0..oh {
            let (y0, y1, fy) = (p.ys.lo[i], p.ys.hi[i], T::lit(p.ys.frac[i]));
            for j in 0..ow {
                let (x0, x1, fx) = (p.xs.lo[j], p.xs.hi[j], T::lit(p.xs.frac[j]));
                let r00 = &x[base + (y0 * w + x0) * c..][..c];
                let r01 = &x[base + (y0 * w + x1) * c..][..c];
                let r10 = &x[base + (y1 * w + x0) * c..][..c];
                let r11 = &x[base + (y1 * w + x1) * c..][..c];
                let dst = &mut out[((ai * oh + i) * ow + j) * c..][..c];
                for ch in 0..c {
                    let top = (T::one() - fx) * r00[ch] + fx * r01[ch];
                    let bot = (T::one() - fx) * r10[ch] + fx * r11[ch];
                    dst[ch] = (T::one() - fy) * top + fy * bot;
                }
            }
        }
    }
    out
}

fn backward<T: Real>(p: &Plan, g: &[T]) -> Vec<T> {
    let Plan { a, h, w, c, oh, ow, .. } = *p;
    let mut gx = vec![T::zero(); a * h * w * c];
    for ai in 0..a {
        let base = ai * h * w * c;
        for i in 0..oh {
            let (y0, y1, fy) = (p.ys.lo[i], p.ys.hi[i], T::lit(p.ys.frac[i]));
            for j in 0..ow {
                let (x0, x1, fx) = (p.xs.lo[j], p.xs.hi[j], T::lit(p.xs.frac[j]));
                let src = &g[((ai * oh + i) * ow + j) * c..][..c];
                let taps = [
                    (y0, x0, (T::one() - fy) * (T::one() - fx)),
                    (y0, x1, (T::one() - fy) * fx),
                    (y1, x0, fy * (T::one() - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wt) in taps {
                    if wt == T::zero() {
                        continue;
                    }
                    let dst = &mut gx[base + (yy * w + xx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
    }
    gx
}

/// Per-channel bilinear interpolation of `[A, H, W, C]` to `[A, out_h, out_w, C]`.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize, policy: ResizePolicy) -> Result<Tensor<T>> {
    let p = plan(x.shape(), out_h, out_w, policy)?;
    Tensor::from_vec(&[p.a, out_h, out_w, p.c], forward(&p, x.data()))
}

/// Differentiable form of [`bilinear_resize`].
pub fn bilinear_resize_var<T: Real>(
    tape: &Tape<T>,
    x: Var,
    out_h: usize,
    out_w: usize,
    policy: ResizePolicy,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() == 4 && shape[1] == out_h && shape[2] == out_w && policy.align_corners {
        // exact identity; skip the copy
        return Ok(x);
    }
    let p = Arc::new(plan(&shape, out_h, out_w, policy)?);
    let out = Tensor::from_vec(&[p.a, out_h, out_w, p.c], forward(&p, tape.value(x).data()))?;
    Ok(tape.push(out, &[x], move |g, _| {
        vec![Some(Tensor::from_vec(&[p.a, p.h, p.w, p.c], backward(&p, g.data())).expect("shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, GradCheckConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_when_dims_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 5, 7, 3], 1.0, &mut rng);
        let y = bilinear_resize(&x, 5, 7, ResizePolicy::default()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_preserved_on_upsample() {
        let x = t(&[1, 1, 1, 1], &[3.0]);
        let y = bilinear_resize(&x, 5, 5, ResizePolicy::default()).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 1]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn two_by_two_to_three_by_three() {
        let x = t(&[1, 2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_resize(&x, 3, 3, ResizePolicy::default()).unwrap();
        let expected = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corners_are_copied_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[1, 4, 6, 2], 1.0, &mut rng);
        let y = bilinear_resize(&x, 9, 3, ResizePolicy::default()).unwrap();
        for c in 0..2 {
            let at = |t: &Tensor<f64>, _h: usize, w: usize, i: usize, j: usize| t.data()[(i * w + j) * 2 + c];
            assert_eq!(at(&y, 9, 3, 0, 0), at(&x, 4, 6, 0, 0));
            assert_eq!(at(&y, 9, 3, 0, 2), at(&x, 4, 6, 0, 5));
            assert_eq!(at(&y, 9, 3, 8, 0), at(&x, 4, 6, 3, 0));
            assert_eq!(at(&y, 9, 3, 8, 2), at(&x, 4, 6, 3, 5));
        }
    }

    #[test]
    fn rejects_zero_output() {
        let x = t(&[1, 1, 1, 1], &[1.0]);
        assert!(bilinear_resize(&x, 0, 2, ResizePolicy::default()).is_err());
    }

    #[test]
    fn half_pixel_mode_runs() {
        let x = t(&[1, 2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let policy = ResizePolicy { align_corners: false, ..Default::default() };
        let y = bilinear_resize(&x, 4, 4, policy).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[15], 3.0);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 2], 1.0, &mut rng);
        let wts = Tensor::<f64>::randn(&[2, 7, 4, 2], 1.0, &mut rng);
        let report = check_fn("bilinear", &[x], GradCheckConfig::default().with_tol(1e-4), |tape, xs| {
            let y = bilinear_resize_var(tape, xs[0], 7, 4, ResizePolicy::default())?;
            let w = tape.constant(wts.clone());
            let z = tape.mul(y, w)?;
            Ok(tape.sum_all(z))
        })
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    proptest! {
        #[test]
        fn resize_is_linear(seed in 0u64..1000, h in 1usize..6, w in 1usize..6, oh in 1usize..8, ow in 1usize..8,
                            a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&[1, h, w, 2], 1.0, &mut rng);
            let y = Tensor::<f64>::randn(&[1, h, w, 2], 1.0, &mut rng);
            let p = ResizePolicy::default();
            let combo = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
            let lhs = bilinear_resize(&combo, oh, ow, p).unwrap();
            let rx = bilinear_resize(&x, oh, ow, p).unwrap();
            let ry = bilinear_resize(&y, oh, ow, p).unwrap();
            let rhs = rx.zip_map(&ry, |u, v| a * u + b * v).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-6 * (1.0 + r.abs()));
            }
        }
    }
}
