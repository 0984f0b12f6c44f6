//! Elementwise nonlinearities and bilinear resampling.

use super::Tensor;
use crate::error::{Error, Result};

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

/// Logistic function, kept strictly inside `(0, 1)` even for saturated inputs.
pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

/// Gradient through a sigmoid given its *output* `s`: `upstream * s * (1 - s)`.
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    zip_with(output, upstream, |s, g| g * s * (1.0 - s))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    zip_with(input, upstream, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// `x * sigmoid(x)`; smooth, so finite differences stay accurate everywhere.
pub fn silu(input: &Tensor) -> Tensor {
    input.map(|x| x * sigmoid_scalar(x))
}

pub fn silu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    zip_with(input, upstream, |x, g| {
        let s = sigmoid_scalar(x);
        g * (s + x * s * (1.0 - s))
    })
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Interpolation taps for one axis: `(lo, hi, weight_of_hi)` per output index.
///
/// Uses half-pixel centres: output `o` samples source coordinate
/// `(o + 0.5) * src / dst - 0.5`, clamped to the valid range.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize of every channel of a `(c, h, w)` tensor to `out_h x out_w`.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`resize_bilinear`]: scatters `upstream` back onto an `(c, h, w)` grid.
pub fn resize_bilinear_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::InvalidInput(format!(
            "expected a rank-3 input shape, got {input_shape:?}"
        )));
    };
    let (uc, out_h, out_w) = upstream.dims3()?;
    if uc != c || h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!(
            "upstream shape {:?} incompatible with input shape {input_shape:?}",
            upstream.shape()
        )));
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let g = upstream.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        let gp = &g[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let v = gp[oy * out_w + ox];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Halves both spatial extents (floor) with bilinear weighting.
pub fn downsample2x(input: &Tensor) -> Result<Tensor> {
    let (_, h, w) = input.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!(
            "downsample needs at least 2x2 spatial extent, got {h}x{w}"
        )));
    }
    resize_bilinear(input, h / 2, w / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    /// Per-pixel bilinear sample written out directly from the half-pixel convention.
    fn bilinear_at(
        plane: &[f64],
        h: usize,
        w: usize,
        oy: usize,
        ox: usize,
        oh: usize,
        ow: usize,
    ) -> f64 {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
            .max(0.0)
            .min((h - 1) as f64);
        let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
            .max(0.0)
            .min((w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
        let p = |y: usize, x: usize| plane[y * w + x];
        p(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + p(y0, x1) * (1.0 - dy) * dx
            + p(y1, x0) * dy * (1.0 - dx)
            + p(y1, x1) * dy * dx
    }

    #[test]
    fn sigmoid_values() {
        let out = sigmoid(&Tensor::new(vec![3], vec![0.0, 20.0, 800.0]).unwrap());
        assert_eq!(out.data()[0], 0.5);
        assert!(out.data()[1] > 0.999999 && out.data()[1] < 1.0);
        assert!(out.data()[2] < 1.0);
        let low = sigmoid(&Tensor::new(vec![1], vec![-800.0]).unwrap());
        assert!(low.data()[0] > 0.0);
    }

    #[test]
    fn sigmoid_backward_matches_finite_differences() {
        let x = random_tensor(11, &[20]);
        let g = random_tensor(12, &[20]);
        let analytic = sigmoid_backward(&sigmoid(&x), &g).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let xi = x.data()[i];
            let num = (sigmoid_scalar(xi + h) - sigmoid_scalar(xi - h)) / (2.0 * h) * g.data()[i];
            assert!((analytic.data()[i] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let x = random_tensor(13, &[20]);
        let g = random_tensor(14, &[20]);
        let analytic = silu_backward(&x, &g).unwrap();
        let f = |v: f64| v * sigmoid_scalar(v);
        let h = 1e-5;
        for i in 0..x.len() {
            let xi = x.data()[i];
            let num = (f(xi + h) - f(xi - h)) / (2.0 * h) * g.data()[i];
            assert!((analytic.data()[i] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_masks_negative_inputs() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 5.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn downsample_constant_is_constant() {
        let out = downsample2x(&Tensor::full(&[2, 6, 7], 0.37)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3]);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn downsample_two_by_two_averages_corners() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(downsample2x(&x).unwrap().data(), &[0.5]);
    }

    #[test]
    fn downsample_rejects_tiny_input() {
        assert!(matches!(
            downsample2x(&Tensor::zeros(&[1, 1, 4])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn downsample_matches_per_pixel_formula() {
        let x = random_tensor(5, &[1, 7, 9]);
        let out = downsample2x(&x).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4]);
        for oy in 0..3 {
            for ox in 0..4 {
                let want = bilinear_at(x.data(), 7, 9, oy, ox, 3, 4);
                assert!((out.data()[oy * 4 + ox] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn upsample_matches_per_pixel_formula() {
        let x = random_tensor(6, &[1, 3, 3]);
        let out = resize_bilinear(&x, 6, 6).unwrap();
        for oy in 0..6 {
            for ox in 0..6 {
                let want = bilinear_at(x.data(), 3, 3, oy, ox, 6, 6);
                assert!((out.data()[oy * 6 + ox] - want).abs() <= 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn sigmoid_is_symmetric_and_open(t in -50.0f64..50.0) {
            let s = sigmoid_scalar(t);
            prop_assert!(s > 0.0 && s < 1.0);
            prop_assert!((sigmoid_scalar(-t) - (1.0 - s)).abs() <= 1e-12);
        }

        #[test]
        fn resize_backward_is_adjoint(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, oh in 1usize..10, ow in 1usize..10) {
            let x = random_tensor(seed, &[2, h, w]);
            let g = random_tensor(seed ^ 0xabcd, &[2, oh, ow]);
            let fx = resize_bilinear(&x, oh, ow).unwrap();
            let bg = resize_bilinear_backward(&[2, h, w], &g).unwrap();
            prop_assert!((fx.dot(&g).unwrap() - x.dot(&bg).unwrap()).abs() <= 1e-9);
        }
    }
}
