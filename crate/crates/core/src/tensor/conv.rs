//! Direct 2-D convolution via im2col and GEMM.

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// A 2-D convolution with square stride and symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `(out_channels, in_channels, kernel_h, kernel_w)`.
    pub weight: Tensor,
    /// `(out_channels,)`.
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients of a scalar loss with respect to a convolution's input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [out_c, _, kh, kw] = weight.shape()[..] else {
            return Err(Error::InvalidInput(format!(
                "conv weight must be rank 4, got shape {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [out_c] {
            return Err(Error::InvalidInput(format!(
                "conv bias shape {:?} does not match {out_c} output channels",
                bias.shape()
            )));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidInput(
                "conv stride and kernel extents must be positive".into(),
            ));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let axis = |name: &str, extent: usize, k: usize| {
            let padded = extent + 2 * self.padding;
            if padded < k {
                Err(Error::InvalidInput(format!(
                    "{name} axis: padded extent {padded} is smaller than kernel {k}"
                )))
            } else {
                Ok((padded - k) / self.stride + 1)
            }
        };
        Ok((axis("height", h, kh)?, axis("width", w, kw)?))
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        if c != self.in_channels() {
            return Err(Error::InvalidInput(format!(
                "channel axis: input has {c} channels, layer expects {}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self.output_size(h, w)?;
        Ok((h, w, oh, ow))
    }

    /// Unfolds the input so that convolution becomes `weight (O x CKK) * cols (CKK x P)`.
    fn im2col(&self, input: &Tensor, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let (kh, kw) = self.kernel();
        let c = self.in_channels();
        let p = oh * ow;
        let src = input.data();
        let mut cols = vec![0.0; c * kh * kw * p];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, slot) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *slot = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let (kh, kw) = self.kernel();
        let c = self.in_channels();
        let p = oh * ow;
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (h, w, oh, ow) = layer.check_input(input)?;
    let (kh, kw) = layer.kernel();
    let o = layer.out_channels();
    let ckk = layer.in_channels() * kh * kw;
    let p = oh * ow;
    let cols = layer.im2col(input, h, w, oh, ow);

    let mut out = vec![0.0; o * p];
    for (oc, &b) in layer.bias.data().iter().enumerate() {
        out[oc * p..(oc + 1) * p].fill(b);
    }
    gemm(
        o,
        ckk,
        p,
        layer.weight.data(),
        Layout::Normal,
        &cols,
        Layout::Normal,
        1.0,
        &mut out,
    );
    Tensor::new(vec![o, oh, ow], out)
}

pub fn conv2d_backward(input: &Tensor, layer: &ConvLayer, upstream: &Tensor) -> Result<ConvGrads> {
    let (h, w, oh, ow) = layer.check_input(input)?;
    let o = layer.out_channels();
    if upstream.shape() != [o, oh, ow] {
        return Err(Error::InvalidInput(format!(
            "upstream gradient shape {:?} does not match conv output [{o}, {oh}, {ow}]",
            upstream.shape()
        )));
    }
    let (kh, kw) = layer.kernel();
    let ckk = layer.in_channels() * kh * kw;
    let p = oh * ow;
    let g = upstream.data();
    let cols = layer.im2col(input, h, w, oh, ow);

    // dW = g (O x P) * cols^T (P x CKK)
    let mut dw = vec![0.0; o * ckk];
    gemm(
        o,
        p,
        ckk,
        g,
        Layout::Normal,
        &cols,
        Layout::Transposed,
        0.0,
        &mut dw,
    );

    let db: Vec<f64> = g.chunks_exact(p).map(|row| row.iter().sum()).collect();

    // dcols = W^T (CKK x O) * g (O x P)
    let mut dcols = vec![0.0; ckk * p];
    gemm(
        ckk,
        o,
        p,
        layer.weight.data(),
        Layout::Transposed,
        g,
        Layout::Normal,
        0.0,
        &mut dcols,
    );
    let dx = layer.col2im(&dcols, h, w, oh, ow);

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(layer.weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![o], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_layer(
        rng: &mut ChaCha8Rng,
        o: usize,
        c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvLayer {
        let weight = random_tensor(rng, &[o, c, k, k]);
        let bias = random_tensor(rng, &[o]);
        ConvLayer::new(weight, bias, stride, pad).unwrap()
    }

    /// Six nested loops straight from the definition.
    fn naive_conv(input: &Tensor, layer: &ConvLayer) -> Tensor {
        let (c, h, w) = input.dims3().unwrap();
        let (oh, ow) = layer.output_size(h, w).unwrap();
        let (kh, kw) = layer.kernel();
        let o = layer.out_channels();
        let x = input.data();
        let wt = layer.weight.data();
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias.data()[oc];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * layer.stride + ki) as isize - layer.padding as isize;
                                let ix = (ox * layer.stride + kj) as isize - layer.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((oc * c + ci) * kh + ki) * kw + kj]
                                    * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![o, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let input = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let layer =
            ConvLayer::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(conv2d_forward(&input, &layer).unwrap(), input);
    }

    #[test]
    fn ones_kernel_sums_ones() {
        let input = Tensor::full(&[1, 2, 2], 1.0);
        let layer =
            ConvLayer::new(Tensor::full(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let input = random_tensor(&mut rng, &[2, 5, 5]);
            let layer = random_layer(&mut rng, 3, 2, 3, stride, pad);
            let got = conv2d_forward(&input, &layer).unwrap();
            let want = naive_conv(&input, &layer);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!(
                    (a - b).abs() <= 1e-12,
                    "stride {stride} pad {pad}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn output_size_follows_floor_rule() {
        let layer =
            ConvLayer::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 2, 1).unwrap();
        assert_eq!(layer.output_size(7, 8).unwrap(), (4, 4));
        let tight =
            ConvLayer::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert!(tight.output_size(2, 5).is_err());
    }

    #[test]
    fn rejects_channel_mismatch_naming_axis() {
        let layer =
            ConvLayer::new(Tensor::zeros(&[1, 2, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let err = conv2d_forward(&Tensor::zeros(&[3, 4, 4]), &layer).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
        let err = conv2d_backward(
            &Tensor::zeros(&[2, 4, 4]),
            &layer,
            &Tensor::zeros(&[1, 3, 4]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, &[2, 4, 4]);
        let layer = random_layer(&mut rng, 3, 2, 3, 1, 1);
        let g = conv2d_backward(&input, &layer, &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.weight.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, &[1, 3, 3]);
        let layer =
            ConvLayer::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let up = random_tensor(&mut rng, &[1, 3, 3]);
        let g = conv2d_backward(&input, &layer, &up).unwrap();
        assert_eq!(g.input, up);
    }

    /// Central differences of `L = <conv(x), r>` against the analytic backward.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for (stride, pad) in [(1, 1), (2, 1)] {
            let input = random_tensor(&mut rng, &[2, 5, 4]);
            let layer = random_layer(&mut rng, 3, 2, 3, stride, pad);
            let out_shape = conv2d_forward(&input, &layer).unwrap().shape().to_vec();
            let r = random_tensor(&mut rng, &out_shape);
            let loss = |x: &Tensor, l: &ConvLayer| conv2d_forward(x, l).unwrap().dot(&r).unwrap();
            let g = conv2d_backward(&input, &layer, &r).unwrap();
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);

            for i in 0..input.len() {
                let (mut xp, mut xm) = (input.clone(), input.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let num = (loss(&xp, &layer) - loss(&xm, &layer)) / (2.0 * h);
                assert!(rel(g.input.data()[i], num) < 1e-4);
            }
            for i in 0..layer.weight.len() {
                let (mut lp, mut lm) = (layer.clone(), layer.clone());
                lp.weight.data_mut()[i] += h;
                lm.weight.data_mut()[i] -= h;
                let num = (loss(&input, &lp) - loss(&input, &lm)) / (2.0 * h);
                assert!(rel(g.weight.data()[i], num) < 1e-4);
            }
            for i in 0..layer.bias.len() {
                let (mut lp, mut lm) = (layer.clone(), layer.clone());
                lp.bias.data_mut()[i] += h;
                lm.bias.data_mut()[i] -= h;
                let num = (loss(&input, &lp) - loss(&input, &lm)) / (2.0 * h);
                assert!(rel(g.bias.data()[i], num) < 1e-4);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn linear_in_input(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, stride in 1usize..3, pad in 0usize..2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layer = random_layer(&mut rng, 2, 2, 3, stride, pad);
            layer.bias = Tensor::zeros(&[2]);
            let x = random_tensor(&mut rng, &[2, 5, 6]);
            let y = random_tensor(&mut rng, &[2, 5, 6]);
            let mut combo = x.clone();
            combo.scale(a);
            combo.add_scaled(b, &y).unwrap();
            let lhs = conv2d_forward(&combo, &layer).unwrap();
            let mut rhs = conv2d_forward(&x, &layer).unwrap();
            rhs.scale(a);
            rhs.add_scaled(b, &conv2d_forward(&y, &layer).unwrap()).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-10);
            }
        }

        #[test]
        fn backward_is_adjoint_of_forward(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layer = random_layer(&mut rng, 3, 2, 3, stride, pad);
            layer.bias = Tensor::zeros(&[3]);
            let x = random_tensor(&mut rng, &[2, 6, 5]);
            let fx = conv2d_forward(&x, &layer).unwrap();
            let g = random_tensor(&mut rng, fx.shape());
            let back = conv2d_backward(&x, &layer, &g).unwrap();
            let lhs = fx.dot(&g).unwrap();
            let rhs = x.dot(&back.input).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-8);
        }
    }
}
