//! Three-layer fully convolutional feature extractor (3×3 kernels, stride 2,
//! zero padding 1, rectified outputs) with hand-written backward passes.
//! A `1×64×64` image maps to a `32×8×8` feature map.

use crate::error::{shape_err, Result};
use crate::tensor::{Rng, Tensor};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

/// Channel plan, input first.
pub const CHANNELS: [usize; 4] = [1, 8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(C_out, C_in, 3, 3)`
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(kernels: Tensor, bias: Vec<f64>) -> Result<Self> {
        match *kernels.shape() {
            [co, _, KERNEL, KERNEL] if co == bias.len() => Ok(Self { kernels, bias }),
            _ => Err(shape_err(format!(
                "kernels must be (C_out, C_in, 3, 3) with C_out = {}, got {:?}",
                bias.len(),
                kernels.shape()
            ))),
        }
    }

    pub fn c_out(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernels.shape()[1]
    }
}

pub fn output_extent(n: usize) -> usize {
    (n + 2 * PADDING - KERNEL) / STRIDE + 1
}

/// For kernel tap `k` along an axis of input length `n`, the output indices
/// whose receptive position `STRIDE·o + k − PADDING` lies inside the input.
fn valid_outputs(k: usize, n: usize, n_out: usize) -> std::ops::Range<usize> {
    // STRIDE·o + k >= PADDING and STRIDE·o + k − PADDING <= n − 1
    let lo = if k >= PADDING { 0 } else { (PADDING - k).div_ceil(STRIDE) };
    if n + PADDING < k + 1 {
        return lo..lo;
    }
    let hi = ((n - 1 + PADDING - k) / STRIDE + 1).min(n_out);
    lo..hi.max(lo)
}

/// Stride-2, pad-1 cross-correlation.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (ci, h, w) = input.dims3()?;
    if ci != layer.c_in() {
        return Err(shape_err(format!(
            "layer expects {} input channels, got {ci}",
            layer.c_in()
        )));
    }
    let (ho, wo) = (output_extent(h), output_extent(w));
    let co = layer.c_out();
    let x = input.data();
    let k = layer.kernels.data();
    let mut out = vec![0.0; co * ho * wo];
    out.chunks_mut(ho * wo).enumerate().for_each(|(o, plane)| {
        plane.fill(layer.bias[o]);
        for c in 0..ci {
            let xin = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..KERNEL {
                let rows = valid_outputs(ky, h, ho);
                for kx in 0..KERNEL {
                    let kv = k[((o * ci + c) * KERNEL + ky) * KERNEL + kx];
                    let cols = valid_outputs(kx, w, wo);
                    for oy in rows.clone() {
                        let iy = STRIDE * oy + ky - PADDING;
                        let src = &xin[iy * w..(iy + 1) * w];
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        for ox in cols.clone() {
                            dst[ox] += kv * src[STRIDE * ox + kx - PADDING];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![co, ho, wo], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub d_input: Option<Tensor>,
    pub d_kernels: Tensor,
    pub d_bias: Vec<f64>,
}

/// Exact gradients of [`conv2d_forward`]. `need_input` controls whether the
/// input gradient is computed.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    upstream: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let (ci, h, w) = input.dims3()?;
    if ci != layer.c_in() {
        return Err(shape_err("input channels do not match layer"));
    }
    let (ho, wo) = (output_extent(h), output_extent(w));
    let co = layer.c_out();
    if upstream.shape() != [co, ho, wo] {
        return Err(shape_err(format!(
            "upstream shape {:?} does not match forward output {:?}",
            upstream.shape(),
            [co, ho, wo]
        )));
    }
    let x = input.data();
    let up = upstream.data();
    let k = layer.kernels.data();

    let d_bias: Vec<f64> = up.chunks_exact(ho * wo).map(|p| p.iter().sum()).collect();

    let mut d_kernels = vec![0.0; co * ci * KERNEL * KERNEL];
    d_kernels
        .chunks_mut(ci * KERNEL * KERNEL)
        .enumerate()
        .for_each(|(o, dk)| {
            let g = &up[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                let xin = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..KERNEL {
                    let rows = valid_outputs(ky, h, ho);
                    for kx in 0..KERNEL {
                        let cols = valid_outputs(kx, w, wo);
                        let mut acc = 0.0;
                        for oy in rows.clone() {
                            let iy = STRIDE * oy + ky - PADDING;
                            for ox in cols.clone() {
                                acc += g[oy * wo + ox] * xin[iy * w + STRIDE * ox + kx - PADDING];
                            }
                        }
                        dk[(c * KERNEL + ky) * KERNEL + kx] = acc;
                    }
                }
            }
        });

    let d_input = need_input.then(|| {
        let mut dx = vec![0.0; ci * h * w];
        dx.chunks_mut(h * w).enumerate().for_each(|(c, dxc)| {
            for o in 0..co {
                let g = &up[o * ho * wo..(o + 1) * ho * wo];
                for ky in 0..KERNEL {
                    let rows = valid_outputs(ky, h, ho);
                    for kx in 0..KERNEL {
                        let kv = k[((o * ci + c) * KERNEL + ky) * KERNEL + kx];
                        let cols = valid_outputs(kx, w, wo);
                        for oy in rows.clone() {
                            let iy = STRIDE * oy + ky - PADDING;
                            for ox in cols.clone() {
                                dxc[iy * w + STRIDE * ox + kx - PADDING] += kv * g[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(vec![ci, h, w], dx).expect("shape")
    });

    Ok(ConvGrads {
        d_input,
        d_kernels: Tensor::new(vec![co, ci, KERNEL, KERNEL], d_kernels)?,
        d_bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: [ConvLayer; 3],
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input of each layer (the image, then rectified outputs).
    inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub layers: Vec<(Tensor, Vec<f64>)>,
    pub d_image: Option<Tensor>,
}

/// He-style initialization: kernels ~ N(0, 2/(C_in·9)), zero biases.
pub fn backbone_init(seed: u64) -> Backbone {
    let mut rng = Rng::stream(seed, 0xBAC0);
    let layer = |rng: &mut Rng, ci: usize, co: usize| {
        let std = (2.0 / (ci * KERNEL * KERNEL) as f64).sqrt();
        let n = co * ci * KERNEL * KERNEL;
        let data = (0..n).map(|_| rng.normal(0.0, std)).collect();
        ConvLayer {
            kernels: Tensor::new(vec![co, ci, KERNEL, KERNEL], data).expect("shape"),
            bias: vec![0.0; co],
        }
    };
    Backbone {
        layers: [
            layer(&mut rng, CHANNELS[0], CHANNELS[1]),
            layer(&mut rng, CHANNELS[1], CHANNELS[2]),
            layer(&mut rng, CHANNELS[2], CHANNELS[3]),
        ],
    }
}

impl Backbone {
    pub fn feature_channels(&self) -> usize {
        self.layers[2].c_out()
    }

    /// Feature map of an image `(1, H, W)`.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let mut inputs = Vec::with_capacity(3);
        let mut pre = Vec::with_capacity(3);
        let mut cur = image.clone();
        for layer in &self.layers {
            let z = conv2d_forward(&cur, layer)?;
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(cur);
            pre.push(z);
            cur = a;
        }
        Ok((cur, BackboneCache { inputs, pre }))
    }

    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward(image)?.0)
    }

    pub fn backward(&self, cache: &BackboneCache, d_features: &Tensor, need_image: bool) -> Result<BackboneGrads> {
        let mut grads = vec![None; 3];
        let mut up = d_features.clone();
        let mut d_image = None;
        for i in (0..3).rev() {
            relu_backward(&cache.pre[i], &mut up)?;
            let g = conv2d_backward(&cache.inputs[i], &self.layers[i], &up, i > 0 || need_image)?;
            grads[i] = Some((g.d_kernels, g.d_bias));
            match g.d_input {
                Some(d) if i > 0 => up = d,
                d => d_image = d,
            }
        }
        Ok(BackboneGrads {
            layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
            d_image,
        })
    }
}

/// Zeroes `grad` wherever the pre-activation is not strictly positive.
pub fn relu_backward(pre: &Tensor, grad: &mut Tensor) -> Result<()> {
    if pre.shape() != grad.shape() {
        return Err(shape_err("rectifier gradient shape mismatch"));
    }
    for (g, &z) in grad.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};

    /// Direct sliding-window evaluation with explicit padding checks.
    fn naive_conv(input: &Tensor, layer: &ConvLayer) -> Tensor {
        let (ci, h, w) = input.dims3().unwrap();
        let (ho, wo) = (output_extent(h), output_extent(w));
        let co = layer.c_out();
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = layer.bias[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += layer.kernels.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                    * input.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn identity_layer() -> ConvLayer {
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        ConvLayer::new(k, vec![0.0]).unwrap()
    }

    #[test]
    fn identity_kernel_on_single_pixel() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &identity_layer()).unwrap().data(), &[5.0]);
    }

    #[test]
    fn ones_kernel_corner_sees_padding() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let layer = ConvLayer::new(Tensor::full(&[1, 1, 3, 3], 1.0), vec![0.0]).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data(), naive_conv(&x, &layer).data());
        // output (1,1) is centred on input (2,2): full 3×3 window
        assert_eq!(y.data()[3], 9.0);
    }

    #[test]
    fn zero_kernels_give_bias() {
        let x = Tensor::uniform(&[2, 7, 5], -1.0, 1.0, &mut Rng::new(0));
        let layer = ConvLayer::new(Tensor::zeros(&[3, 2, 3, 3]), vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        assert_eq!(y.shape(), &[3, 4, 3]);
        for (o, plane) in y.data().chunks(12).enumerate() {
            assert!(plane.iter().all(|&v| v == layer.bias[o]));
        }
    }

    #[test]
    fn matches_naive_on_random_shapes() {
        let mut rng = Rng::new(1);
        for (ci, co, h, w) in [(1, 2, 5, 5), (3, 4, 8, 6), (2, 1, 1, 3), (4, 3, 9, 2)] {
            let x = Tensor::uniform(&[ci, h, w], -1.0, 1.0, &mut rng);
            let layer = ConvLayer::new(
                Tensor::uniform(&[co, ci, 3, 3], -1.0, 1.0, &mut rng),
                (0..co).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let a = conv2d_forward(&x, &layer).unwrap();
            let b = naive_conv(&x, &layer);
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let layer = identity_layer();
        assert!(conv2d_forward(&Tensor::zeros(&[2, 4, 4]), &layer).is_err());
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(conv2d_backward(&x, &layer, &Tensor::zeros(&[1, 3, 3]), true).is_err());
    }

    #[test]
    fn bias_gradient_is_spatial_sum() {
        let mut rng = Rng::new(2);
        let x = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let layer = ConvLayer::new(Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng), vec![0.0; 3]).unwrap();
        let up = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&x, &layer, &up, false).unwrap();
        assert!(g.d_input.is_none());
        for (o, plane) in up.data().chunks(9).enumerate() {
            assert!((g.d_bias[o] - plane.iter().sum::<f64>()).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_kernel_backward_scatters_to_stride_positions() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let up = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = conv2d_backward(&x, &identity_layer(), &up, true).unwrap();
        let dx = g.d_input.unwrap();
        let mut expected = vec![0.0; 16];
        expected[0] = 1.0;
        expected[2] = 2.0;
        expected[8] = 3.0;
        expected[10] = 4.0;
        assert_eq!(dx.data(), &expected[..]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let x = Tensor::uniform(&[2, 5, 6], -1.0, 1.0, &mut rng);
        let layer = ConvLayer::new(
            Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng),
            vec![0.1, -0.2, 0.3],
        )
        .unwrap();
        let up = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor, l: &ConvLayer| -> f64 {
            conv2d_forward(x, l).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward(&x, &layer, &up, true).unwrap();
        let dx = g.d_input.unwrap();
        for i in 0..x.len() {
            let num = central_diff(
                |t| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] = t;
                    loss(&xp, &layer)
                },
                x.data()[i],
            );
            assert!(rel_err(dx.data()[i], num) < 1e-5);
        }
        for i in 0..layer.kernels.len() {
            let num = central_diff(
                |t| {
                    let mut l = layer.clone();
                    l.kernels.data_mut()[i] = t;
                    loss(&x, &l)
                },
                layer.kernels.data()[i],
            );
            assert!(rel_err(g.d_kernels.data()[i], num) < 1e-5);
        }
        for o in 0..3 {
            let num = central_diff(
                |t| {
                    let mut l = layer.clone();
                    l.bias[o] = t;
                    loss(&x, &l)
                },
                layer.bias[o],
            );
            assert!(rel_err(g.d_bias[o], num) < 1e-5);
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        assert_eq!(backbone_init(0), backbone_init(0));
        assert_ne!(backbone_init(0), backbone_init(1));
        let b = backbone_init(0);
        assert!(b.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_variance_matches_he_scale() {
        for (idx, &ci) in CHANNELS[..3].iter().enumerate() {
            let mut draws = Vec::new();
            let mut seed = 0;
            while draws.len() < 10_000 {
                draws.extend_from_slice(backbone_init(seed).layers[idx].kernels.data());
                seed += 1;
            }
            let n = draws.len() as f64;
            let mean = draws.iter().sum::<f64>() / n;
            let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let target = 2.0 / (ci as f64 * 9.0);
            assert!((var / target - 1.0).abs() < 0.2, "layer {idx}: {var} vs {target}");
        }
    }

    #[test]
    fn output_shape_contract() {
        let b = backbone_init(4);
        let img = Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut Rng::new(4));
        let f = b.features(&img).unwrap();
        assert_eq!(f.shape(), &[32, 8, 8]);
        assert!(f.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn relu_backward_zeroes_nonpositive() {
        let pre = Tensor::new(vec![1, 1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let mut g = Tensor::full(&[1, 1, 4], 3.0);
        relu_backward(&pre, &mut g).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn backbone_composite_gradient() {
        // loss = sum of rectified outputs on a small input
        let b = backbone_init(5);
        let img = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut Rng::new(5));
        let (f, cache) = b.forward(&img).unwrap();
        let g = b.backward(&cache, &Tensor::full(f.shape(), 1.0), true).unwrap();
        let loss = |b: &Backbone, img: &Tensor| b.features(img).unwrap().data().iter().sum::<f64>();
        let mut worst: f64 = 0.0;
        for (li, (dk, db)) in g.layers.iter().enumerate() {
            for i in (0..dk.len()).step_by(7) {
                let num = central_diff(
                    |t| {
                        let mut bp = b.clone();
                        bp.layers[li].kernels.data_mut()[i] = t;
                        loss(&bp, &img)
                    },
                    b.layers[li].kernels.data()[i],
                );
                worst = worst.max(rel_err(dk.data()[i], num));
            }
            for o in 0..db.len() {
                let num = central_diff(
                    |t| {
                        let mut bp = b.clone();
                        bp.layers[li].bias[o] = t;
                        loss(&bp, &img)
                    },
                    0.0,
                );
                worst = worst.max(rel_err(db[o], num));
            }
        }
        let di = g.d_image.unwrap();
        for i in 0..img.len() {
            let num = central_diff(
                |t| {
                    let mut ip = img.clone();
                    ip.data_mut()[i] = t;
                    loss(&b, &ip)
                },
                img.data()[i],
            );
            worst = worst.max(rel_err(di.data()[i], num));
        }
        assert!(worst < 1e-5, "{worst}");
    }
}
