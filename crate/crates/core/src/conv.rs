//! Stride-1 2-D cross-correlation over `H×W×C` inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-padding policy for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    /// Padding added before the first row/column for a kernel extent.
    fn leading(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// Output extents `[H_out, W_out, C_out]` for an `H×W×C` input.
pub fn conv_output_shape(
    input: &[usize],
    kernel: &[usize],
    padding: Padding,
) -> Result<[usize; 3]> {
    let (&[h, w, c], &[kh, kw, kc, co]) = (input, kernel) else {
        return Err(Error::dim("conv2d", input, kernel));
    };
    if kc != c || kh == 0 || kw == 0 {
        return Err(Error::dim("conv2d", input, kernel));
    }
    match padding {
        Padding::Same => Ok([h, w, co]),
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::dim("conv2d", input, kernel));
            }
            Ok([h - kh + 1, w - kw + 1, co])
        }
    }
}

/// Cross-correlation (no kernel flip) on a flat `H×W×C` buffer.
pub(crate) fn conv2d_flat(
    input: &[f64],
    in_shape: &[usize],
    kernel: &Tensor,
    padding: Padding,
) -> Result<Vec<f64>> {
    let [oh, ow, co] = conv_output_shape(in_shape, kernel.shape(), padding)?;
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    if input.len() != h * w * c {
        return Err(Error::dim("conv2d", in_shape, &[input.len()]));
    }
    let ks = kernel.shape();
    let (kh, kw) = (ks[0], ks[1]);
    let (top, left) = (padding.leading(kh), padding.leading(kw));
    let k = kernel.data();
    let mut out = vec![0.0; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for dy in 0..kh {
                let Some(iy) = (oy + dy).checked_sub(top).filter(|&y| y < h) else {
                    continue;
                };
                for dx in 0..kw {
                    let Some(ix) = (ox + dx).checked_sub(left).filter(|&x| x < w) else {
                        continue;
                    };
                    for ci in 0..c {
                        let v = input[(iy * w + ix) * c + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let taps = &k[((dy * kw + dx) * c + ci) * co..][..co];
                        for (a, &t) in acc.iter_mut().zip(taps) {
                            *a += v * t;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2-D convolution of an `H×W×C` input with an `H'×W'×C×C_out` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    let out_shape = conv_output_shape(input.shape(), kernel.shape(), padding)?;
    let data = conv2d_flat(input.data(), input.shape(), kernel, padding)?;
    Tensor::new(out_shape.to_vec(), data)
}
