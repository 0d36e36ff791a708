//! Plain 3x3 convolutional network evaluated with im2col and GEMM.
//!
//! Tensors are channel-major: channel `c` of sample `s` occupies
//! `data[c * batch * hw + s * hw .. + hw]`, so one GEMM covers the batch.

use num_traits::Float;

/// Leaky ReLU slope between layers.
pub const LEAKY_SLOPE: f64 = 0.1;
pub const INPUT_CHANNELS: usize = 6;
pub const OUTPUT_CHANNELS: usize = 3;

/// Scalar type the network can run in.
pub trait Real: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    /// `c = alpha * a * b + beta * c` with explicit row / column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from(v).unwrap()
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: every operand was bounds-checked against its strides above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// One 3x3 convolution: `weights[o][i * 9 + ky * 3 + kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            weights: vec![T::zero(); in_channels * 9 * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Shape of a batch of images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    pub fn pixels(&self) -> usize {
        self.batch * self.hw()
    }
}

/// Unfolds 3x3 zero-padded neighbourhoods: row `c * 9 + ky * 3 + kx`, one column per pixel.
pub(crate) fn im2col<T: Real>(input: &[T], channels: usize, shape: Shape, cols: &mut Vec<T>) {
    let (h, w, n) = (shape.height, shape.width, shape.pixels());
    cols.clear();
    cols.resize(channels * 9 * n, T::zero());
    for c in 0..channels {
        let plane = &input[c * n..(c + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * n..][..n];
                for s in 0..shape.batch {
                    let src = &plane[s * h * w..(s + 1) * h * w];
                    let dst = &mut row[s * h * w..(s + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        match kx {
                            0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                            1 => dst_row.copy_from_slice(src_row),
                            _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Real>(cols: &[T], channels: usize, shape: Shape, out: &mut [T]) {
    let (h, w, n) = (shape.height, shape.width, shape.pixels());
    out.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..channels {
        let plane = &mut out[c * n..(c + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * n..][..n];
                for s in 0..shape.batch {
                    let src = &row[s * h * w..(s + 1) * h * w];
                    let dst = &mut plane[s * h * w..(s + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        let src_row = &src[y * w..(y + 1) * w];
                        let (d, s) = match kx {
                            0 => (&mut dst_row[..w - 1], &src_row[1..]),
                            1 => (&mut dst_row[..], &src_row[..]),
                            _ => (&mut dst_row[1..], &src_row[..w - 1]),
                        };
                        for (a, b) in d.iter_mut().zip(s) {
                            *a = *a + *b;
                        }
                    }
                }
            }
        }
    }
}

/// Intermediate values kept for the backward pass.
pub(crate) struct Trace<T> {
    shape: Shape,
    cols: Vec<Vec<T>>,
    pre_activation: Vec<Vec<T>>,
}

/// Runs the convolution stack. Returns the output (before any skip) and,
/// when `keep` is set, the trace needed by [`backward`].
pub(crate) fn forward<T: Real>(layers: &[ConvLayer<T>], input: &[T], shape: Shape, keep: bool) -> (Vec<T>, Option<Trace<T>>) {
    let n = shape.pixels();
    let slope = T::of(LEAKY_SLOPE);
    let mut x = input.to_vec();
    let mut cols = Vec::new();
    let mut trace = keep.then(|| Trace {
        shape,
        cols: Vec::with_capacity(layers.len()),
        pre_activation: Vec::with_capacity(layers.len()),
    });
    for (li, layer) in layers.iter().enumerate() {
        im2col(&x, layer.in_channels, shape, &mut cols);
        let k = layer.in_channels * 9;
        let mut z = vec![T::zero(); layer.out_channels * n];
        for (o, b) in layer.bias.iter().enumerate() {
            z[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        T::gemm(
            layer.out_channels,
            k,
            n,
            T::one(),
            &layer.weights,
            k as isize,
            1,
            &cols,
            n as isize,
            1,
            T::one(),
            &mut z,
            n as isize,
            1,
        );
        let last = li + 1 == layers.len();
        x = if last {
            z.clone()
        } else {
            z.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect()
        };
        if let Some(t) = trace.as_mut() {
            t.cols.push(std::mem::take(&mut cols));
            t.pre_activation.push(z);
        }
    }
    (x, trace)
}

/// Gradients of every layer given the gradient of the network output.
pub(crate) fn backward<T: Real>(layers: &[ConvLayer<T>], trace: &Trace<T>, d_output: &[T]) -> Vec<ConvLayer<T>> {
    let shape = trace.shape;
    let n = shape.pixels();
    let slope = T::of(LEAKY_SLOPE);
    let mut grads: Vec<ConvLayer<T>> = layers.iter().map(|l| ConvLayer::zeros(l.in_channels, l.out_channels)).collect();
    let mut d_act = d_output.to_vec();
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let k = layer.in_channels * 9;
        let mut dz = d_act;
        if li + 1 != layers.len() {
            for (d, z) in dz.iter_mut().zip(&trace.pre_activation[li]) {
                if *z <= T::zero() {
                    *d = *d * slope;
                }
            }
        }
        let g = &mut grads[li];
        for o in 0..layer.out_channels {
            g.bias[o] = dz[o * n..(o + 1) * n].iter().fold(T::zero(), |a, &b| a + b);
        }
        let cols = &trace.cols[li];
        // dW = dZ * cols^T
        T::gemm(
            layer.out_channels,
            n,
            k,
            T::one(),
            &dz,
            n as isize,
            1,
            cols,
            1,
            n as isize,
            T::zero(),
            &mut g.weights,
            k as isize,
            1,
        );
        if li == 0 {
            break;
        }
        // dcols = W^T * dZ
        let mut dcols = vec![T::zero(); k * n];
        T::gemm(
            k,
            layer.out_channels,
            n,
            T::one(),
            &layer.weights,
            1,
            k as isize,
            &dz,
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        let mut dx = vec![T::zero(); layer.in_channels * n];
        col2im(&dcols, layer.in_channels, shape, &mut dx);
        d_act = dx;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let shape = Shape { batch: 2, height: 5, width: 4 };
        let ch = 3;
        let x: Vec<f64> = (0..ch * shape.pixels()).map(|i| ((i * 7 % 13) as f64).sin()).collect();
        let mut cols = Vec::new();
        im2col(&x, ch, shape, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 5 % 11) as f64).cos()).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, ch, shape, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
