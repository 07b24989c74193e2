// im2col lowering for 2-D convolution. All loops run in a fixed order, so
// results are bit-reproducible for identical inputs.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn columns(&self) -> usize {
        self.n * self.positions()
    }
}

/// `c = alpha * a·b + beta * c` for row-major operands given by explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let a_max = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
        let b_max = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
        assert!((a_max as usize) < a.len() && (b_max as usize) < b.len());
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lowers `[N,C,H,W]` input into a `[C·k·k, N·OH·OW]` patch matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.columns();
    let positions = g.positions();
    let mut out = vec![0.0; g.patch() * cols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &input[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + ki) as isize - g.padding as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[y as usize * g.w..][..g.w];
                        let base = n * positions + oy * g.ow;
                        for ox in 0..g.ow {
                            let x = (ox * g.stride + kj) as isize - g.padding as isize;
                            if x >= 0 && x < g.w as isize {
                                dst[base + ox] = src_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds a patch matrix back into an `[N,C,H,W]` buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let ncols = g.columns();
    let positions = g.positions();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut out[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + ki) as isize - g.padding as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        let base = n * positions + oy * g.ow;
                        for ox in 0..g.ow {
                            let x = (ox * g.stride + kj) as isize - g.padding as isize;
                            if x >= 0 && x < g.w as isize {
                                plane[y as usize * g.w + x as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the `[N,O,OH,OW]` output and the patch matrix.
pub(crate) fn conv_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let ncols = g.columns();
    let patch = g.patch();
    let mut lowered = vec![0.0; g.o * ncols];
    gemm(
        g.o,
        patch,
        ncols,
        kernel,
        (patch as isize, 1),
        &cols,
        (ncols as isize, 1),
        &mut lowered,
        0.0,
    );
    let positions = g.positions();
    let mut out = vec![0.0; g.n * g.o * positions];
    for o in 0..g.o {
        for n in 0..g.n {
            out[(n * g.o + o) * positions..][..positions]
                .copy_from_slice(&lowered[o * ncols + n * positions..][..positions]);
        }
    }
    (out, cols)
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv_backward(
    grad_out: &[f64],
    kernel: &[f64],
    cols: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ncols = g.columns();
    let patch = g.patch();
    let positions = g.positions();
    let mut grad_m = vec![0.0; g.o * ncols];
    for o in 0..g.o {
        for n in 0..g.n {
            grad_m[o * ncols + n * positions..][..positions]
                .copy_from_slice(&grad_out[(n * g.o + o) * positions..][..positions]);
        }
    }
    let grad_kernel = want_kernel.then(|| {
        let mut dk = vec![0.0; g.o * patch];
        gemm(
            g.o,
            ncols,
            patch,
            &grad_m,
            (ncols as isize, 1),
            cols,
            (1, ncols as isize),
            &mut dk,
            0.0,
        );
        dk
    });
    let grad_input = want_input.then(|| {
        let mut dcols = vec![0.0; patch * ncols];
        gemm(
            patch,
            g.o,
            ncols,
            kernel,
            (1, patch as isize),
            &grad_m,
            (ncols as isize, 1),
            &mut dcols,
            0.0,
        );
        let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (grad_input, grad_kernel)
}
