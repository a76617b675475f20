//! Row-major dense matrices backed by `matrixmultiply`.

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Operand view: `trans` reads the matrix as its transpose.
#[derive(Clone, Copy)]
pub struct Op<'a> {
    m: &'a Mat,
    trans: bool,
}

pub fn n(m: &Mat) -> Op<'_> {
    Op { m, trans: false }
}

pub fn t(m: &Mat) -> Op<'_> {
    Op { m, trans: true }
}

impl Op<'_> {
    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.m.cols, self.m.rows)
        } else {
            (self.m.rows, self.m.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let rs = self.m.cols as isize;
        if self.trans {
            (1, rs)
        } else {
            (rs, 1)
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: Op<'_>, b: Op<'_>, beta: f64, c: &mut Mat) {
    let (m, k) = a.shape();
    let (k2, nn) = b.shape();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, nn), "gemm output shape mismatch");
    if m == 0 || nn == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes and strides were checked against the backing buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            nn,
            alpha,
            a.m.data.as_ptr(),
            rsa,
            csa,
            b.m.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}
