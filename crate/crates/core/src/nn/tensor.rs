use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::image::Image;

/// Scalar type the network kernels are generic over. Production models run
/// in `f32`; gradient checks instantiate the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `C = alpha * op(A) * op(B) + beta * C` on raw row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n`, `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `C = op(A)·op(B) + beta·C`.
///
/// `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k`
/// when `tb`), `c` as `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made by the kernel.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense `N × C × H × W` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![F::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    /// Rank-2 tensor stored as `n × c × 1 × 1`.
    pub fn matrix(n: usize, c: usize, data: Vec<F>) -> Self {
        Self::from_vec(n, c, 1, 1, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[F] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Packs HWC images into one NCHW batch.
    pub fn from_images(images: &[&Image]) -> Self {
        assert!(!images.is_empty());
        let (h, w, c) = images[0].shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            assert_eq!(img.shape(), (h, w, c), "batch images must share a shape");
            let s = img.as_slice();
            for ch in 0..c {
                for p in 0..h * w {
                    data.push(F::from_f32(s[p * c + ch]).unwrap());
                }
            }
        }
        Self::from_vec(images.len(), c, h, w, data)
    }

    /// Unpacks batch item `i` back into an HWC image (no clamping).
    pub fn to_image(&self, i: usize) -> Image {
        let item = self.item(i);
        let hw = self.h * self.w;
        let mut out = vec![0.0f32; hw * self.c];
        for ch in 0..self.c {
            for p in 0..hw {
                out[p * self.c + ch] = item[ch * hw + p].to_f32().unwrap();
            }
        }
        Image::from_vec(self.h, self.w, self.c, out).expect("consistent shape")
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor<F>, b: &Tensor<F>) -> Self {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n {
            data.extend_from_slice(a.item(i));
            data.extend_from_slice(b.item(i));
        }
        Self::from_vec(a.n, a.c + b.c, a.h, a.w, data)
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.c);
        let hw = self.h * self.w;
        let mut a = Vec::with_capacity(self.n * first * hw);
        let mut b = Vec::with_capacity(self.n * (self.c - first) * hw);
        for i in 0..self.n {
            let item = self.item(i);
            a.extend_from_slice(&item[..first * hw]);
            b.extend_from_slice(&item[first * hw..]);
        }
        (
            Self::from_vec(self.n, first, self.h, self.w, a),
            Self::from_vec(self.n, self.c - first, self.h, self.w, b),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
