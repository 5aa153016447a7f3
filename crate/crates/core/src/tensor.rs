//! Dense NCHW tensors and the scalar trait the autodiff engine is generic over.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::Array2;
use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float + FromPrimitive + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                assert!(span(m, k, a.1, a.2) <= a.0.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, b.1, b.2) <= b.0.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, c.1, c.2) <= c.0.len(), "gemm: output out of bounds");
                // SAFETY: all strides are nonnegative and every addressed element
                // lies inside the slices checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: F) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data length");
        Tensor { shape, data }
    }

    /// Single image as a `(1, 1, h, w)` tensor.
    pub fn from_image(img: &Array2<f32>) -> Self {
        let (h, w) = img.dim();
        Tensor::from_vec([1, 1, h, w], img.iter().map(|v| F::from_f32(*v).unwrap()).collect())
    }

    /// Stacks images along the batch axis, one channel each.
    pub fn from_images<'a>(imgs: impl IntoIterator<Item = &'a Array2<f32>>) -> Self {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in imgs {
            let d = img.dim();
            assert!(dims.is_none_or(|prev| prev == d), "images must share a shape");
            dims = Some(d);
            data.extend(img.iter().map(|v| F::from_f32(*v).unwrap()));
            n += 1;
        }
        let (h, w) = dims.expect("at least one image");
        Tensor::from_vec([n, 1, h, w], data)
    }

    /// Plane `(n, c)` as an image.
    pub fn plane(&self, n: usize, c: usize) -> Array2<f32> {
        let [_, _, h, w] = self.shape;
        let start = (n * self.shape[1] + c) * h * w;
        let v: Vec<f32> = self.data[start..start + h * w]
            .iter()
            .map(|x| x.to_f32().unwrap())
            .collect();
        Array2::from_shape_vec((h, w), v).expect("plane shape")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| G::from(*v).unwrap()).collect(),
        }
    }
}
