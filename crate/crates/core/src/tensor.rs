//! Dense channel-major tensors `[C, H, D, W]` shared by the flow math and the
//! velocity network. A stack of T volumes is a tensor with T channels.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::series::Volume;

/// Floating point element usable by the network kernels.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `C <- alpha * A B + beta * C` with explicit row/column strides.
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

    fn lit(x: f64) -> Self;

    fn f64(self) -> f64;
}

/// Number of elements a strided `rows x cols` view reaches.
fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
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
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
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

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    channels: usize,
    dims: [usize; 3],
    data: Vec<F>,
}

/// A stack of volumes, one per channel.
pub type Stack<F = f32> = Tensor<F>;

impl<F: Scalar> Tensor<F> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![F::zero(); channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<F>) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "tensor {channels}x{dims:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { channels, dims, data })
    }

    /// Stacks volumes as channels. All volumes must share one shape.
    pub fn from_volumes<'a, I>(vols: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Volume>,
    {
        let mut it = vols.into_iter().peekable();
        let dims = match it.peek() {
            Some(v) => v.shape(),
            None => return Err(Error::Empty("cannot stack zero volumes".into())),
        };
        let mut data = Vec::new();
        let mut channels = 0;
        for v in it {
            if v.shape() != dims {
                return Err(Error::Shape(format!("volume {:?} in stack of {dims:?}", v.shape())));
            }
            data.extend(v.voxels().iter().map(|&x| F::lit(x as f64)));
            channels += 1;
        }
        Ok(Tensor { channels, dims, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Alias of [`channels`](Self::channels) for frame stacks.
    pub fn frames(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn channel(&self, c: usize) -> &[F] {
        let s = self.spatial();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let s = self.spatial();
        &mut self.data[c * s..(c + 1) * s]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{:?} vs {}x{:?}",
                self.channels, self.dims, other.channels, other.dims
            )))
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: F) -> Self {
        self.map(|x| x * k)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|x| G::lit(x.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channel `c` as a volume.
    pub fn volume(&self, c: usize) -> Result<Volume> {
        Volume::new(self.dims, self.channel(c).iter().map(|x| x.f64() as f32).collect())
    }

    pub fn to_volumes(&self) -> Result<Vec<Volume>> {
        (0..self.channels).map(|c| self.volume(c)).collect()
    }

    /// Concatenates along the channel axis.
    pub fn concat(a: &Self, b: &Self) -> Result<Self> {
        if a.dims != b.dims {
            return Err(Error::Shape(format!("concat {:?} with {:?}", a.dims, b.dims)));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        })
    }

    /// Splits off the first `c` channels.
    pub fn split_channels(&self, c: usize) -> (Self, Self) {
        let cut = c * self.spatial();
        (
            Tensor {
                channels: c,
                dims: self.dims,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                channels: self.channels - c,
                dims: self.dims,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}
