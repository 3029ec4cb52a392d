//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the learning and energy code is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Tag written into parameter sidecars.
    const DTYPE: &'static str;
    /// Bytes per value in the little-endian blob.
    const WIDTH: usize;

    fn extend_le(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;

    /// Converts an `f64` constant, rounding if needed.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Converts an integer count. Exact for counts below 2^53 in `f64`.
    fn count(n: u64) -> Self {
        Self::from_u64(n).expect("count fits")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:literal) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;
            const WIDTH: usize = std::mem::size_of::<$t>();

            fn extend_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le_slice(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("slice of scalar width"))
            }
        }
    };
}

impl_scalar!(f32, "f32");
impl_scalar!(f64, "f64");
