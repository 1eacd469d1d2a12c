use alloc::vec::Vec;

use super::{numel, Tensor};
use crate::error::{dim_err, Result};
use crate::real::Real;

/// How an operand is expanded to the output shape of a binary op.
///
/// Only three expansions exist: a one-element operand against anything, an
/// operand whose shape is a trailing suffix of the other (bias rows), and a
/// keep-dim operand whose last axis is 1 (per-row statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expand {
    Same,
    Scalar,
    /// Repeats a block of this many elements.
    Suffix(usize),
    /// Repeats each element this many times along the last axis.
    KeepLast(usize),
}

impl Expand {
    #[inline]
    pub(crate) fn index(self, i: usize) -> usize {
        match self {
            Expand::Same => i,
            Expand::Scalar => 0,
            Expand::Suffix(len) => i % len,
            Expand::KeepLast(last) => i / last,
        }
    }
}

fn expansion(small: &[usize], big: &[usize]) -> Option<Expand> {
    if small == big {
        return Some(Expand::Same);
    }
    if numel(small) == 1 {
        return Some(Expand::Scalar);
    }
    if small.len() < big.len() && big.ends_with(small) {
        return Some(Expand::Suffix(numel(small)));
    }
    if small.len() == big.len()
        && small.last() == Some(&1)
        && small[..small.len() - 1] == big[..big.len() - 1]
    {
        return Some(Expand::KeepLast(*big.last().unwrap()));
    }
    None
}

/// Output shape of a broadcasting binary op and the expansion of each side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Expand, Expand)> {
    if a == b {
        return Ok((a.to_vec(), Expand::Same, Expand::Same));
    }
    let a_big = numel(a) > numel(b) || (numel(a) == numel(b) && a.len() >= b.len());
    let (big, small) = if a_big { (a, b) } else { (b, a) };
    let e = expansion(small, big)
        .ok_or_else(|| dim_err!("shapes {:?} and {:?} do not broadcast", a, b))?;
    if a_big {
        Ok((big.to_vec(), Expand::Same, e))
    } else {
        Ok((big.to_vec(), e, Expand::Same))
    }
}

impl<T: Real> Tensor<T> {
    /// Expands to `shape` under the broadcasting rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let e = expansion(&self.shape, shape)
            .ok_or_else(|| dim_err!("cannot broadcast {:?} to {:?}", self.shape, shape))?;
        let n = numel(shape);
        let data = (0..n).map(|i| self.data[e.index(i)]).collect();
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    /// Adjoint of [`Tensor::broadcast_to`]: sums back down to `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        let e = expansion(shape, &self.shape)
            .ok_or_else(|| dim_err!("cannot reduce {:?} to {:?}", self.shape, shape))?;
        let mut data = alloc::vec![T::zero(); numel(shape)];
        for (i, &v) in self.data.iter().enumerate() {
            data[e.index(i)] += v;
        }
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepted_patterns() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap().0, alloc::vec![2, 3]);
        assert_eq!(broadcast_shape(&[], &[2, 3]).unwrap().0, alloc::vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1], &[2, 3]).unwrap().0, alloc::vec![2, 3]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
        assert!(broadcast_shape(&[1, 3], &[2, 3]).is_err());
    }

    #[test]
    fn bias_and_row_stat_broadcasting() {
        let m = Tensor::<f64>::new([2, 3], alloc::vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let bias = Tensor::new([3], alloc::vec![10., 20., 30.]).unwrap();
        assert_eq!(m.add(&bias).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let rows = Tensor::new([2, 1], alloc::vec![1., 2.]).unwrap();
        assert_eq!(m.div(&rows).unwrap().data(), &[1., 2., 3., 2., 2.5, 3.]);
        assert_eq!(m.sum_to(&[2, 1]).unwrap().data(), &[6., 15.]);
        assert_eq!(m.sum_to(&[3]).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(m.sum_to(&[]).unwrap().data(), &[21.]);
    }
}
