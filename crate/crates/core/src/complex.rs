//! Complex arithmetic on stacked real/imaginary representations.
//!
//! A stacked complex tensor keeps `C` complex channels in its last axis as
//! `C` real parts followed by `C` imaginary parts, so ordinary real-valued
//! convolutions can consume it. Matrix batches used inside the attention unit
//! keep real and imaginary parts as two separate tape variables instead.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A real tensor whose last axis stacks real parts before imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedComplex<T> {
    tensor: Tensor<T>,
}

impl<T: Real> StackedComplex<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        match tensor.shape().last() {
            Some(&last) if last % 2 == 0 => Ok(Self { tensor }),
            _ => Err(Error::invalid_shape(
                "stacked complex",
                format!("last extent of {:?} must be even", tensor.shape()),
            )),
        }
    }

    /// Stacks separate real and imaginary tensors of identical shape.
    pub fn from_parts(re: &Tensor<T>, im: &Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape("stacked complex", re.shape(), im.shape()));
        }
        let axis = re.rank() - 1;
        Self::new(Tensor::concat(&[re, im], axis)?)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(Tensor::zeros(shape))
    }

    /// Number of complex channels.
    pub fn channels(&self) -> usize {
        self.tensor.shape().last().copied().unwrap_or(0) / 2
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn re(&self) -> Tensor<T> {
        let axis = self.tensor.rank() - 1;
        self.tensor
            .slice_axis(axis, 0, self.channels())
            .expect("even last axis")
    }

    pub fn im(&self) -> Tensor<T> {
        let axis = self.tensor.rank() - 1;
        let c = self.channels();
        self.tensor.slice_axis(axis, c, c).expect("even last axis")
    }

    /// Complex entry at a flat position over all but the last axis and a
    /// channel index.
    pub fn get(&self, row: usize, channel: usize) -> (T, T) {
        let width = 2 * self.channels();
        let base = row * width;
        let d = self.tensor.data();
        (d[base + channel], d[base + self.channels() + channel])
    }

    /// Element-wise magnitudes, with the last axis halved.
    pub fn magnitude(&self) -> Tensor<T> {
        let c = self.channels();
        let data = self
            .tensor
            .data()
            .chunks_exact(2 * c)
            .flat_map(|row| (0..c).map(move |j| row[j].hypot(row[c + j])))
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = c;
        Tensor::from_parts(shape, data)
    }
}

/// A batch of complex matrices, `B×A×K` for both parts, on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexBatch {
    pub re: Var,
    pub im: Var,
}

impl ComplexBatch {
    pub fn new<T: Real>(tape: &Tape<T>, re: Var, im: Var) -> Result<Self> {
        if tape.shape(re) != tape.shape(im) {
            return Err(Error::shape("complex batch", tape.shape(re), tape.shape(im)));
        }
        Ok(Self { re, im })
    }

    pub fn shape<'a, T: Real>(&self, tape: &'a Tape<T>) -> &'a [usize] {
        tape.shape(self.re)
    }

    /// Splits a stacked variable (last axis `2C`) into parts.
    pub fn unstack<T: Real>(tape: &mut Tape<T>, stacked: Var) -> Result<Self> {
        let shape = tape.shape(stacked).to_vec();
        let axis = shape.len() - 1;
        if shape[axis] % 2 != 0 {
            return Err(Error::invalid_shape(
                "unstack",
                format!("last extent of {shape:?} must be even"),
            ));
        }
        let c = shape[axis] / 2;
        let re = tape.slice(stacked, axis, 0, c)?;
        let im = tape.slice(stacked, axis, c, c)?;
        Ok(Self { re, im })
    }

    /// Concatenates parts along the last axis.
    pub fn stack<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let axis = tape.shape(self.re).len() - 1;
        tape.concat(&[self.re, self.im], axis)
    }
}

/// How the left operand enters a complex matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LeftOperand {
    pub transpose: bool,
    pub conjugate: bool,
}

impl LeftOperand {
    pub const PLAIN: Self = Self {
        transpose: false,
        conjugate: false,
    };
    pub const TRANSPOSE: Self = Self {
        transpose: true,
        conjugate: false,
    };
}

/// Element-wise complex product of two stacked variables.
pub fn cmul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("cmul", tape.shape(a), tape.shape(b)));
    }
    let a = ComplexBatch::unstack(tape, a)?;
    let b = ComplexBatch::unstack(tape, b)?;
    let rr = tape.mul(a.re, b.re)?;
    let ii = tape.mul(a.im, b.im)?;
    let ri = tape.mul(a.re, b.im)?;
    let ir = tape.mul(a.im, b.re)?;
    let re = tape.sub(rr, ii)?;
    let im = tape.add(ri, ir)?;
    ComplexBatch { re, im }.stack(tape)
}

/// Batched complex matrix product `op(a)·b`.
pub fn cmatmul<T: Real>(tape: &mut Tape<T>, a: ComplexBatch, b: ComplexBatch, left: LeftOperand) -> Result<ComplexBatch> {
    let t = left.transpose;
    let rr = tape.matmul_ex(a.re, b.re, t, false)?;
    let ii = tape.matmul_ex(a.im, b.im, t, false)?;
    let ri = tape.matmul_ex(a.re, b.im, t, false)?;
    let ir = tape.matmul_ex(a.im, b.re, t, false)?;
    // conj(a)·b = (ar − i·ai)(br + i·bi)
    let (re, im) = if left.conjugate {
        (tape.add(rr, ii)?, tape.sub(ri, ir)?)
    } else {
        (tape.sub(rr, ii)?, tape.add(ri, ir)?)
    };
    Ok(ComplexBatch { re, im })
}

/// Magnitudes of a stacked variable.
pub fn cmag<T: Real>(tape: &mut Tape<T>, stacked: Var) -> Result<Var> {
    tape.cmag(stacked)
}

/// Magnitudes of a matrix batch.
pub fn cmag_batch<T: Real>(tape: &mut Tape<T>, x: ComplexBatch) -> Result<Var> {
    let stacked = x.stack(tape)?;
    tape.cmag(stacked)
}

/// Complement mask: `1 − Mr` for the real block and `−Mi` for the imaginary
/// block, so that speech and noise masks sum to `1 + 0i`.
pub fn noise_mask<T: Real>(tape: &mut Tape<T>, mask: Var) -> Result<Var> {
    let m = ComplexBatch::unstack(tape, mask)?;
    let neg_re = tape.neg(m.re);
    let re = tape.add_const(neg_re, T::one());
    let im = tape.neg(m.im);
    ComplexBatch { re, im }.stack(tape)
}

/// Column-normalised magnitude softmax that keeps each entry's phase.
///
/// For `p` of shape `B×C×C`, every column `c'` of the result satisfies
/// `Σ_c |w[c,c']| = 1` with `|w[c,c']| ∝ exp|p[c,c']|` and
/// `∠w[c,c'] = ∠p[c,c']`.
pub fn mag_softmax_phase_keep<T: Real>(tape: &mut Tape<T>, p: ComplexBatch) -> Result<ComplexBatch> {
    let shape = tape.shape(p.re).to_vec();
    let both = tape.mag_softmax(p.re, p.im)?;
    let re = tape.slice(both, 0, 0, 1)?;
    let im = tape.slice(both, 0, 1, 1)?;
    Ok(ComplexBatch {
        re: tape.reshape(re, &shape)?,
        im: tape.reshape(im, &shape)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stacked(tape: &mut Tape<f64>, re: &[f64], im: &[f64]) -> Var {
        let n = re.len();
        let mut data = re.to_vec();
        data.extend_from_slice(im);
        tape.constant(Tensor::new(&[1, 2 * n], data).unwrap())
    }

    #[test]
    fn cmul_hand_example() {
        let mut t = Tape::<f64>::new();
        let a = stacked(&mut t, &[1.0], &[2.0]);
        let b = stacked(&mut t, &[3.0], &[4.0]);
        let c = cmul(&mut t, a, b).unwrap();
        assert_eq!(t.value(c).data(), &[-5.0, 10.0]);
    }

    #[test]
    fn cmul_identity() {
        let mut t = Tape::<f64>::new();
        let a = stacked(&mut t, &[0.3, -1.5], &[2.0, 0.25]);
        let one = stacked(&mut t, &[1.0, 1.0], &[0.0, 0.0]);
        let c = cmul(&mut t, a, one).unwrap();
        assert_eq!(t.value(c), t.value(a));
    }

    #[test]
    fn cmul_rejects_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = stacked(&mut t, &[1.0], &[2.0]);
        let b = stacked(&mut t, &[1.0, 2.0], &[2.0, 3.0]);
        assert!(cmul(&mut t, a, b).is_err());
    }

    #[test]
    fn magnitude_of_three_four() {
        let mut t = Tape::<f64>::new();
        let a = t.variable(Tensor::new(&[1, 4], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
        let m = cmag(&mut t, a).unwrap();
        assert_eq!(t.value(m).data(), &[5.0, 0.0]);
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        // Zero entry has zero gradient.
        assert_eq!(g.wrt(a).unwrap().data(), &[0.6, 0.0, 0.8, 0.0]);
    }

    #[test]
    fn noise_mask_examples() {
        let mut t = Tape::<f64>::new();
        let m = stacked(&mut t, &[1.0, 0.0, 0.25], &[0.0, 0.0, -0.5]);
        let n = noise_mask(&mut t, m).unwrap();
        assert_eq!(t.value(n).data(), &[0.0, 1.0, 0.75, -0.0, -0.0, 0.5]);
    }

    #[test]
    fn uniform_softmax_for_zero_similarity() {
        let mut t = Tape::<f64>::new();
        let re = t.constant(Tensor::zeros(&[2, 4, 4]));
        let im = t.constant(Tensor::zeros(&[2, 4, 4]));
        let w = mag_softmax_phase_keep(&mut t, ComplexBatch { re, im }).unwrap();
        assert!(t.value(w.re).data().iter().all(|&v| v == 0.25));
        assert!(t.value(w.im).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conjugate_product() {
        // conj(1+2i)·(3+4i) = 11 − 2i
        let mut t = Tape::<f64>::new();
        let a = ComplexBatch {
            re: t.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap()),
            im: t.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap()),
        };
        let b = ComplexBatch {
            re: t.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap()),
            im: t.constant(Tensor::new(&[1, 1], vec![4.0]).unwrap()),
        };
        let c = cmatmul(
            &mut t,
            a,
            b,
            LeftOperand {
                transpose: false,
                conjugate: true,
            },
        )
        .unwrap();
        assert_eq!(t.value(c.re).item(), 11.0);
        assert_eq!(t.value(c.im).item(), -2.0);
    }
}
