//! Named views over trainable tensors.

use ndarray::{ArrayBase, DataMut, Data, Dimension};

use crate::numerics::ConvParams;

/// How a tensor is treated by weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization scale/shift.
    Affine,
}

#[derive(Debug)]
pub struct Param<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// A container of trainable tensors visited in a fixed order.
///
/// Gradient containers are values of the same type, so two containers can
/// be zipped parameter by parameter.
pub trait Parameters {
    fn params(&self, prefix: &str) -> Vec<Param<'_>>;
    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>>;

    fn num_params(&self) -> usize {
        self.params("").iter().map(|p| p.data.len()).sum()
    }

    /// `self += other`, parameter by parameter.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.params_mut("").into_iter().zip(other.params("")) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    fn fill_zero(&mut self) {
        for p in self.params_mut("") {
            p.data.fill(0.0);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn view<'a, S, D>(prefix: &str, name: &str, kind: ParamKind, a: &'a ArrayBase<S, D>) -> Param<'a>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    Param {
        name: join(prefix, name),
        kind,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameter tensors are contiguous"),
    }
}

pub(crate) fn view_mut<'a, S, D>(
    prefix: &str,
    name: &str,
    kind: ParamKind,
    a: &'a mut ArrayBase<S, D>,
) -> ParamMut<'a>
where
    S: DataMut<Elem = f64>,
    D: Dimension,
{
    let shape = a.shape().to_vec();
    ParamMut {
        name: join(prefix, name),
        kind,
        shape,
        data: a.as_slice_mut().expect("parameter tensors are contiguous"),
    }
}

impl Parameters for ConvParams {
    fn params(&self, prefix: &str) -> Vec<Param<'_>> {
        vec![
            view(prefix, "weight", ParamKind::Weight, &self.weights),
            view(prefix, "bias", ParamKind::Bias, &self.bias),
        ]
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        vec![
            view_mut(prefix, "weight", ParamKind::Weight, &mut self.weights),
            view_mut(prefix, "bias", ParamKind::Bias, &mut self.bias),
        ]
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn params(&self, prefix: &str) -> Vec<Param<'_>> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| p.params(&join(prefix, &i.to_string())))
            .collect()
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        self.iter_mut()
            .enumerate()
            .flat_map(|(i, p)| p.params_mut(&join(prefix, &i.to_string())))
            .collect()
    }
}
