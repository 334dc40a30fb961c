use std::collections::HashMap;

use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};
use crate::hash::Fnv1a64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad }
    }

    pub fn reset_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Ordered, named collection of parameters. Registration order is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn reset_grads(&mut self) {
        self.params.iter_mut().for_each(Param::reset_grad);
    }

    /// Adds `grads` into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// Copies values from `other` by name. Shapes must agree.
    pub fn copy_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for p in other.iter() {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {}", p.name)))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} is {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = p.value.cast();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param::new(p.name.clone(), p.value.cast())).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// FNV-1a over names, shapes and single-precision little-endian values.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a64::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            h.write(&(p.value.rows() as u64).to_le_bytes());
            h.write(&(p.value.cols() as u64).to_le_bytes());
            for &x in p.value.data() {
                h.write(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Sparse-by-parameter gradient buffer produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Grads<T: Real> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.slots[id.0].as_ref()
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix<T> {
        self.slots[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn add(&mut self, id: ParamId, g: &Matrix<T>) {
        let slot = self.slot(id, g.shape());
        slot.add_assign(g);
    }

    /// Adds row `i` of `g` into row `rows[i]` of the parameter gradient.
    pub fn scatter_rows(&mut self, id: ParamId, shape: (usize, usize), rows: &[usize], g: &Matrix<T>) {
        let slot = self.slot(id, shape);
        for (i, &r) in rows.iter().enumerate() {
            for (d, &s) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                *d += s;
            }
        }
    }

    pub fn merge(&mut self, other: &Grads<T>) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Matrix::is_finite)
    }

    /// Gradient entry, treating untouched parameters as zero.
    pub fn entry(&self, id: ParamId, flat: usize) -> T {
        self.slots[id.0].as_ref().map_or(T::zero(), |m| m.data()[flat])
    }
}
