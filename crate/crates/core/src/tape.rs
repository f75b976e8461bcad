//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends its output value and a closure that maps the output
//! gradient onto its inputs. [`Tape::backward`] walks the tape in reverse.
//! Nodes whose inputs need no gradient record no closure at all, so constant
//! inputs (images, labels, masks) cost nothing on the way back.

use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>], &mut Grads<T>)>;

pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    backward: Vec<Option<BackwardFn<T>>>,
    needs_grad: Vec<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), backward: Vec::new(), needs_grad: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Input that gradients are tracked for.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn chw(&self, v: Var) -> (usize, usize, usize) {
        self.values[v.0].chw()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, f: Option<BackwardFn<T>>) -> Var {
        self.values.push(value);
        self.backward.push(f);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    /// Record an operation. `f` receives the output gradient, all tape values
    /// and the gradient accumulator; it is dropped if no parent needs a gradient.
    pub(crate) fn op<F>(&mut self, value: Tensor<T>, parents: &[Var], f: F) -> Var
    where
        F: Fn(&[T], &[Tensor<T>], &mut Grads<T>) + 'static,
    {
        let needs = parents.iter().any(|p| self.needs_grad[p.0]);
        let f: Option<BackwardFn<T>> = if needs { Some(Box::new(f)) } else { None };
        self.push(value, needs, f)
    }

    /// Back-propagate from a scalar. Gradients of intermediate nodes are
    /// released once consumed; leaf gradients remain readable.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.values[loss.0].len(), 1, "backward() needs a scalar output");
        let mut grads = Grads {
            slots: (0..self.values.len()).map(|_| None).collect(),
            sizes: self.values.iter().map(|v| v.len()).collect(),
            needs: self.needs_grad.clone(),
        };
        grads.slots[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(f) = &self.backward[i] else { continue };
            if let Some(g) = grads.slots[i].take() {
                f(&g, &self.values, &mut grads);
            }
        }
        grads
    }
}

/// Gradient accumulator produced by [`Tape::backward`].
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
    needs: Vec<bool>,
}

impl<T: Real> Grads<T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let n = self.sizes[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        for (d, &s) in self.slot(v).iter_mut().zip(g) {
            *d += s;
        }
    }

    /// Gradient of a leaf, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots[v.0].as_deref()
    }

    /// Gradient of a leaf, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<T> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); self.sizes[v.0]])
    }
}
