//! Flat parameter storage with named, shaped slices.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// All trainable values of one network in a single contiguous vector.
/// Gradients and optimizer moments use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Adds a tensor filled uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let len: usize = shape.iter().product();
        let values: Vec<f64> = (0..len)
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.add(name, shape, values)
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "{name}: value count");
        let offset = self.values.len();
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        self.values.extend(values);
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        &self.values[self.specs[id.0].range()]
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        view2(&self.values, &self.specs[id.0])
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    /// Replaces the values from another set with an identical layout.
    pub fn copy_from(&mut self, other: &ParamSet) {
        assert_eq!(self.specs, other.specs, "parameter layouts differ");
        self.values.copy_from_slice(&other.values);
    }
}

fn view2<'a>(buf: &'a [f64], spec: &ParamSpec) -> ArrayView2<'a, f64> {
    let (r, c) = matrix_dims(spec);
    ArrayView2::from_shape((r, c), &buf[spec.range()]).expect("contiguous parameter")
}

/// Rows are the first dimension, columns everything else.
fn matrix_dims(spec: &ParamSpec) -> (usize, usize) {
    match spec.shape.as_slice() {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

/// Mutable views into a gradient buffer laid out like a [`ParamSet`].
pub struct GradView<'a> {
    specs: &'a [ParamSpec],
    buf: &'a mut [f64],
}

impl<'a> GradView<'a> {
    pub fn new(params: &'a ParamSet, buf: &'a mut [f64]) -> Self {
        assert_eq!(params.len(), buf.len());
        Self {
            specs: &params.specs,
            buf,
        }
    }

    pub fn mat(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let spec = &self.specs[id.0];
        let (r, c) = matrix_dims(spec);
        ArrayViewMut2::from_shape((r, c), &mut self.buf[spec.range()]).expect("contiguous parameter")
    }

    pub fn vec(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let spec = &self.specs[id.0];
        ArrayViewMut1::from(&mut self.buf[spec.range()])
    }

    /// Several distinct tensors at once, as matrices in the order given.
    /// Panics if an id repeats.
    pub fn many<const N: usize>(&mut self, ids: [ParamId; N]) -> [ArrayViewMut2<'_, f64>; N] {
        let mut order: Vec<usize> = (0..N).collect();
        order.sort_by_key(|&i| self.specs[ids[i].0].offset);
        let mut out: [Option<ArrayViewMut2<'_, f64>>; N] = std::array::from_fn(|_| None);
        let mut rest: &mut [f64] = self.buf;
        let mut consumed = 0;
        for i in order {
            let spec = &self.specs[ids[i].0];
            assert!(spec.offset >= consumed, "parameter {} requested twice", spec.name);
            let tail = std::mem::take(&mut rest);
            let (_, tail) = tail.split_at_mut(spec.offset - consumed);
            let (head, tail) = tail.split_at_mut(spec.len());
            rest = tail;
            consumed = spec.offset + spec.len();
            out[i] = Some(ArrayViewMut2::from_shape(matrix_dims(spec), head).expect("contiguous parameter"));
        }
        out.map(|v| v.expect("every id assigned"))
    }
}

/// Drops the leading unit axis of a bias handed out by [`GradView::many`].
pub fn as_vec(m: ArrayViewMut2<'_, f64>) -> ArrayViewMut1<'_, f64> {
    m.index_axis_move(ndarray::Axis(0), 0)
}
