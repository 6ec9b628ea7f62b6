use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable 2-D tensors. Biases are stored as `[1 × n]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<T>> {
        self.values.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap()))
                .collect(),
        }
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    /// LSTM bias row `[1 × 4h]` in i,f,g,o gate order: forget gate at 1.0, the rest 0.
    ForgetGateBias,
}

/// Registers parameters in declaration order while drawing their initial values from one stream.
pub struct ParamBuilder<'a, T> {
    pub store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store: ParamStore::new(),
            rng,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        let value = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let rng = &mut *self.rng;
                Array2::from_shape_simple_fn((rows, cols), || {
                    T::from_f64(rng.random_range(-bound..bound)).unwrap()
                })
            }
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::ForgetGateBias => {
                let hidden = cols / 4;
                let mut b = Array2::zeros((rows, cols));
                b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(T::one());
                b
            }
        };
        self.store.push(name, value)
    }
}
