//! Named, enumerable model parameters.
//!
//! The same model-building code runs against three parameter sources: a fresh
//! random initialization, an existing [`ParamStore`] (training, checkpoints),
//! or an externally supplied tensor list (gradient checking). Parameter order
//! is fixed by construction order and identical across all three.

use rand::Rng;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))
    GlorotUniform,
    /// uniform(-a, a) with a = sqrt(3/2), giving rows an expected norm of
    /// sqrt(d/2) — the same scale as a sinusoidal positional-encoding row, so
    /// token identity is not drowned out when the two are added.
    EmbeddingUniform,
    /// Glorot-uniform plus a constant `lift` added to every weight in rows
    /// `first_row..fan_in`. Used for combiner layers whose trailing input
    /// block is an elementwise product of two matched sequences: the lifted
    /// rows give the summed product (a match-strength signal) a consistent
    /// positive readout from the first step, instead of leaving it to cancel
    /// under a zero-mean init.
    GlorotUniformRowsLifted { first_row: usize, lift: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<F>,
}

/// Flat list of every learnable tensor, in model construction order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    pub entries: Vec<StoreEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&StoreEntry<F>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| StoreEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: e.values.iter().map(|&v| v.to_f64_val()).collect(),
                })
                .collect(),
        }
    }
}

pub trait ParamSource<F: Scalar> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Tensor<F>;
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        // conv kernel [k, d_in, d_out]
        3 => (shape[0] * shape[1], shape[0] * shape[2]),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

/// Draws fresh values and records them into a new store.
pub struct InitSource<'r, F, R: Rng> {
    pub rng: &'r mut R,
    pub store: ParamStore<F>,
}

impl<'r, F: Scalar, R: Rng> InitSource<'r, F, R> {
    pub fn new(rng: &'r mut R) -> Self {
        InitSource { rng, store: ParamStore { entries: Vec::new() } }
    }
}

impl<'r, F: Scalar, R: Rng> ParamSource<F> for InitSource<'r, F, R> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let values: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::GlorotUniform => {
                let (fan_in, fan_out) = fans(shape);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| F::from_f64(self.rng.gen_range(-a..a))).collect()
            }
            Init::EmbeddingUniform => {
                let a = 1.5f64.sqrt();
                (0..n).map(|_| F::from_f64(self.rng.gen_range(-a..a))).collect()
            }
            Init::GlorotUniformRowsLifted { first_row, lift } => {
                let (fan_in, fan_out) = fans(shape);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let cols = n / shape[0];
                (0..n)
                    .map(|i| {
                        let row = i / cols;
                        let base = self.rng.gen_range(-a..a);
                        F::from_f64(if row >= first_row { base + lift } else { base })
                    })
                    .collect()
            }
        };
        self.store.entries.push(StoreEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: values.clone(),
        });
        Tensor::param(shape.to_vec(), values).unwrap()
    }
}

/// Binds leaf tensors to an existing store, checking names and shapes.
pub struct BindSource<'a, F: Scalar> {
    store: &'a ParamStore<F>,
    cursor: usize,
    pub bound: Vec<(String, Tensor<F>)>,
}

impl<'a, F: Scalar> BindSource<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        BindSource { store, cursor: 0, bound: Vec::new() }
    }

    pub fn finish(self) -> Result<Vec<(String, Tensor<F>)>> {
        if self.cursor != self.store.entries.len() {
            return Err(TensorError::Invalid(format!(
                "store has {} parameters but the model bound {}",
                self.store.entries.len(),
                self.cursor
            )));
        }
        Ok(self.bound)
    }
}

impl<'a, F: Scalar> ParamSource<F> for BindSource<'a, F> {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Tensor<F> {
        let e = self
            .store
            .entries
            .get(self.cursor)
            .unwrap_or_else(|| panic!("store exhausted at parameter {name}"));
        assert_eq!(e.name, name, "parameter order mismatch at index {}", self.cursor);
        assert_eq!(e.shape, shape, "shape mismatch for parameter {name}");
        self.cursor += 1;
        let t = Tensor::param(shape.to_vec(), e.values.clone()).unwrap();
        self.bound.push((name.to_string(), t.clone()));
        t
    }
}

/// Hands out pre-built tensors in order (gradient checking).
pub struct SliceSource<'a, F: Scalar> {
    tensors: &'a [Tensor<F>],
    cursor: usize,
}

impl<'a, F: Scalar> SliceSource<'a, F> {
    pub fn new(tensors: &'a [Tensor<F>]) -> Self {
        SliceSource { tensors, cursor: 0 }
    }
}

impl<'a, F: Scalar> ParamSource<F> for SliceSource<'a, F> {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Tensor<F> {
        let t = self
            .tensors
            .get(self.cursor)
            .unwrap_or_else(|| panic!("tensor list exhausted at parameter {name}"))
            .clone();
        assert_eq!(t.shape(), shape, "shape mismatch for parameter {name}");
        self.cursor += 1;
        t
    }
}

/// Test-only source: zeros/ones as declared, every glorot tensor filled with a
/// fixed constant.
#[cfg(test)]
pub struct ConstSource {
    pub glorot: f64,
}

#[cfg(test)]
impl ParamSource<f64> for ConstSource {
    fn param(&mut self, _name: &str, shape: &[usize], init: Init) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let fill = match init {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::GlorotUniform
            | Init::EmbeddingUniform
            | Init::GlorotUniformRowsLifted { .. } => self.glorot,
        };
        Tensor::param(shape.to_vec(), vec![fill; n]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_bind_round_trip_preserves_order_and_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut src = InitSource::<f64, _>::new(&mut rng);
        let a = src.param("a", &[2, 3], Init::GlorotUniform);
        let b = src.param("b", &[3], Init::Zeros);
        let store = src.store;
        assert_eq!(store.entries.len(), 2);
        assert_eq!(store.num_values(), 9);
        assert_eq!(store.get("a").unwrap().values, a.values());
        assert_eq!(store.get("b").unwrap().values, b.values());

        let mut bind = BindSource::new(&store);
        let a2 = bind.param("a", &[2, 3], Init::GlorotUniform);
        let b2 = bind.param("b", &[3], Init::Zeros);
        assert_eq!(a2.values(), a.values());
        assert_eq!(b2.values(), b.values());
        assert_eq!(bind.finish().unwrap().len(), 2);
    }

    #[test]
    fn bind_detects_incomplete_consumption() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut src = InitSource::<f64, _>::new(&mut rng);
        src.param("a", &[2], Init::Zeros);
        src.param("b", &[2], Init::Zeros);
        let store = src.store;
        let mut bind = BindSource::new(&store);
        bind.param("a", &[2], Init::Zeros);
        assert!(bind.finish().is_err());
    }

    #[test]
    fn glorot_respects_fan_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut src = InitSource::<f64, _>::new(&mut rng);
        let t = src.param("w", &[10, 30], Init::GlorotUniform);
        let a = (6.0 / 40.0f64).sqrt();
        assert!(t.values().iter().all(|v| v.abs() <= a));
    }
}
