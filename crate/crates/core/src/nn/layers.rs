use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::{glorot, ParamId, ParamStore};
use super::tape::{Gradients, Matrix, Tape, Var};

/// Affine map `x W + b` with `W: [in x out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, input, output));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros((1, output))));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(tape.param(store, self.weight));
        match self.bias {
            Some(b) => y.add_row(tape.param(store, b)),
            None => y,
        }
    }
}

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), input, hidden, true),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, output, true),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let h = self.hidden.forward(tape, store, x).tanh();
        self.out.forward(tape, store, h)
    }
}

/// Scaled dot-product attention for one head. `allowed[q, k]` masks keys.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    allowed: Option<&ndarray::Array2<bool>>,
) -> (Var<'t>, Var<'t>) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let weights = q.matmul(k.t()).scale(scale).softmax_rows(allowed);
    (weights.matmul(v), weights)
}

/// Sum of per-example losses and gradients, computed in parallel with one
/// tape per item. The reduction runs in item order, so results do not
/// depend on thread scheduling. Items whose closure returns `None` are
/// skipped; the count of contributing items is returned alongside.
pub fn batch_gradients<T, F>(store: &ParamStore, items: &[T], loss: F) -> (f64, Gradients, usize)
where
    T: Sync,
    F: for<'t> Fn(&'t Tape, &ParamStore, &T) -> Option<Var<'t>> + Sync + Send,
{
    let parts: Vec<Option<(f64, Gradients)>> = items
        .par_iter()
        .map(|item| {
            let tape = Tape::new();
            loss(&tape, store, item).map(|l| (l.item(), l.backward()))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::default();
    let mut count = 0;
    for (l, g) in parts.into_iter().flatten() {
        total += l;
        grads.accumulate(&g);
        count += 1;
    }
    (total, grads, count)
}
