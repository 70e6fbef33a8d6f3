//! Forward-pass execution context.

use rand_chacha::ChaCha8Rng;

/// Carries the train/eval switch and the dropout RNG through a forward pass.
/// Eval mode never touches the RNG, so eval forwards are deterministic.
pub struct RunCtx<'r> {
    pub train: bool,
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> RunCtx<'r> {
    pub fn eval() -> Self {
        RunCtx { train: false, dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        RunCtx { train: true, dropout, rng: Some(rng) }
    }

    pub fn dropout_active(&self) -> bool {
        self.train && self.dropout > 0.0
    }
}
