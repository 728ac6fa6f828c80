//! Bidirectional GRU sentence encoder and the keyword branch (shared GRU
//! followed by a one-hidden-layer MLP).

use crate::rng::Rng;
use crate::tensor::{activate, matvec, Activation, Tensor};
use crate::text::{EmbeddingTable, TextError, TokenSeq, Vocabulary};

/// One direction of the recurrent cell: update/reset gates and the tanh
/// candidate, each with input-to-hidden and hidden-to-hidden maps plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GruDirection {
    pub w_update: Tensor,
    pub u_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
}

impl GruDirection {
    pub fn seeded(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_update: rng.linear_init(&[hidden, input_dim]),
            u_update: rng.linear_init(&[hidden, hidden]),
            b_update: Tensor::zeros(&[hidden]),
            w_reset: rng.linear_init(&[hidden, input_dim]),
            u_reset: rng.linear_init(&[hidden, hidden]),
            b_reset: Tensor::zeros(&[hidden]),
            w_cand: rng.linear_init(&[hidden, input_dim]),
            u_cand: rng.linear_init(&[hidden, hidden]),
            b_cand: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_update: Tensor::zeros(&[hidden, input_dim]),
            u_update: Tensor::zeros(&[hidden, hidden]),
            b_update: Tensor::zeros(&[hidden]),
            w_reset: Tensor::zeros(&[hidden, input_dim]),
            u_reset: Tensor::zeros(&[hidden, hidden]),
            b_reset: Tensor::zeros(&[hidden]),
            w_cand: Tensor::zeros(&[hidden, input_dim]),
            u_cand: Tensor::zeros(&[hidden, hidden]),
            b_cand: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_update.shape()[0]
    }

    /// One step: `h' = (1 - z) * n + z * h`.
    pub fn step(&self, input: &Tensor, state: &Tensor) -> Result<Tensor, TextError> {
        let z = activate(
            &matvec(&self.w_update, input)?
                .add(&matvec(&self.u_update, state)?)?
                .add(&self.b_update)?,
            Activation::Sigmoid,
        );
        let r = activate(
            &matvec(&self.w_reset, input)?
                .add(&matvec(&self.u_reset, state)?)?
                .add(&self.b_reset)?,
            Activation::Sigmoid,
        );
        let gated_state = r.hadamard(state)?;
        let n = activate(
            &matvec(&self.w_cand, input)?
                .add(&matvec(&self.u_cand, &gated_state)?)?
                .add(&self.b_cand)?,
            Activation::Tanh,
        );
        let keep = z.hadamard(state)?;
        let fresh = z.map(|v| 1.0 - v).hadamard(&n)?;
        Ok(keep.add(&fresh)?)
    }
}

/// Parameters for both directions. States start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BiGruParams {
    pub forward: GruDirection,
    pub backward: GruDirection,
}

impl BiGruParams {
    pub fn seeded(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            forward: GruDirection::seeded(input_dim, hidden, rng),
            backward: GruDirection::seeded(input_dim, hidden, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            forward: GruDirection::zeros(input_dim, hidden),
            backward: GruDirection::zeros(input_dim, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }
}

/// Per-step fused states plus their arithmetic mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    pub steps: Vec<Tensor>,
    pub pooled: Tensor,
}

/// Run both directions over the sequence; each step state is the average of
/// the forward and backward states at that position, and the pooled vector
/// is the mean over steps.
pub fn bigru_encode(
    tokens: &TokenSeq,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    params: &BiGruParams,
) -> Result<TextEncoding, TextError> {
    if tokens.is_empty() {
        return Err(TextError::EmptyText);
    }
    let inputs = table.embed_sequence(vocab, tokens);
    encode_embedded(&inputs, params)
}

fn encode_embedded(inputs: &[Tensor], params: &BiGruParams) -> Result<TextEncoding, TextError> {
    let hidden = params.hidden();
    let len = inputs.len();

    let mut fwd = Vec::with_capacity(len);
    let mut state = Tensor::zeros(&[hidden]);
    for input in inputs {
        state = params.forward.step(input, &state)?;
        fwd.push(state.clone());
    }

    let mut bwd = vec![Tensor::zeros(&[hidden]); len];
    state = Tensor::zeros(&[hidden]);
    for (i, input) in inputs.iter().enumerate().rev() {
        state = params.backward.step(input, &state)?;
        bwd[i] = state.clone();
    }

    let mut steps = Vec::with_capacity(len);
    let mut pooled = Tensor::zeros(&[hidden]);
    for (f, b) in fwd.iter().zip(&bwd) {
        let s = f.add(b)?.scale(0.5);
        pooled = pooled.add(&s)?;
        steps.push(s);
    }
    pooled = pooled.scale(1.0 / len as f64);
    Ok(TextEncoding { steps, pooled })
}

/// One-hidden-layer perceptron with tanh in the middle.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w_hidden: Tensor,
    pub b_hidden: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl MlpParams {
    pub fn seeded(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w_hidden: rng.linear_init(&[hidden, input]),
            b_hidden: Tensor::zeros(&[hidden]),
            w_out: rng.linear_init(&[output, hidden]),
            b_out: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w_hidden: Tensor::zeros(&[hidden, input]),
            b_hidden: Tensor::zeros(&[hidden]),
            w_out: Tensor::zeros(&[output, hidden]),
            b_out: Tensor::zeros(&[output]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TextError> {
        let mid = activate(
            &matvec(&self.w_hidden, x)?.add(&self.b_hidden)?,
            Activation::Tanh,
        );
        Ok(matvec(&self.w_out, &mid)?.add(&self.b_out)?)
    }
}

/// Encode 1..5 keyword phrases: each phrase goes through the shared GRU,
/// the per-phrase pooled states are averaged, and the mean runs through the
/// MLP to give the keyword global vector.
pub fn encode_keywords(
    phrases: &[TokenSeq],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    params: &BiGruParams,
    mlp: &MlpParams,
) -> Result<TextEncoding, TextError> {
    if phrases.is_empty() {
        return Err(TextError::NoKeywords);
    }
    let mut mean = Tensor::zeros(&[params.hidden()]);
    for phrase in phrases {
        let enc = bigru_encode(phrase, vocab, table, params)?;
        mean = mean.add(&enc.pooled)?;
    }
    mean = mean.scale(1.0 / phrases.len() as f64);
    let pooled = mlp.forward(&mean)?;
    Ok(TextEncoding {
        steps: vec![mean],
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn setup(hidden: usize, dim: usize, seed: u64) -> (Vocabulary, EmbeddingTable, BiGruParams) {
        let vocab = Vocabulary::from_sequences(&[tokenize("red roof port river green field")]);
        let mut rng = Rng::new(seed);
        let table = EmbeddingTable::seeded(&vocab, dim, &mut rng);
        let params = BiGruParams::seeded(dim, hidden, &mut rng);
        (vocab, table, params)
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let vocab = Vocabulary::from_sequences(&[tokenize("red roof")]);
        let mut rng = Rng::new(1);
        let table = EmbeddingTable::seeded(&vocab, 4, &mut rng);
        let params = BiGruParams::zeros(4, 3);
        let enc = bigru_encode(&tokenize("red roof"), &vocab, &table, &params).unwrap();
        for s in &enc.steps {
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
        assert!(enc.pooled.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_pooled_equals_step() {
        let (vocab, table, params) = setup(5, 4, 2);
        let enc = bigru_encode(&tokenize("red"), &vocab, &table, &params).unwrap();
        assert_eq!(enc.steps.len(), 1);
        assert_eq!(enc.pooled, enc.steps[0]);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (vocab, table, params) = setup(5, 4, 2);
        assert!(matches!(
            bigru_encode(&tokenize(""), &vocab, &table, &params),
            Err(TextError::EmptyText)
        ));
    }

    #[test]
    fn encoding_is_bit_reproducible() {
        let (vocab, table, params) = setup(6, 4, 3);
        let a = bigru_encode(&tokenize("red roof port"), &vocab, &table, &params).unwrap();
        let b = bigru_encode(&tokenize("red roof port"), &vocab, &table, &params).unwrap();
        assert_eq!(a, b);
    }

    /// Independent scalar unroll of the cell for a two-token sequence.
    #[test]
    fn two_token_case_matches_hand_unrolled_cell() {
        let (vocab, table, params) = setup(3, 2, 7);
        let seq = tokenize("red roof");
        let enc = bigru_encode(&seq, &vocab, &table, &params).unwrap();

        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let unroll = |dir: &GruDirection, xs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let h = dir.hidden();
            let mut state = vec![0.0; h];
            let mut states = Vec::new();
            let mv = |m: &Tensor, v: &[f64]| -> Vec<f64> {
                let cols = m.shape()[1];
                (0..m.shape()[0])
                    .map(|r| (0..cols).map(|c| m.data()[r * cols + c] * v[c]).sum())
                    .collect()
            };
            for x in xs {
                let wz = mv(&dir.w_update, x);
                let uz = mv(&dir.u_update, &state);
                let wr = mv(&dir.w_reset, x);
                let ur = mv(&dir.u_reset, &state);
                let z: Vec<f64> = (0..h)
                    .map(|i| sigmoid(wz[i] + uz[i] + dir.b_update.data()[i]))
                    .collect();
                let r: Vec<f64> = (0..h)
                    .map(|i| sigmoid(wr[i] + ur[i] + dir.b_reset.data()[i]))
                    .collect();
                let rh: Vec<f64> = (0..h).map(|i| r[i] * state[i]).collect();
                let wn = mv(&dir.w_cand, x);
                let un = mv(&dir.u_cand, &rh);
                let n: Vec<f64> = (0..h)
                    .map(|i| (wn[i] + un[i] + dir.b_cand.data()[i]).tanh())
                    .collect();
                state = (0..h)
                    .map(|i| z[i] * state[i] + (1.0 - z[i]) * n[i])
                    .collect();
                states.push(state.clone());
            }
            states
        };

        let xs: Vec<Vec<f64>> = table
            .embed_sequence(&vocab, &seq)
            .iter()
            .map(|t| t.data().to_vec())
            .collect();
        let fwd = unroll(&params.forward, &xs);
        let xs_rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bwd = unroll(&params.backward, &xs_rev);
        bwd.reverse();

        for (t, step) in enc.steps.iter().enumerate() {
            for i in 0..3 {
                let want = (fwd[t][i] + bwd[t][i]) / 2.0;
                assert!(
                    (step.data()[i] - want).abs() < 1e-12,
                    "t={t} i={i}: {} vs {want}",
                    step.data()[i]
                );
            }
        }
    }

    #[test]
    fn keywords_mean_invariance() {
        let (vocab, table, params) = setup(4, 3, 5);
        let mut rng = Rng::new(9);
        let mlp = MlpParams::seeded(4, 6, 4, &mut rng);
        let one = encode_keywords(&[tokenize("red roof")], &vocab, &table, &params, &mlp).unwrap();
        let five = encode_keywords(
            &vec![tokenize("red roof"); 5],
            &vocab,
            &table,
            &params,
            &mlp,
        )
        .unwrap();
        for (a, b) in one.pooled.data().iter().zip(five.pooled.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_parameters_give_zero_keyword_vector() {
        let vocab = Vocabulary::from_sequences(&[tokenize("red roof")]);
        let mut rng = Rng::new(1);
        let table = EmbeddingTable::seeded(&vocab, 4, &mut rng);
        let params = BiGruParams::zeros(4, 3);
        let mlp = MlpParams::zeros(3, 5, 3);
        let enc =
            encode_keywords(&[tokenize("red roof")], &vocab, &table, &params, &mlp).unwrap();
        assert!(enc.pooled.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_keywords_is_a_distinct_error() {
        let (vocab, table, params) = setup(4, 3, 5);
        let mut rng = Rng::new(9);
        let mlp = MlpParams::seeded(4, 6, 4, &mut rng);
        assert!(matches!(
            encode_keywords(&[], &vocab, &table, &params, &mlp),
            Err(TextError::NoKeywords)
        ));
    }

    /// The keyword branch must equal the composition GRU -> mean -> MLP.
    #[test]
    fn keyword_branch_matches_composition() {
        let (vocab, table, params) = setup(4, 3, 13);
        let mut rng = Rng::new(21);
        let mlp = MlpParams::seeded(4, 6, 4, &mut rng);
        let phrases = [tokenize("red-roof"), tokenize("-port")];
        let enc = encode_keywords(&phrases, &vocab, &table, &params, &mlp).unwrap();

        let a = bigru_encode(&phrases[0], &vocab, &table, &params).unwrap();
        let b = bigru_encode(&phrases[1], &vocab, &table, &params).unwrap();
        let mean = a.pooled.add(&b.pooled).unwrap().scale(0.5);
        let want = mlp.forward(&mean).unwrap();
        for (x, y) in enc.pooled.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
