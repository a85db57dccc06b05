//! Text flow: per-episode template choice, semantic-enhancement attention
//! over the episode's class texts, and inflation to prototype shape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::store::EmbeddingStore;
use crate::tensor::{multi_head_attention, AttentionVars, Element, Tape, Tensor, Var};

/// Uniform template index in `0..n_temp`.
pub fn select_template<R: Rng + ?Sized>(rng: &mut R, n_temp: usize) -> Result<usize> {
    if n_temp == 0 {
        return Err(Error::Config("n_temp must be at least 1".into()));
    }
    Ok(rng.random_range(0..n_temp))
}

/// `[N × d]` cached text embeddings for the episode's class slots, all under
/// one template.
pub fn class_text_batch<T: Element>(store: &EmbeddingStore, classes: &[usize], template: usize) -> Result<Tensor<T>> {
    if template >= store.manifest().n_temp {
        return Err(Error::Config(format!(
            "template {template} out of range for n_temp = {}",
            store.manifest().n_temp
        )));
    }
    let d = store.dim();
    let mut data = Vec::with_capacity(classes.len() * d);
    for &c in classes {
        data.extend(store.text(template, c).iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![classes.len(), d], data)
}

/// Multi-head self-attention across the `N` class texts (`[N × d]` →
/// `[N × d_p]`). Row `i` is the enhanced text prototype of slot `i`.
pub fn se_module<'t, T: Element>(texts: Var<'t, T>, params: &AttentionVars<'t, T>) -> Result<Var<'t, T>> {
    let shape = texts.shape();
    let [n, d] = shape[..] else {
        return Err(Error::dim("se_module", format!("expected [N × d], got {shape:?}")));
    };
    let seq = texts.reshape(&[1, n, d])?;
    let out = multi_head_attention(seq, seq, seq, params)?.output;
    let d_out = out.shape()[2];
    out.reshape(&[n, d_out])
}

/// Broadcasts `[N × d_p]` text prototypes to `[n_queries × N × tuples × d_p]`.
pub fn inflate<'t, T: Element>(text_prototypes: Var<'t, T>, n_queries: usize, tuple_count: usize) -> Result<Var<'t, T>> {
    let shape = text_prototypes.shape();
    let [n, d_p] = shape[..] else {
        return Err(Error::dim("inflate", format!("expected [N × d_p], got {shape:?}")));
    };
    text_prototypes
        .reshape(&[1, n, 1, d_p])?
        .broadcast_to(&[n_queries, n, tuple_count, d_p])
}

/// Convenience used by tests and the CLI: SE output for given texts on a fresh tape.
pub fn enhance_texts<T: Element>(texts: &Tensor<T>, params: &crate::tensor::AttentionParams<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = se_module(tape.constant(texts.clone()), &params.bind(&tape))?;
    let v = out.value();
    Ok((*v).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::AttentionParams;

    #[test]
    fn single_template_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| select_template(&mut rng, 1).unwrap() == 0));
        assert!(matches!(select_template(&mut rng, 0), Err(Error::Config(_))));
    }

    #[test]
    fn template_sequence_is_reproducible() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..20).map(|_| select_template(&mut rng, 4).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn template_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_template(&mut rng, 4).unwrap()] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 2500.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn se_with_one_class_is_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::<f64>::init(8, 8, 8, 6, 4, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[1, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let vars = p.bind(&tape);
        let xv = tape.constant(x);
        let out = se_module(xv, &vars).unwrap();
        let direct = xv.matmul(&vars.w_value).unwrap().matmul(&vars.w_out).unwrap();
        assert_eq!(out.shape(), vec![1, 6]);
        assert!(out.value().max_abs_diff(&direct.value()) < 1e-12);
    }

    #[test]
    fn identical_texts_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::<f32>::init(8, 8, 8, 8, 4, &mut rng).unwrap();
        let row = Tensor::<f32>::uniform(&[1, 8], 1.0, &mut rng);
        let other = Tensor::<f32>::uniform(&[1, 8], 1.0, &mut rng);
        let mut data = row.data().to_vec();
        data.extend_from_slice(other.data());
        data.extend_from_slice(row.data());
        let out = enhance_texts(&Tensor::new(vec![3, 8], data).unwrap(), &p).unwrap();
        assert_eq!(&out.data()[..8], &out.data()[16..]);
    }

    #[test]
    fn inflate_broadcasts_exactly() {
        let tape = Tape::<f32>::new();
        let tp = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = inflate(tp, 2, 1).unwrap().value();
        assert_eq!(out.shape(), &[2, 2, 1, 3]);
        for m in 0..2 {
            for c in 0..3 {
                assert_eq!(out.at(&[m, 0, 0, c]), (c + 1) as f32);
                assert_eq!(out.at(&[m, 1, 0, c]), (c + 4) as f32);
            }
        }
    }
}
