//! Tokenization, n-best lists, WER scoring and frame-to-character alignment.

mod beam;
mod tokenizer;
mod wer;

pub use beam::{beam_search, greedy, BeamConfig, BeamModel, Hypothesis, NBestList, NBestRecord};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};
pub use wer::{
    align, edit_distance, normalize_words, pooled_wer, wer, wer_str, AlignedPair, EditAlignment,
    EditOp,
};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Looks up `tokens` in an embedding table (`vocab x D`).
pub fn embed_text(g: &mut Graph, table: Var, tokens: &[usize]) -> Result<Var> {
    g.embedding(table, tokens)
}

/// Sizes of `n` contiguous segments covering `t` frames, larger ones first.
pub fn segment_sizes(t: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let (q, r) = (t / n, t % n);
    (0..n).map(|i| q + usize::from(i < r)).collect()
}

/// Pools `x_audio` (`T x D`) into `char_count` rows and projects them with `w`, `b`.
///
/// When `char_count > T` frames are repeated: row `i` takes frame `i * T / char_count`.
pub fn align_frames_to_chars(
    g: &mut Graph,
    x_audio: Var,
    char_count: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    let t = g.shape(x_audio)[0];
    if char_count == 0 {
        return Err(Error::invalid("char_count must be at least 1"));
    }
    if t == 0 {
        return Err(Error::Empty("acoustic frames"));
    }
    let pooled = if char_count <= t {
        g.mean_pool_segments(x_audio, &segment_sizes(t, char_count))?
    } else {
        let idx: Vec<usize> = (0..char_count).map(|i| i * t / char_count).collect();
        g.gather_rows(x_audio, &idx)?
    };
    let projected = g.matmul(pooled, w)?;
    g.add_row(projected, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn identity(g: &mut Graph, d: usize) -> (Var, Var) {
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        (
            g.constant(eye).unwrap(),
            g.constant(Tensor::zeros(vec![d])).unwrap(),
        )
    }

    fn frames(t: usize) -> Tensor {
        Tensor::new(vec![t, 2], (0..2 * t).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn uneven_split_puts_remainder_first() {
        assert_eq!(segment_sizes(6, 3), vec![2, 2, 2]);
        assert_eq!(segment_sizes(7, 3), vec![3, 2, 2]);
    }

    #[test]
    fn even_split_pools_means() {
        let mut g = Graph::inference();
        let x = g.constant(frames(6)).unwrap();
        let (w, b) = identity(&mut g, 2);
        let y = align_frames_to_chars(&mut g, x, 3, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn one_char_per_frame_is_projection() {
        let mut g = Graph::inference();
        let x = g.constant(frames(4)).unwrap();
        let (w, b) = identity(&mut g, 2);
        let y = align_frames_to_chars(&mut g, x, 4, w, b).unwrap();
        assert_eq!(g.value(y), &frames(4));
    }

    #[test]
    fn more_chars_than_frames_repeats() {
        let mut g = Graph::inference();
        let x = g.constant(frames(2)).unwrap();
        let (w, b) = identity(&mut g, 2);
        let y = align_frames_to_chars(&mut g, x, 4, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn embedding_lookup() {
        let mut g = Graph::inference();
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let table = g.constant(eye).unwrap();
        let e = embed_text(&mut g, table, &[2, 0, 2]).unwrap();
        assert_eq!(
            g.value(e).data(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
        let empty = embed_text(&mut g, table, &[]).unwrap();
        assert_eq!(g.shape(empty), &[0, 3]);
        assert!(matches!(
            embed_text(&mut g, table, &[3]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn segments_cover_and_balance(t in 1usize..200, n in 1usize..50) {
            let s = segment_sizes(t, n);
            prop_assert_eq!(s.iter().sum::<usize>(), t);
            let (lo, hi) = (s.iter().min().unwrap(), s.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
