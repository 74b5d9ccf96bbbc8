//! Token-level attacks on the generated part of a sequence. The prompt is
//! left untouched.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Delete,
    Substitute,
    CopyPaste,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub ratio: f64,
    /// Watermarked segments for copy-paste; ignored otherwise.
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_segments() -> usize {
    1
}

impl AttackSpec {
    pub fn new(kind: AttackKind, ratio: f64) -> Self {
        AttackSpec {
            kind,
            ratio,
            segments: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.segments == 0 {
            return Err(Error::InvalidConfig("segments must be at least 1".into()));
        }
        if self.kind == AttackKind::CopyPaste && self.ratio >= 1.0 {
            return Err(Error::InvalidConfig(
                "copy-paste ratio must be below 1".into(),
            ));
        }
        Ok(())
    }

    /// Short label such as `delete-0.2` or `cp-3-0.3`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Delete => format!("delete-{}", self.ratio),
            AttackKind::Substitute => format!("substitute-{}", self.ratio),
            AttackKind::CopyPaste => format!("cp-{}-{}", self.segments, self.ratio),
        }
    }

    /// Applies the attack with `seed` mixed into the spec's own seed, so one
    /// spec yields independent attacks across sequences. `filler` is only
    /// read by copy-paste.
    pub fn apply(
        &self,
        text: &TokenSequence,
        vocab: usize,
        filler: &TokenSequence,
        seed: u64,
    ) -> Result<TokenSequence> {
        self.validate()?;
        let seed = self.seed ^ seed.rotate_left(17);
        match self.kind {
            AttackKind::Delete => attack_delete(text, self.ratio, seed),
            AttackKind::Substitute => attack_substitute(text, self.ratio, vocab, seed),
            AttackKind::CopyPaste => {
                attack_copy_paste(text, self.segments, self.ratio, filler, seed)
            }
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "attack ratio must be in [0, 1], got {ratio}"
        )))
    }
}

fn with_generated(text: &TokenSequence, generated: Vec<TokenId>) -> TokenSequence {
    let mut tokens = text.prompt().to_vec();
    tokens.extend(generated);
    TokenSequence::new(tokens, text.prompt_len).expect("prompt kept")
}

/// Removes `floor(ratio * T)` uniformly chosen generated tokens.
pub fn attack_delete(text: &TokenSequence, ratio: f64, seed: u64) -> Result<TokenSequence> {
    check_ratio(ratio)?;
    let generated = text.generated();
    let n = generated.len();
    let remove = (ratio * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; n];
    for i in sample(&mut rng, n, remove) {
        drop[i] = true;
    }
    let kept = generated
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(&t, _)| t)
        .collect();
    Ok(with_generated(text, kept))
}

/// Replaces `floor(ratio * T)` generated tokens by uniformly random different tokens.
pub fn attack_substitute(
    text: &TokenSequence,
    ratio: f64,
    vocab: usize,
    seed: u64,
) -> Result<TokenSequence> {
    check_ratio(ratio)?;
    if vocab < 2 {
        return Err(Error::InvalidConfig(
            "substitution needs at least 2 tokens".into(),
        ));
    }
    let mut generated = text.generated().to_vec();
    let n = generated.len();
    let replace = (ratio * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, n, replace) {
        // Uniform over the other vocab - 1 tokens.
        let old = generated[i].0;
        let r = rng.random_range(0..vocab as u32 - 1);
        generated[i] = TokenId(if r >= old { r + 1 } else { r });
    }
    Ok(with_generated(text, generated))
}

/// Number of filler tokens so that they make up `ratio` of the output.
pub fn filler_needed(watermarked: usize, ratio: f64) -> usize {
    (ratio * watermarked as f64 / (1.0 - ratio)).round() as usize
}

/// Random sizes of `parts` blocks summing to `total`, each at least `min`.
fn random_split<R: Rng>(total: usize, parts: usize, min: usize, rng: &mut R) -> Vec<usize> {
    let free = total - parts * min;
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(free)) {
        sizes.push(c - prev + min);
        prev = c;
    }
    sizes
}

/// Cuts the generated text into `segments` contiguous pieces and interleaves
/// them with filler: `F0 W1 F1 W2 .. Wn Fn`. Cut points and filler block sizes
/// are random; watermarked pieces are non-empty when the text allows it,
/// filler blocks may be empty. Filler tokens come from the start of
/// `filler`'s generated part, in order.
pub fn attack_copy_paste(
    text: &TokenSequence,
    segments: usize,
    ratio: f64,
    filler: &TokenSequence,
    seed: u64,
) -> Result<TokenSequence> {
    check_ratio(ratio)?;
    if segments == 0 {
        return Err(Error::InvalidConfig("segments must be at least 1".into()));
    }
    if ratio >= 1.0 {
        return Err(Error::InvalidConfig(
            "copy-paste ratio must be below 1".into(),
        ));
    }
    let generated = text.generated();
    let t = generated.len();
    let f = filler_needed(t, ratio);
    let source = filler.generated();
    if source.len() < f {
        return Err(Error::InsufficientFiller {
            needed: f,
            available: source.len(),
        });
    }
    if f == 0 {
        return Ok(text.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_piece = usize::from(t >= segments);
    let pieces = random_split(t, segments, min_piece, &mut rng);
    let blocks = random_split(f, segments + 1, 0, &mut rng);

    let mut out = Vec::with_capacity(t + f);
    let (mut w, mut u) = (0, 0);
    for i in 0..=segments {
        out.extend_from_slice(&source[u..u + blocks[i]]);
        u += blocks[i];
        if i < segments {
            out.extend_from_slice(&generated[w..w + pieces[i]]);
            w += pieces[i];
        }
    }
    assert_eq!((w, u, out.len()), (t, f, t + f), "copy-paste layout");
    Ok(with_generated(text, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(prompt: usize, len: usize) -> TokenSequence {
        TokenSequence::new((0..(prompt + len) as u32).map(TokenId).collect(), prompt).unwrap()
    }

    fn filler(len: usize) -> TokenSequence {
        TokenSequence::new((0..len as u32).map(|i| TokenId(10_000 + i)).collect(), 0).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let s = seq(3, 50);
        assert_eq!(attack_delete(&s, 0.0, 1).unwrap(), s);
        assert_eq!(attack_substitute(&s, 0.0, 100, 1).unwrap(), s);
        assert_eq!(attack_copy_paste(&s, 3, 0.0, &filler(0), 1).unwrap(), s);
        for kind in [
            AttackKind::Delete,
            AttackKind::Substitute,
            AttackKind::CopyPaste,
        ] {
            assert_eq!(
                AttackSpec::new(kind, 0.0)
                    .apply(&s, 100, &filler(0), 5)
                    .unwrap(),
                s
            );
        }
    }

    #[test]
    fn delete_counts() {
        let s = seq(2, 10);
        let d = attack_delete(&s, 0.2, 7).unwrap();
        assert_eq!(d.generated().len(), 8);
        assert_eq!(d.prompt(), s.prompt());
        assert!(d.generated().windows(2).all(|w| w[0] < w[1]), "order kept");
        let all = attack_delete(&s, 1.0, 7).unwrap();
        assert!(all.generated().is_empty());
        assert!(attack_delete(&s, 1.5, 7).is_err());
    }

    #[test]
    fn substitute_changes_every_chosen_token() {
        let s = seq(0, 200);
        let a = attack_substitute(&s, 0.3, 1000, 3).unwrap();
        assert_eq!(a.len(), s.len());
        let changed = a
            .tokens
            .iter()
            .zip(&s.tokens)
            .filter(|(x, y)| x != y)
            .count();
        assert_eq!(changed, 60);
        assert!(a.tokens.iter().all(|t| t.0 < 1000));
        // Vocabulary of two: a substitution must flip the token.
        let binary =
            TokenSequence::new(vec![TokenId(0), TokenId(1), TokenId(0), TokenId(1)], 0).unwrap();
        let b = attack_substitute(&binary, 1.0, 2, 3).unwrap();
        assert!(b.tokens.iter().zip(&binary.tokens).all(|(x, y)| x != y));
    }

    #[test]
    fn copy_paste_layout() {
        let s = seq(4, 70);
        let out = attack_copy_paste(&s, 3, 0.3, &filler(40), 11).unwrap();
        let generated = out.generated();
        assert_eq!(generated.len(), 100);
        assert_eq!(out.prompt(), s.prompt());
        let fill: Vec<_> = generated.iter().filter(|t| t.0 >= 10_000).collect();
        assert_eq!(fill.len(), 30);
        // Watermarked tokens keep their order and form at most 3 runs.
        let wm: Vec<_> = generated.iter().filter(|t| t.0 < 10_000).copied().collect();
        assert_eq!(wm, s.generated());
        let runs = generated
            .iter()
            .enumerate()
            .filter(|&(i, t)| t.0 < 10_000 && (i == 0 || generated[i - 1].0 >= 10_000))
            .count();
        assert!((1..=3).contains(&runs));
        assert!(matches!(
            attack_copy_paste(&s, 3, 0.3, &filler(29), 11),
            Err(Error::InsufficientFiller {
                needed: 30,
                available: 29
            })
        ));
        assert!(attack_copy_paste(&s, 3, 1.0, &filler(29), 11).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let s = seq(0, 100);
        assert_eq!(
            attack_delete(&s, 0.4, 1).unwrap(),
            attack_delete(&s, 0.4, 1).unwrap()
        );
        assert_ne!(
            attack_delete(&s, 0.4, 1).unwrap(),
            attack_delete(&s, 0.4, 2).unwrap()
        );
        let f = filler(100);
        assert_eq!(
            attack_copy_paste(&s, 2, 0.4, &f, 5).unwrap(),
            attack_copy_paste(&s, 2, 0.4, &f, 5).unwrap()
        );
    }

    #[test]
    fn spec_serialization() {
        let spec: AttackSpec =
            serde_json::from_str(r#"{"kind":"copy_paste","ratio":0.3,"segments":3}"#).unwrap();
        assert_eq!(spec.kind, AttackKind::CopyPaste);
        assert_eq!(spec.label(), "cp-3-0.3");
        let bad = AttackSpec {
            segments: 0,
            ..spec
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn copy_paste_counts(t in 0usize..200, n in 1usize..6, ratio in 0.0f64..0.9, seed in any::<u64>()) {
            let s = seq(2, t);
            let f = filler_needed(t, ratio);
            let out = attack_copy_paste(&s, n, ratio, &filler(f), seed).unwrap();
            prop_assert_eq!(out.generated().len(), t + f);
        }

        #[test]
        fn delete_keeps_subsequence(t in 0usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
            let s = seq(1, t);
            let d = attack_delete(&s, ratio, seed).unwrap();
            prop_assert_eq!(d.generated().len(), t - (ratio * t as f64).floor() as usize);
            prop_assert!(d.generated().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
