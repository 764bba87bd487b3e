use super::graph::log_sum_exp;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Outcome of drawing from a categorical distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Log-probabilities and entropy of the softmax of `logits` (`-inf` allowed).
pub fn log_probs(logits: &[f64]) -> Result<(Vec<f64>, f64)> {
    let lse = log_sum_exp(logits)
        .ok_or_else(|| Error::contract("categorical distribution with no finite logit"))?;
    let lp: Vec<f64> = logits.iter().map(|&l| l - lse).collect();
    let entropy = lp
        .iter()
        .filter(|&&v| v > f64::NEG_INFINITY)
        .map(|&v| -v.exp() * v)
        .sum::<f64>()
        .max(0.0);
    Ok((lp, entropy))
}

/// Draws an index with probability `softmax(logits)`; `-inf` entries are never drawn.
pub fn categorical_sample(logits: &[f64], rng: &mut Rng) -> Result<Draw> {
    let (lp, entropy) = log_probs(logits)?;
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &l) in lp.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        last = Some(i);
        acc += l.exp();
        if u < acc {
            return Ok(Draw { index: i, log_prob: l, entropy });
        }
    }
    // Rounding left u above the cumulative mass; fall back to the last support point.
    let i = last.expect("log_probs guarantees a finite entry");
    Ok(Draw {
        index: i,
        log_prob: lp[i],
        entropy,
    })
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> Result<Draw> {
    let (lp, entropy) = log_probs(logits)?;
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    Ok(Draw {
        index: best,
        log_prob: lp[best],
        entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn single_finite_logit_is_certain() {
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..100 {
            let d = categorical_sample(&[NEG, 3.0, NEG], &mut rng).unwrap();
            assert_eq!(d.index, 1);
            assert_eq!(d.log_prob, 0.0);
            assert_eq!(d.entropy, 0.0);
        }
    }

    #[test]
    fn all_masked_is_contract_error() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(categorical_sample(&[NEG, NEG], &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_index_never_drawn() {
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let d = categorical_sample(&[0.5, NEG, -0.5, 20.0], &mut rng).unwrap();
            assert_ne!(d.index, 1);
        }
    }

    #[test]
    fn frequencies_match_softmax() {
        // p = (1/4, 3/4); binomial sd over 1e5 draws = sqrt(n p q) ~ 136.9.
        let mut rng = Rng::seed_from_u64(2024);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| categorical_sample(&[0.0, 3f64.ln()], &mut rng).unwrap().index == 1)
            .count() as f64;
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        assert!((hits - 0.75 * n as f64).abs() < 3.0 * sd, "hits {hits}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 5.0, 5.0, NEG]).unwrap().index, 1);
        assert_eq!(argmax(&[NEG, NEG, 0.0]).unwrap().index, 2);
    }

    #[test]
    fn entropy_of_uniform() {
        let (_, h) = log_probs(&[0.0; 4]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
    }
}
