use itertools::Itertools;

use crate::error::{Error, Result};

/// Reported value for perfect (or perfectly wrong) estimates.
pub const SI_SNR_CAP_DB: f64 = 60.0;

/// Scale-invariant SNR in dB, clamped to ±`SI_SNR_CAP_DB`. Signals are not
/// mean-centred.
pub fn si_snr(est: &[f32], reference: &[f32]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let rr: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
    if rr == 0.0 {
        return Err(Error::UndefinedMetric("SI-SNR against an all-zero reference".into()));
    }
    let er: f64 = est.iter().zip(reference).map(|(&e, &r)| e as f64 * r as f64).sum();
    let alpha = er / rr;
    let target = alpha * alpha * rr;
    let noise: f64 = est
        .iter()
        .zip(reference)
        .map(|(&e, &r)| (alpha * r as f64 - e as f64).powi(2))
        .sum();
    let db = if target == 0.0 {
        -SI_SNR_CAP_DB
    } else if noise == 0.0 {
        SI_SNR_CAP_DB
    } else {
        10.0 * (target / noise).log10()
    };
    Ok(db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// Output-to-reference pairing maximizing the mean SI-SNR over references
/// whose metric is defined. Returns `order` (`order[n]` is the reference
/// paired with output `n`) and the per-reference scores, `None` where the
/// reference is silent. Ties keep the earliest permutation.
pub fn best_assignment(ests: &[&[f32]], refs: &[&[f32]]) -> Result<(Vec<usize>, Vec<Option<f64>>)> {
    if ests.len() != refs.len() || ests.is_empty() {
        return Err(Error::InvalidInput("need equally many estimates and references".into()));
    }
    let mut best: Option<(f64, Vec<usize>, Vec<Option<f64>>)> = None;
    for perm in (0..refs.len()).permutations(refs.len()) {
        let mut scores = vec![None; refs.len()];
        for (n, &r) in perm.iter().enumerate() {
            scores[r] = match si_snr(ests[n], refs[r]) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
        }
        let defined: Vec<f64> = scores.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMetric("every reference is silent".into()));
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        if best.as_ref().is_none_or(|b| mean > b.0) {
            best = Some((mean, perm, scores));
        }
    }
    let (_, order, scores) = best.expect("at least one permutation");
    Ok((order, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng) as f32).collect()
    }

    #[test]
    fn identity_scale_and_noise() {
        let r: Vec<f32> = (0..16000).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(si_snr(&r, &r).unwrap(), SI_SNR_CAP_DB);
        let r2: Vec<f32> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&r2, &r).unwrap(), SI_SNR_CAP_DB);
        // Noise 10 dB below the reference, orthogonalized against it.
        let mut n = noise(r.len(), 0);
        let rr: f64 = r.iter().map(|&v| (v as f64).powi(2)).sum();
        let nr: f64 = n.iter().zip(&r).map(|(&a, &b)| a as f64 * b as f64).sum();
        for (v, &x) in n.iter_mut().zip(&r) {
            *v -= (nr / rr) as f32 * x;
        }
        let nn: f64 = n.iter().map(|&v| (v as f64).powi(2)).sum();
        let g = (rr / nn / 10.0).sqrt() as f32;
        let est: Vec<f32> = r.iter().zip(&n).map(|(a, b)| a + g * b).collect();
        assert!((si_snr(&est, &r).unwrap() - 10.0).abs() < 0.5);
        assert!(matches!(si_snr(&r, &vec![0.0; r.len()]), Err(Error::UndefinedMetric(_))));
        assert!(si_snr(&r, &r[1..]).is_err());
    }

    #[test]
    fn assignment_skips_silent_references() {
        let a = noise(4000, 1);
        let b = noise(4000, 2);
        let z = vec![0f32; 4000];
        let (o, s) = best_assignment(&[&b, &a], &[&a, &b]).unwrap();
        assert_eq!(o, vec![1, 0]);
        assert_eq!(s, vec![Some(SI_SNR_CAP_DB), Some(SI_SNR_CAP_DB)]);
        let (o, s) = best_assignment(&[&z, &a], &[&a, &z]).unwrap();
        assert_eq!(o, vec![1, 0]);
        assert_eq!(s[1], None);
        assert!(best_assignment(&[&a, &b], &[&z, &z]).is_err());
    }
}
