use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, LabelledDataset, Result, Split};

/// Share of the pool from which the biased training set is drawn; the rest
/// becomes the test set.
const SET_ASIDE: f64 = 0.6;

fn floor_count(fraction: f64, n: usize) -> usize {
    // Guard against products such as 2 * 0.35 * 100 landing just below an
    // integer.
    ((fraction * n as f64) + 1e-9).floor() as usize
}

fn check_binary(what: &'static str, labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&v| v > 1) {
        Some(&value) => Err(DataError::NonBinary { what, value }),
        None => Ok(()),
    }
}

/// Builds a training set whose `s`/`y` agreement is controlled by `eta`, and
/// an ordinary test set.
///
/// A random 60% of the pool is split into records with `s == y` and the
/// rest. For `eta <= 0.5` all agreeing records are kept plus
/// `floor(2 eta |disagreeing|)` of the others; above one half the roles are
/// swapped with `floor(2 (1 - eta) |agreeing|)`. The remaining 40% is the
/// test set.
pub fn split_biased<R: Rng + ?Sized>(
    dataset: &LabelledDataset,
    eta: f64,
    rng: &mut R,
) -> Result<(LabelledDataset, LabelledDataset)> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(DataError::BadEta(eta));
    }
    let y = dataset.targets()?;
    check_binary("s", &dataset.s)?;
    check_binary("y", y)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let cut = floor_count(SET_ASIDE, order.len());
    let (aside, test) = order.split_at(cut);
    let (agree, disagree): (Vec<usize>, Vec<usize>) = aside.iter().partition(|&&i| dataset.s[i] == y[i]);
    let mut train = Vec::with_capacity(aside.len());
    if eta <= 0.5 {
        train.extend_from_slice(&agree);
        train.extend_from_slice(&disagree[..floor_count(2.0 * eta, disagree.len())]);
    } else {
        train.extend_from_slice(&disagree);
        train.extend_from_slice(&agree[..floor_count(2.0 * (1.0 - eta), agree.len())]);
    }
    Ok((dataset.select(&train, Split::Train), dataset.select(test, Split::Test)))
}

/// Draws `floor(fraction * n)` records as the representative set (targets
/// removed) and returns it together with the untouched remainder.
pub fn make_representative<R: Rng + ?Sized>(
    dataset: &LabelledDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<(LabelledDataset, LabelledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let (rep, rest) = order.split_at(floor_count(fraction, order.len()));
    Ok((dataset.select(rep, Split::Representative).without_targets(), dataset.select(rest, Split::Pool)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(n: usize) -> LabelledDataset {
        let s = (0..n).map(|i| i % 2).collect();
        let y = (0..n).map(|i| (i / 2) % 2).collect();
        LabelledDataset::new(Array2::zeros((n, 1)), [1, 1, 1], s, Some(y), Split::Pool)
    }

    #[test]
    fn eta_out_of_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(split_biased(&pool(10), 1.5, &mut rng), Err(DataError::BadEta(_))));
    }

    #[test]
    fn non_binary_labels_are_rejected() {
        let mut d = pool(10);
        d.s[3] = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(split_biased(&d, 0.0, &mut rng), Err(DataError::NonBinary { what: "s", value: 2 })));
    }

    #[test]
    fn representative_drops_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rep, rest) = make_representative(&pool(24), 0.5, &mut rng).unwrap();
        assert_eq!(rep.len(), 12);
        assert!(rep.y.is_none());
        assert_eq!(rest.len(), 12);
        assert!(matches!(make_representative(&pool(4), 1.0, &mut rng), Err(DataError::BadFraction(_))));
    }
}
