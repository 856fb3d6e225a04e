//! Mixes bias into a labelled pool and colours digits by their label.
use ndarray::Array2;
use nullsample::data::{colorize, make_representative, split_biased, LabelledDataset, Split};
use nullsample::metrics::empirical_mi;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5000;
    let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let pool = LabelledDataset::new(Array2::zeros((n, 1)), [1, 1, 1], s, Some(y), Split::Pool);

    let (rep, labelled) = make_representative(&pool, 0.2, &mut rng)?;
    println!("representative set {} rows, labelled {}", rep.len(), labelled.len());
    for eta in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let (train, test) = split_biased(&labelled, eta, &mut rng)?;
        let mi = empirical_mi(&train.s, train.targets()?)?;
        println!("eta {eta:.2}: train {} test {} MI(s, y) {mi:.3}", train.len(), test.len());
    }

    let gray = Array2::from_elem((6, 4), 1.0);
    let digits = [0, 1, 2, 3, 4, 5];
    let (_, colours) = colorize(gray.view(), &digits, 0.0, true, &mut rng)?;
    println!("biased colours {colours:?}");
    let (_, colours) = colorize(gray.view(), &digits, 0.0, false, &mut rng)?;
    println!("unbiased colours {colours:?}");
    Ok(())
}
